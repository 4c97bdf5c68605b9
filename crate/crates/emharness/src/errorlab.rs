//! Automated error analysis: collecting misclassified pairs with their
//! explanations, synthesizing named error classes from them, classifying
//! each error into those classes, and scoring the result against human
//! annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::{serialize_explanation, StructuredExplanation};
use crate::llmclient::{ChatBackend, ClientError, CompletionRequest};
use crate::matcher::MatchDecision;
use crate::promptkit::{Message, RenderedConversation};
use crate::records::{frame_pair, CandidatePair, Label};

#[derive(Debug, Error)]
pub enum ErrorLabError {
    #[error("decision references unknown pair id '{pair_id}'")]
    UnknownPair { pair_id: String },
    #[error("missing explanations for erroneous pairs: {}", pair_ids.join(", "))]
    MissingExplanations { pair_ids: Vec<String> },
    #[error("no error cases to work with")]
    EmptyErrors,
    #[error("error cases mix polarities")]
    MixedPolarity,
    #[error("class catalog polarity does not match the error case")]
    PolarityMismatch,
    #[error("no error classes found in: {raw}")]
    NoClasses { raw: String },
    #[error("class catalog is empty")]
    EmptyCatalog,
    #[error("annotations missing for pairs: {}", pair_ids.join(", "))]
    AnnotationGap { pair_ids: Vec<String> },
    #[error("bad annotation row {row}: {message}")]
    BadAnnotation { row: usize, message: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad class catalog: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPolarity {
    FalsePositive,
    FalseNegative,
}

impl ErrorPolarity {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorPolarity::FalsePositive => "false_positive",
            ErrorPolarity::FalseNegative => "false_negative",
        }
    }

    fn phrase(&self) -> &'static str {
        match self {
            ErrorPolarity::FalsePositive => {
                "false positives: pairs the system matched although they refer to different entities"
            }
            ErrorPolarity::FalseNegative => {
                "false negatives: pairs the system did not match although they refer to the same entity"
            }
        }
    }
}

fn label_text(label: Label) -> &'static str {
    if label.is_match() {
        "match"
    } else {
        "non-match"
    }
}

/// One misclassified pair together with the explanation of its decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCase {
    pub pair_id: String,
    pub polarity: ErrorPolarity,
    pub pair: CandidatePair,
    pub explanation: StructuredExplanation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorClass {
    pub index: usize,
    pub name: String,
    pub description: String,
    pub polarity: ErrorPolarity,
}

/// Classes one error was assigned to, with confidences in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAssignment {
    pub pair_id: String,
    pub assigned: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Partition erroneous decisions by polarity, attaching pair and
/// explanation. Every erroneous decision must have an explanation.
pub fn collect_errors(
    decisions: &[MatchDecision],
    pairs: &[CandidatePair],
    explanations: &[StructuredExplanation],
) -> Result<(Vec<ErrorCase>, Vec<ErrorCase>), ErrorLabError> {
    let pair_by_id: BTreeMap<&str, &CandidatePair> =
        pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let explanation_by_id: BTreeMap<&str, &StructuredExplanation> = explanations
        .iter()
        .map(|e| (e.pair_id.as_str(), e))
        .collect();

    let mut missing = Vec::new();
    let mut false_positives = Vec::new();
    let mut false_negatives = Vec::new();
    for decision in decisions {
        let pair = pair_by_id
            .get(decision.pair_id.as_str())
            .ok_or_else(|| ErrorLabError::UnknownPair {
                pair_id: decision.pair_id.clone(),
            })?;
        if decision.predicted == pair.gold {
            continue;
        }
        let Some(explanation) = explanation_by_id.get(decision.pair_id.as_str()) else {
            missing.push(decision.pair_id.clone());
            continue;
        };
        let polarity = if decision.predicted.is_match() {
            ErrorPolarity::FalsePositive
        } else {
            ErrorPolarity::FalseNegative
        };
        let case = ErrorCase {
            pair_id: decision.pair_id.clone(),
            polarity,
            pair: (*pair).clone(),
            explanation: (*explanation).clone(),
        };
        match polarity {
            ErrorPolarity::FalsePositive => false_positives.push(case),
            ErrorPolarity::FalseNegative => false_negatives.push(case),
        }
    }
    if !missing.is_empty() {
        return Err(ErrorLabError::MissingExplanations { pair_ids: missing });
    }
    Ok((false_positives, false_negatives))
}

fn error_block(case: &ErrorCase) -> String {
    format!(
        "Pair {id}:\n{framed}\nGold label: {gold}\nPredicted label: {predicted}\nExplanation:\n{explanation}",
        id = case.pair_id,
        framed = frame_pair(&case.pair),
        gold = label_text(case.pair.gold),
        predicted = label_text(case.explanation.predicted),
    explanation = serialize_explanation(&case.explanation),
    )
}

fn check_single_polarity(
    errors: &[ErrorCase],
    polarity: ErrorPolarity,
) -> Result<(), ErrorLabError> {
    if errors.is_empty() {
        return Err(ErrorLabError::EmptyErrors);
    }
    if errors.iter().any(|e| e.polarity != polarity) {
        return Err(ErrorLabError::MixedPolarity);
    }
    Ok(())
}

/// One prompt asking for a numbered list of error classes derived from all
/// cases of one polarity.
pub fn render_synthesis_prompt(
    errors: &[ErrorCase],
    polarity: ErrorPolarity,
) -> Result<RenderedConversation, ErrorLabError> {
    check_single_polarity(errors, polarity)?;
    let mut sections = vec![format!(
        "The following {count} cases are {phrase}. Derive general classes of errors from these \
cases. Answer with a numbered list in the form 'N. Name: description' where the name is short \
and the description is one sentence.",
        count = errors.len(),
        phrase = polarity.phrase(),
    )];
    sections.extend(errors.iter().map(error_block));
    Ok(RenderedConversation::new(vec![Message::user(
        sections.join("\n\n"),
    )]))
}

/// Prompt asking the model to merge several partial class lists into one.
pub fn render_merge_prompt(
    partial_lists: &[String],
    polarity: ErrorPolarity,
) -> RenderedConversation {
    let mut sections = vec![format!(
        "The following are partial lists of error classes for {phrase}. Merge them into one \
deduplicated numbered list in the same 'N. Name: description' form.",
        phrase = polarity.phrase(),
    )];
    for (i, list) in partial_lists.iter().enumerate() {
        sections.push(format!("List {}:\n{}", i + 1, list.trim()));
    }
    RenderedConversation::new(vec![Message::user(sections.join("\n\n"))])
}

/// Split error cases into chunks whose rendered blocks stay within the token
/// budget. Every chunk holds at least one case.
pub fn chunk_errors(errors: &[ErrorCase], token_budget: u64) -> Vec<Vec<ErrorCase>> {
    let mut chunks: Vec<Vec<ErrorCase>> = Vec::new();
    let mut current: Vec<ErrorCase> = Vec::new();
    let mut current_tokens = 0u64;
    for case in errors {
        let case_tokens = crate::llmclient::whitespace_tokens(&error_block(case));
        if !current.is_empty() && current_tokens + case_tokens > token_budget {
            chunks.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current_tokens += case_tokens;
        current.push(case.clone());
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// Synthesize a class catalog for one polarity. All cases go into a single
/// prompt unless a token budget forces chunked synthesis followed by a merge
/// prompt. Synthesis is sequential.
pub fn synthesize_error_classes(
    backend: &dyn ChatBackend,
    model_id: &str,
    errors: &[ErrorCase],
    polarity: ErrorPolarity,
    token_budget: Option<u64>,
) -> Result<Vec<ErrorClass>, ErrorLabError> {
    check_single_polarity(errors, polarity)?;
    let ask = |conversation: RenderedConversation| -> Result<String, ErrorLabError> {
        let request = CompletionRequest::new(model_id, conversation);
        Ok(backend.complete(&request)?.text)
    };

    let single = render_synthesis_prompt(errors, polarity)?;
    let over_budget = match token_budget {
        Some(budget) => {
            crate::llmclient::whitespace_tokens(&single.single_message()) > budget
        }
        None => false,
    };
    let completion = if over_budget {
        let budget = token_budget.expect("budget checked above");
        let chunks = chunk_errors(errors, budget);
        if chunks.len() == 1 {
            ask(single)?
        } else {
            let mut partials = Vec::new();
            for chunk in &chunks {
                partials.push(ask(render_synthesis_prompt(chunk, polarity)?)?);
            }
            ask(render_merge_prompt(&partials, polarity))?
        }
    } else {
        ask(single)?
    };
    parse_error_classes(&completion, polarity)
}

/// Parse a numbered "N. Name: description" list. Bold markers are stripped,
/// continuation lines extend the previous description, and indices are
/// renumbered contiguously in order of appearance.
pub fn parse_error_classes(
    completion: &str,
    polarity: ErrorPolarity,
) -> Result<Vec<ErrorClass>, ErrorLabError> {
    let item = Regex::new(r"^\**\s*(\d+)\s*[.)]\s*(.+)$").expect("valid regex");
    let mut classes: Vec<ErrorClass> = Vec::new();
    let mut open = false;
    for line in completion.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            open = false;
            continue;
        }
        if let Some(caps) = item.captures(trimmed) {
            let rest = caps[2].trim();
            let (name, description) = match rest.split_once(':') {
                Some((name, description)) => (name, description),
                None => (rest, ""),
            };
            let name = name.trim_matches('*').trim();
            let description = description.trim_matches('*').trim();
            if name.is_empty() {
                continue;
            }
            classes.push(ErrorClass {
                index: classes.len() + 1,
                name: name.to_string(),
                description: description.to_string(),
                polarity,
            });
            open = true;
        } else if open {
            if let Some(last) = classes.last_mut() {
                if !last.description.is_empty() {
                    last.description.push(' ');
                }
                last.description.push_str(trimmed);
            }
        }
    }
    if classes.is_empty() {
        return Err(ErrorLabError::NoClasses {
            raw: completion.to_string(),
        });
    }
    Ok(classes)
}

/// Prompt presenting the class catalog, then the labels, pair, and
/// explanation of one error, asking for all applicable classes with
/// confidences.
pub fn render_classification_prompt(
    classes: &[ErrorClass],
    error: &ErrorCase,
) -> Result<RenderedConversation, ErrorLabError> {
    if classes.is_empty() {
        return Err(ErrorLabError::EmptyCatalog);
    }
    if classes.iter().any(|c| c.polarity != error.polarity) {
        return Err(ErrorLabError::PolarityMismatch);
    }
    let listing = classes
        .iter()
        .map(|c| format!("{}. {}: {}", c.index, c.name, c.description))
        .collect::<Vec<_>>()
        .join("\n");
    let content = format!(
        "The case below is one of the {phrase}. Pick all error classes from the list that apply \
to it and provide a confidence value between 0 and 1 for each, in the form 'N (confidence)'. \
Answer 'none' if no class applies.\n\nError classes:\n{listing}\n\nGold label: {gold}\n\
Predicted label: {predicted}\n{framed}\nExplanation:\n{explanation}",
        phrase = error.polarity.phrase(),
        gold = label_text(error.pair.gold),
        predicted = label_text(error.explanation.predicted),
        framed = frame_pair(&error.pair),
        explanation = serialize_explanation(&error.explanation),
    );
    Ok(RenderedConversation::new(vec![Message::user(content)]))
}

fn clamp_confidence(value: f64, warnings: &mut Vec<String>) -> f64 {
    if !(0.0..=1.0).contains(&value) {
        warnings.push(format!("confidence {value} clamped into [0,1]"));
        value.clamp(0.0, 1.0)
    } else {
        value
    }
}

/// Extract (class index, confidence) pairs from a classification answer.
/// Accepts "class 2 (0.8)", "2 (0.8)", "2: 0.8" and exact class-name
/// references; unknown indices are dropped with a warning and a missing
/// confidence defaults to 1.0. An unparseable answer yields an empty
/// assignment with a warning rather than an error.
pub fn parse_classification(
    completion: &str,
    catalog: &[ErrorClass],
    pair_id: &str,
) -> ClassAssignment {
    let known: BTreeSet<usize> = catalog.iter().map(|c| c.index).collect();
    let mut assigned: BTreeMap<usize, f64> = BTreeMap::new();
    let mut warnings = Vec::new();

    let mut record = |index: usize, confidence: Option<f64>, warnings: &mut Vec<String>| {
        if !known.contains(&index) {
            warnings.push(format!("class {index} is not in the catalog, dropped"));
            return;
        }
        let confidence = confidence.map_or(1.0, |c| clamp_confidence(c, warnings));
        assigned.insert(index, confidence);
    };

    let number = r"-?(?:\d+(?:\.\d+)?|\.\d+)";
    let class_form =
        Regex::new(&format!(r"(?i)\bclass\s+(\d+)\s*(?:\(({number})\)|:\s*({number}))?"))
            .expect("valid regex");
    for caps in class_form.captures_iter(completion) {
        let index: usize = caps[1].parse().unwrap_or(usize::MAX);
        let confidence = caps
            .get(2)
            .or_else(|| caps.get(3))
            .and_then(|m| m.as_str().parse::<f64>().ok());
        record(index, confidence, &mut warnings);
    }

    let bare_paren = Regex::new(&format!(r"(?:^|[,;]|\s)(\d+)\s*\(({number})\)")).expect("valid regex");
    for caps in bare_paren.captures_iter(completion) {
        let index: usize = caps[1].parse().unwrap_or(usize::MAX);
        let confidence = caps[2].parse::<f64>().ok();
        record(index, confidence, &mut warnings);
    }

    let colon_form =
        Regex::new(&format!(r"(?m)(?:^|[,;])\s*(\d+)\s*:\s*({number})")).expect("valid regex");
    for caps in colon_form.captures_iter(completion) {
        let index: usize = caps[1].parse().unwrap_or(usize::MAX);
        let confidence = caps[2].parse::<f64>().ok();
        record(index, confidence, &mut warnings);
    }

    for class in catalog {
        let name_form = Regex::new(&format!(
            r"(?i){}\s*(?:\(({number})\)|:\s*({number}))?",
            regex::escape(&class.name)
        ))
        .expect("valid regex");
        if let Some(caps) = name_form.captures(completion) {
            let confidence = caps
                .get(1)
                .or_else(|| caps.get(2))
                .and_then(|m| m.as_str().parse::<f64>().ok());
            record(class.index, confidence, &mut warnings);
        }
    }

    if assigned.is_empty() {
        let says_none = Regex::new(r"(?i)\bnone\b").expect("valid regex");
        if !says_none.is_match(completion) {
            warnings.push("no class references found in the answer".to_string());
        }
    }

    ClassAssignment {
        pair_id: pair_id.to_string(),
        assigned: assigned.into_iter().collect(),
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub index: usize,
    pub name: String,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub errors: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub mean_pct: f64,
}

/// Per-class agreement between model assignments and human annotations,
/// as percentages. Membership on the model side means confidence >= 0.5;
/// every accuracy is agreements/#errors, so all values are multiples of
/// 100/#errors.
pub fn classification_accuracy(
    assignments: &[ClassAssignment],
    annotations: &BTreeMap<String, BTreeSet<usize>>,
    catalog: &[ErrorClass],
) -> Result<AccuracyReport, ErrorLabError> {
    if assignments.is_empty() {
        return Err(ErrorLabError::EmptyErrors);
    }
    if catalog.is_empty() {
        return Err(ErrorLabError::EmptyCatalog);
    }
    let gaps: Vec<String> = assignments
        .iter()
        .filter(|a| !annotations.contains_key(&a.pair_id))
        .map(|a| a.pair_id.clone())
        .collect();
    if !gaps.is_empty() {
        return Err(ErrorLabError::AnnotationGap { pair_ids: gaps });
    }

    let errors = assignments.len();
    let mut per_class = Vec::with_capacity(catalog.len());
    for class in catalog {
        let agreements = assignments
            .iter()
            .filter(|a| {
                let assigned = a
                    .assigned
                    .iter()
                    .any(|(index, confidence)| *index == class.index && *confidence >= 0.5);
                let annotated = annotations[&a.pair_id].contains(&class.index);
                assigned == annotated
            })
            .count();
        per_class.push(ClassAccuracy {
            index: class.index,
            name: class.name.clone(),
            accuracy_pct: agreements as f64 / errors as f64 * 100.0,
        });
    }
    let mean_pct = per_class.iter().map(|c| c.accuracy_pct).sum::<f64>() / per_class.len() as f64;
    Ok(AccuracyReport {
        errors,
        per_class,
        mean_pct,
    })
}

/// Render an accuracy report as a small markdown table with a mean row.
pub fn emit_accuracy_report(report: &AccuracyReport, polarity: ErrorPolarity) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "| class | name | accuracy_pct ({}, {} errors) |\n|---|---|---|\n",
        polarity.as_str(),
        report.errors
    ));
    for class in &report.per_class {
        out.push_str(&format!(
            "| {} | {} | {:.2} |\n",
            class.index, class.name, class.accuracy_pct
        ));
    }
    out.push_str(&format!("| - | mean | {:.2} |\n", report.mean_pct));
    out
}

pub fn write_class_catalog(classes: &[ErrorClass], path: &Path) -> Result<(), ErrorLabError> {
    let text = serde_json::to_string_pretty(classes)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_class_catalog(path: &Path) -> Result<Vec<ErrorClass>, ErrorLabError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Human annotations per polarity: pair id to the set of applicable class
/// indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub false_positives: BTreeMap<String, BTreeSet<usize>>,
    pub false_negatives: BTreeMap<String, BTreeSet<usize>>,
}

impl AnnotationSet {
    pub fn for_polarity(&self, polarity: ErrorPolarity) -> &BTreeMap<String, BTreeSet<usize>> {
        match polarity {
            ErrorPolarity::FalsePositive => &self.false_positives,
            ErrorPolarity::FalseNegative => &self.false_negatives,
        }
    }
}

/// Read annotations from a delimited file with columns
/// pair_id, polarity, classes (class indices separated by semicolons).
pub fn read_annotations(path: &Path) -> Result<AnnotationSet, ErrorLabError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut set = AnnotationSet::default();
    for (i, row) in reader.deserialize::<(String, String, String)>().enumerate() {
        let row_no = i + 2;
        let (pair_id, polarity, classes) = row?;
        let target = match polarity.as_str() {
            "false_positive" => &mut set.false_positives,
            "false_negative" => &mut set.false_negatives,
            other => {
                return Err(ErrorLabError::BadAnnotation {
                    row: row_no,
                    message: format!("unknown polarity '{other}'"),
                })
            }
        };
        let mut indices = BTreeSet::new();
        for part in classes.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let index: usize = part.parse().map_err(|_| ErrorLabError::BadAnnotation {
                row: row_no,
                message: format!("bad class index '{part}'"),
            })?;
            indices.insert(index);
        }
        target.insert(pair_id, indices);
    }
    Ok(set)
}
