//! Second-turn structured explanations: rendering the follow-up prompt,
//! parsing attribute assessments out of completions, aggregating them per
//! predicted label, and correlating model similarities with string metrics.
//!
//! Aggregation is over mentions only: an attribute absent from an
//! explanation contributes to nothing but the frequency denominator.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{serialize_entity, CandidatePair, Label};
use crate::textmetrics::{
    cosine, generalized_jaccard, mean_and_population_sd, pearson, StatsError, TokenBag,
};

pub const SIGN_CONVENTION_SENTENCE: &str = "The importance value is negative if the attribute \
comparison contributed to a non-match decision and positive if it contributed to a match decision.";

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("conversation does not end with a model decision turn")]
    MissingDecisionTurn,
    #[error("no assessment lines found for pair '{pair_id}' in: {raw}")]
    NoAssessments { pair_id: String, raw: String },
    #[error("explanation references unknown pair id '{pair_id}'")]
    UnknownPair { pair_id: String },
    #[error("only {collected} usable points, correlation needs at least 2")]
    TooFewPoints { collected: usize },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// One attribute line of a structured explanation. `clamped` marks values
/// that were pulled back into range during parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeAssessment {
    pub attribute: String,
    pub importance: f64,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredExplanation {
    pub pair_id: String,
    pub predicted: Label,
    pub assessments: Vec<AttributeAssessment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Aggregate of one attribute within one predicted-label split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeAggregate {
    pub attribute: String,
    pub frequency: f64,
    pub mean_importance: f64,
    pub sd_importance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregatedExplanations {
    pub matches: Vec<AttributeAggregate>,
    pub non_matches: Vec<AttributeAggregate>,
}

/// Lowercase, collapse internal whitespace, strip trailing colons.
pub fn normalize_attribute(raw: &str) -> String {
    raw.trim()
        .trim_end_matches(':')
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Append the structured-explanation request to a decision conversation.
pub fn render_explanation_prompt(
    prior: &crate::promptkit::RenderedConversation,
) -> Result<crate::promptkit::RenderedConversation, ExplainError> {
    use crate::promptkit::{Message, Role};
    match prior.messages.last() {
        Some(m) if m.role == Role::Assistant => {}
        _ => return Err(ExplainError::MissingDecisionTurn),
    }
    let instruction = format!(
        "Explain your decision. For every attribute you used, answer with one line of the \
exact form `attribute: <name>, importance: <value in [-1,1]>, similarity: <value in [0,1]>`. \
{SIGN_CONVENTION_SENTENCE} The similarity value states how similar the two attribute values are."
    );
    let mut next = prior.clone();
    next.messages.push(Message::user(instruction));
    Ok(next)
}

fn clamp_with_flag(value: f64, lo: f64, hi: f64, flag: &mut bool) -> f64 {
    if value < lo {
        *flag = true;
        lo
    } else if value > hi {
        *flag = true;
        hi
    } else {
        value
    }
}

fn parse_number(text: &str) -> Option<f64> {
    text.trim().parse::<f64>().ok()
}

fn pipe_cells(line: &str) -> Option<Vec<String>> {
    let trimmed = line.trim();
    if !trimmed.starts_with('|') || !trimmed.contains('|') {
        return None;
    }
    let cells: Vec<String> = trimmed
        .trim_start_matches('|')
        .trim_end_matches('|')
        .split('|')
        .map(|c| c.trim().to_string())
        .collect();
    if cells.is_empty() {
        None
    } else {
        Some(cells)
    }
}

fn is_table_separator(cells: &[String]) -> bool {
    cells
        .iter()
        .all(|c| !c.is_empty() && c.chars().all(|ch| ch == '-' || ch == ':'))
}

/// Extract assessments from a completion. Accepts the canonical
/// `attribute: <name>, importance: <v>, similarity: <v>` lines (bulleted or
/// numbered variants included) and pipe tables with an
/// attribute|importance|similarity header. Out-of-range values are clamped
/// with a warning; duplicate attributes keep the last occurrence's values.
pub fn parse_structured_explanation(
    text: &str,
    pair_id: &str,
    predicted: Label,
) -> Result<StructuredExplanation, ExplainError> {
    let canonical = Regex::new(
        r"(?i)attribute\s*:\s*(.+?)\s*,\s*importance\s*:\s*(-?(?:\d+(?:\.\d+)?|\.\d+))\s*,\s*similarity\s*:\s*(-?(?:\d+(?:\.\d+)?|\.\d+))",
    )
    .expect("valid regex");

    let mut raw_assessments: Vec<(String, f64, f64)> = Vec::new();
    let mut in_table = false;
    for line in text.lines() {
        if let Some(cells) = pipe_cells(line) {
            let lowered: Vec<String> = cells.iter().map(|c| c.to_lowercase()).collect();
            if lowered == ["attribute", "importance", "similarity"] {
                in_table = true;
                continue;
            }
            if in_table {
                if is_table_separator(&cells) {
                    continue;
                }
                if cells.len() == 3 {
                    if let (Some(imp), Some(sim)) =
                        (parse_number(&cells[1]), parse_number(&cells[2]))
                    {
                        raw_assessments.push((cells[0].clone(), imp, sim));
                        continue;
                    }
                }
                in_table = false;
            }
        } else {
            in_table = false;
        }
        for caps in canonical.captures_iter(line) {
            let name = caps[1].trim_matches(|c: char| c == '*' || c == '`').to_string();
            let imp = parse_number(&caps[2]);
            let sim = parse_number(&caps[3]);
            if let (Some(imp), Some(sim)) = (imp, sim) {
                raw_assessments.push((name, imp, sim));
            }
        }
    }

    if raw_assessments.is_empty() {
        return Err(ExplainError::NoAssessments {
            pair_id: pair_id.to_string(),
            raw: text.to_string(),
        });
    }

    let mut assessments: Vec<AttributeAssessment> = Vec::new();
    let mut warnings = Vec::new();
    for (raw_name, raw_imp, raw_sim) in raw_assessments {
        let attribute = normalize_attribute(&raw_name);
        let mut clamped = false;
        let importance = clamp_with_flag(raw_imp, -1.0, 1.0, &mut clamped);
        let similarity = clamp_with_flag(raw_sim, 0.0, 1.0, &mut clamped);
        if clamped {
            warnings.push(format!(
                "clamped out-of-range values for attribute '{attribute}'"
            ));
        }
        let assessment = AttributeAssessment {
            attribute: attribute.clone(),
            importance,
            similarity,
            clamped,
        };
        match assessments.iter_mut().find(|a| a.attribute == attribute) {
            Some(existing) => {
                warnings.push(format!(
                    "duplicate attribute '{attribute}', keeping the last occurrence"
                ));
                *existing = assessment;
            }
            None => assessments.push(assessment),
        }
    }

    Ok(StructuredExplanation {
        pair_id: pair_id.to_string(),
        predicted,
        assessments,
        warnings,
    })
}

/// Canonical line rendering; parsing it back reproduces the assessments.
pub fn serialize_explanation(explanation: &StructuredExplanation) -> String {
    explanation
        .assessments
        .iter()
        .map(|a| {
            format!(
                "attribute: {}, importance: {}, similarity: {}",
                a.attribute, a.importance, a.similarity
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn aggregate_split(explanations: &[&StructuredExplanation]) -> Vec<AttributeAggregate> {
    let total = explanations.len();
    if total == 0 {
        return Vec::new();
    }
    let mut importances: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for explanation in explanations {
        for assessment in &explanation.assessments {
            importances
                .entry(assessment.attribute.clone())
                .or_default()
                .push(assessment.importance);
        }
    }
    let mut aggregates: Vec<AttributeAggregate> = importances
        .into_iter()
        .map(|(attribute, values)| {
            let (mean, sd) = mean_and_population_sd(&values).expect("non-empty mentions");
            AttributeAggregate {
                attribute,
                frequency: values.len() as f64 / total as f64,
                mean_importance: mean,
                sd_importance: sd,
            }
        })
        .collect();
    aggregates.sort_by(|a, b| {
        b.frequency
            .total_cmp(&a.frequency)
            .then_with(|| a.attribute.cmp(&b.attribute))
    });
    aggregates
}

/// Aggregate per predicted label. Frequency divides by the split size; mean
/// and population SD run over the importances of mentions only.
pub fn aggregate_explanations(explanations: &[StructuredExplanation]) -> AggregatedExplanations {
    let matches: Vec<&StructuredExplanation> = explanations
        .iter()
        .filter(|e| e.predicted.is_match())
        .collect();
    let non_matches: Vec<&StructuredExplanation> = explanations
        .iter()
        .filter(|e| !e.predicted.is_match())
        .collect();
    AggregatedExplanations {
        matches: aggregate_split(&matches),
        non_matches: aggregate_split(&non_matches),
    }
}

/// Distinct attribute count and how many clear the frequency threshold.
pub fn attribute_coverage_summary(
    aggregates: &[AttributeAggregate],
    threshold: f64,
) -> (usize, usize) {
    let above = aggregates.iter().filter(|a| a.frequency >= threshold).count();
    (aggregates.len(), above)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMetric {
    Cosine,
    GeneralizedJaccard,
}

impl SimilarityMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            SimilarityMetric::Cosine => "cosine",
            SimilarityMetric::GeneralizedJaccard => "generalized_jaccard",
        }
    }

    fn score(&self, a: &TokenBag, b: &TokenBag) -> f64 {
        match self {
            SimilarityMetric::Cosine => cosine(a, b),
            SimilarityMetric::GeneralizedJaccard => generalized_jaccard(a, b),
        }
    }
}

/// Pearson correlation between model similarities and a string metric over
/// the corresponding attribute values.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSummary {
    pub metric: SimilarityMetric,
    pub r: f64,
    /// Assessment count that contributed a (model, metric) point.
    pub used: usize,
    /// Assessments skipped because the attribute matched neither record.
    pub skipped: usize,
    /// Sides where the named attribute was missing and the full
    /// serialization stood in for it.
    pub fallback_sides: usize,
}

fn attribute_text(record: &crate::records::EntityRecord, attribute: &str) -> Option<String> {
    record
        .attributes
        .iter()
        .find(|(name, _)| normalize_attribute(name) == attribute)
        .map(|(_, value)| value.clone().unwrap_or_default())
}

pub fn correlate_with_string_metrics(
    explanations: &[StructuredExplanation],
    pairs: &[CandidatePair],
    metric: SimilarityMetric,
) -> Result<CorrelationSummary, ExplainError> {
    let by_id: BTreeMap<&str, &CandidatePair> =
        pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let mut model_scores = Vec::new();
    let mut metric_scores = Vec::new();
    let mut skipped = 0usize;
    let mut fallback_sides = 0usize;
    for explanation in explanations {
        let pair = by_id
            .get(explanation.pair_id.as_str())
            .ok_or_else(|| ExplainError::UnknownPair {
                pair_id: explanation.pair_id.clone(),
            })?;
        for assessment in &explanation.assessments {
            let left = attribute_text(&pair.left, &assessment.attribute);
            let right = attribute_text(&pair.right, &assessment.attribute);
            if left.is_none() && right.is_none() {
                skipped += 1;
                continue;
            }
            let left = left.unwrap_or_else(|| {
                fallback_sides += 1;
                serialize_entity(&pair.left)
            });
            let right = right.unwrap_or_else(|| {
                fallback_sides += 1;
                serialize_entity(&pair.right)
            });
            let score = metric.score(&TokenBag::from_text(&left), &TokenBag::from_text(&right));
            model_scores.push(assessment.similarity);
            metric_scores.push(score);
        }
    }
    if model_scores.len() < 2 {
        return Err(ExplainError::TooFewPoints {
            collected: model_scores.len(),
        });
    }
    let r = pearson(&model_scores, &metric_scores)?;
    Ok(CorrelationSummary {
        metric,
        r,
        used: model_scores.len(),
        skipped,
        fallback_sides,
    })
}
