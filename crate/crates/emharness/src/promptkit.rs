//! Prompt designs and rendering.
//!
//! A design combines a task wording (domain-specific or general scope,
//! simple or complex phrasing), an output format (free or forced Yes/No),
//! and a section ordering (task before the pair, or serialization first).
//! The catalog exposes the ten canonical designs used in the experiment
//! grid; rendering turns a design plus a candidate pair, optional
//! demonstrations, and optional matching rules into a chat conversation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{frame_pair, CandidatePair, Label};

/// Sentence appended by forced-output designs. The exact wording is part of
/// the harness contract; downstream parsers rely on models seeing it.
pub const FORCE_SENTENCE: &str = "Answer with 'Yes' if they do and 'No' if they do not.";

/// Header line introducing a rule preamble.
pub const RULES_HEADER: &str = "The following rules must be considered:";

/// Noun used by general-scope task wordings.
pub const GENERAL_NOUN: &str = "entity descriptions";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("demonstrations and rules are mutually exclusive in one prompt")]
    DemosWithRules,
    #[error("rule learning needs at least one example")]
    EmptyExamples,
    #[error("rule learning needs both matching and non-matching examples")]
    SinglePolarity,
    #[error("no rules found in completion: {raw:?}")]
    NoRulesFound { raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Question names the benchmark's own noun ("product descriptions").
    Domain,
    /// Question talks about generic entity descriptions.
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    /// "Do the two X match?"
    Simple,
    /// "Do the two X refer to the same real-world Y?"
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Free,
    Force,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrdering {
    /// Task question first, then the framed pair.
    TaskFirst,
    /// Framed pair first, then the question (the "Narayan" layout).
    SerializationFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDesign {
    pub name: String,
    pub scope: Scope,
    pub complexity: Complexity,
    pub format: OutputFormat,
    pub ordering: PromptOrdering,
    /// Plural noun the question talks about; bound from the benchmark at
    /// catalog time and ignored by general-scope wordings.
    pub domain_noun: String,
}

impl PromptDesign {
    /// The task question this design asks.
    pub fn question(&self) -> String {
        let noun = match self.scope {
            Scope::Domain => self.domain_noun.as_str(),
            Scope::General => GENERAL_NOUN,
        };
        match self.complexity {
            Complexity::Simple => format!("Do the two {noun} match?"),
            Complexity::Complex => format!(
                "Do the two {noun} refer to the same real-world {}?",
                singular_noun(noun)
            ),
        }
    }
}

/// Singular form used in complex wordings. The plural nouns that appear in
/// the benchmarks are mapped explicitly; anything else falls back to
/// stripping a " descriptions" suffix and a plural "s".
pub fn singular_noun(noun: &str) -> String {
    match noun {
        "product descriptions" => "product".to_string(),
        "publications" => "publication".to_string(),
        "entity descriptions" => "entity".to_string(),
        other => {
            let base = other.strip_suffix(" descriptions").unwrap_or(other);
            base.strip_suffix('s').unwrap_or(base).to_string()
        }
    }
}

/// The ten canonical designs in their published order: the eight
/// task-first combinations of scope, complexity, and output format, then
/// the two serialization-first designs.
pub fn design_catalog(domain_noun: &str) -> Vec<PromptDesign> {
    let mut designs = Vec::with_capacity(10);
    for scope in [Scope::Domain, Scope::General] {
        for complexity in [Complexity::Complex, Complexity::Simple] {
            for format in [OutputFormat::Force, OutputFormat::Free] {
                let name = format!(
                    "{}-{}-{}",
                    match scope {
                        Scope::Domain => "domain",
                        Scope::General => "general",
                    },
                    match complexity {
                        Complexity::Complex => "complex",
                        Complexity::Simple => "simple",
                    },
                    match format {
                        OutputFormat::Force => "force",
                        OutputFormat::Free => "free",
                    }
                );
                designs.push(PromptDesign {
                    name,
                    scope,
                    complexity,
                    format,
                    ordering: PromptOrdering::TaskFirst,
                    domain_noun: domain_noun.to_string(),
                });
            }
        }
    }
    for complexity in [Complexity::Complex, Complexity::Simple] {
        designs.push(PromptDesign {
            name: format!(
                "Narayan-{}",
                match complexity {
                    Complexity::Complex => "complex",
                    Complexity::Simple => "simple",
                }
            ),
            scope: Scope::General,
            complexity,
            format: OutputFormat::Free,
            ordering: PromptOrdering::SerializationFirst,
            domain_noun: domain_noun.to_string(),
        });
    }
    designs
}

pub fn find_design<'a>(catalog: &'a [PromptDesign], name: &str) -> Option<&'a PromptDesign> {
    catalog.iter().find(|d| d.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOrigin {
    Handwritten,
    Learned,
}

/// A list of natural-language matching rules fed to the model as a prompt
/// preamble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub origin: RuleOrigin,
    pub rules: Vec<String>,
}

impl RuleSet {
    pub fn handwritten(rules: Vec<String>) -> Self {
        RuleSet {
            origin: RuleOrigin::Handwritten,
            rules,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// An ordered chat conversation ready to send to a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedConversation {
    pub messages: Vec<Message>,
}

impl RenderedConversation {
    pub fn new(messages: Vec<Message>) -> Self {
        RenderedConversation { messages }
    }

    /// Flattening for single-message backends: message contents joined by
    /// blank lines, conversation order preserved.
    pub fn single_message(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Role-tagged transcript used for golden files and run inspection.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| format!("== {} ==\n{}", m.role.as_str(), m.content))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn last_user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

fn query_content(design: &PromptDesign, pair: &CandidatePair, rules: Option<&RuleSet>) -> String {
    let question = design.question();
    let task = match design.format {
        OutputFormat::Force => format!("{question} {FORCE_SENTENCE}"),
        OutputFormat::Free => question,
    };
    let framed = frame_pair(pair);
    let body = match design.ordering {
        PromptOrdering::TaskFirst => format!("{task}\n\n{framed}"),
        PromptOrdering::SerializationFirst => format!("{framed}\n{task}"),
    };
    match rules {
        Some(set) => {
            let mut preamble = String::from(RULES_HEADER);
            for (i, rule) in set.rules.iter().enumerate() {
                preamble.push_str(&format!("\n{}. {rule}", i + 1));
            }
            format!("{preamble}\n\n{body}")
        }
        None => body,
    }
}

/// Render the matching prompt for one candidate pair.
///
/// Demonstrations become alternating user/assistant turns ahead of the query
/// (pair, question, then the gold "Yes."/"No." answer); a rule set becomes an
/// enumerated preamble on the query itself. Demonstrations and rules cannot
/// be combined.
pub fn render_match_prompt(
    design: &PromptDesign,
    pair: &CandidatePair,
    demos: &[CandidatePair],
    rules: Option<&RuleSet>,
) -> Result<RenderedConversation, PromptError> {
    if !demos.is_empty() && rules.is_some() {
        return Err(PromptError::DemosWithRules);
    }
    let question = design.question();
    let mut messages = Vec::with_capacity(demos.len() * 2 + 1);
    for demo in demos {
        messages.push(Message::user(format!("{}\n{question}", frame_pair(demo))));
        messages.push(Message::assistant(answer_text(demo.gold)));
    }
    messages.push(Message::user(query_content(design, pair, rules)));
    Ok(RenderedConversation::new(messages))
}

fn answer_text(label: Label) -> &'static str {
    match label {
        Label::Match => "Yes.",
        Label::NonMatch => "No.",
    }
}

/// Render the prompt that asks a model to derive general matching rules from
/// labeled examples. The examples must include both polarities.
pub fn render_rule_learning_prompt(
    examples: &[CandidatePair],
) -> Result<RenderedConversation, PromptError> {
    if examples.is_empty() {
        return Err(PromptError::EmptyExamples);
    }
    let has_match = examples.iter().any(|p| p.gold.is_match());
    let has_non_match = examples.iter().any(|p| !p.gold.is_match());
    if !has_match || !has_non_match {
        return Err(PromptError::SinglePolarity);
    }
    let mut content = String::from(
        "Derive general rules from the following labeled examples that can be used to \
         decide whether two entity descriptions match. Each example pair is followed by \
         'Yes.' if the two descriptions match and by 'No.' if they do not. Answer with a \
         numbered list of rules.",
    );
    for example in examples {
        content.push_str("\n\n");
        content.push_str(&frame_pair(example));
        content.push('\n');
        content.push_str(answer_text(example.gold));
    }
    Ok(RenderedConversation::new(vec![Message::user(content)]))
}

fn strip_list_marker(line: &str) -> Option<&str> {
    let trimmed = line.trim_start();
    for bullet in ["- ", "* ", "\u{2022} "] {
        if let Some(rest) = trimmed.strip_prefix(bullet) {
            return Some(rest);
        }
    }
    let digits = trimmed.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &trimmed[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(rest.trim_start());
        }
    }
    None
}

fn is_example_line(line: &str) -> bool {
    line.trim_start().to_lowercase().starts_with("example")
}

/// Parse a numbered or bulleted rule list out of a completion.
///
/// Enumeration markers are stripped, example lines that models like to attach
/// to each rule are dropped, and prose before the first list item is ignored.
pub fn parse_rule_list(completion: &str) -> Result<RuleSet, PromptError> {
    let mut rules: Vec<String> = Vec::new();
    let mut in_example = false;
    for line in completion.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = strip_list_marker(line) {
            if is_example_line(rest) {
                in_example = true;
                continue;
            }
            in_example = false;
            let rule = rest.trim().trim_matches('*').trim();
            if !rule.is_empty() {
                rules.push(rule.to_string());
            }
        } else if is_example_line(line) {
            in_example = true;
        } else if !in_example {
            if let Some(last) = rules.last_mut() {
                last.push(' ');
                last.push_str(line.trim());
            }
        }
    }
    if rules.is_empty() {
        return Err(PromptError::NoRulesFound {
            raw: completion.to_string(),
        });
    }
    Ok(RuleSet {
        origin: RuleOrigin::Learned,
        rules,
    })
}
