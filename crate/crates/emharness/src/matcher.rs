//! Turning a dataset and a prompt design into persisted match decisions.
//!
//! For every candidate pair the matcher renders the prompt (with optional
//! per-query demonstration selection or a rule preamble), queries the backend
//! as one batch, and parses each completion into a binary decision. Backend
//! failures stay attached to their pair instead of aborting the run.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::{select_demonstrations, DemonstrationPool, SelectionError, SelectionStrategy};
use crate::llmclient::{run_batch, BatchOptions, ChatBackend, CompletionRequest, TokenUsage};
use crate::promptkit::{render_match_prompt, PromptDesign, PromptError, RuleSet};
use crate::records::{Dataset, Label, Split};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("matching runs on the test split, got {got}")]
    WrongSplit { got: &'static str },
    #[error("demonstration selection and rules cannot be combined")]
    SelectionWithRules,
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt decision log at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
}

/// One parsed model decision for one candidate pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDecision {
    pub pair_id: String,
    pub predicted: Label,
    pub raw_completion: String,
    pub usage: TokenUsage,
    pub design_name: String,
    pub model_id: String,
}

/// A pair whose backend request failed after retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub pair_id: String,
    pub design_name: String,
    pub error: String,
}

/// Token and latency accounting for one answered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub pair_id: String,
    pub design_name: String,
    pub model_id: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchRun {
    pub decisions: Vec<MatchDecision>,
    pub failures: Vec<PairFailure>,
    pub usage_log: Vec<UsageRecord>,
}

/// Per-query demonstration selection for a run.
pub struct DemoSelectionSpec<'a> {
    pub pool: &'a DemonstrationPool,
    pub strategy: SelectionStrategy,
    pub shots: usize,
}

pub struct MatchConfig<'a> {
    pub model_id: &'a str,
    pub selection: Option<DemoSelectionSpec<'a>>,
    pub rules: Option<&'a RuleSet>,
    pub batch: BatchOptions,
    pub max_output_tokens: Option<u32>,
}

impl<'a> MatchConfig<'a> {
    pub fn zero_shot(model_id: &'a str) -> Self {
        MatchConfig {
            model_id,
            selection: None,
            rules: None,
            batch: BatchOptions::default(),
            max_output_tokens: None,
        }
    }
}

/// Parse a completion into a decision: lowercase, drop ASCII punctuation,
/// split on whitespace, and look for a standalone "yes" token. Everything
/// else, including an empty completion, is a non-match.
pub fn parse_decision(completion: &str) -> Label {
    let cleaned: String = completion
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    if cleaned.split_whitespace().any(|token| token == "yes") {
        Label::Match
    } else {
        Label::NonMatch
    }
}

/// Run one (design, model) configuration over a test split.
///
/// All prompts are rendered up front (selection failures abort before any
/// request is sent), then executed as one batch. Every pair lands either in
/// `decisions` or in `failures`.
pub fn match_dataset(
    dataset: &Dataset,
    design: &PromptDesign,
    config: &MatchConfig,
    backend: &dyn ChatBackend,
) -> Result<MatchRun, MatchError> {
    if dataset.split != Split::Test {
        return Err(MatchError::WrongSplit {
            got: dataset.split.as_str(),
        });
    }
    if config.selection.is_some() && config.rules.is_some() {
        return Err(MatchError::SelectionWithRules);
    }

    let mut requests = Vec::with_capacity(dataset.pairs.len());
    for pair in &dataset.pairs {
        let demos = match &config.selection {
            Some(spec) => {
                select_demonstrations(spec.pool, &spec.strategy, spec.shots, Some(pair))?
            }
            None => Vec::new(),
        };
        let conversation = render_match_prompt(design, pair, &demos, config.rules)?;
        let mut request = CompletionRequest::new(config.model_id, conversation);
        request.max_output_tokens = config.max_output_tokens;
        requests.push(request);
    }

    let results = run_batch(backend, &requests, &config.batch);
    let mut run = MatchRun::default();
    for (pair, result) in dataset.pairs.iter().zip(results) {
        match result {
            Ok(completion) => {
                run.decisions.push(MatchDecision {
                    pair_id: pair.pair_id.clone(),
                    predicted: parse_decision(&completion.text),
                    raw_completion: completion.text,
                    usage: completion.usage,
                    design_name: design.name.clone(),
                    model_id: config.model_id.to_string(),
                });
                run.usage_log.push(UsageRecord {
                    pair_id: pair.pair_id.clone(),
                    design_name: design.name.clone(),
                    model_id: config.model_id.to_string(),
                    prompt_tokens: completion.usage.prompt_tokens,
                    completion_tokens: completion.usage.completion_tokens,
                    latency_secs: completion.latency_secs,
                });
            }
            Err(err) => run.failures.push(PairFailure {
                pair_id: pair.pair_id.clone(),
                design_name: design.name.clone(),
                error: err.to_string(),
            }),
        }
    }
    Ok(run)
}

fn append_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), MatchError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    for item in items {
        let line = serde_json::to_string(item).expect("serializable");
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, MatchError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(&line).map_err(|e| MatchError::CorruptLog {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(items)
}

pub fn append_decisions(decisions: &[MatchDecision], path: &Path) -> Result<(), MatchError> {
    append_jsonl(decisions, path)
}

pub fn read_decisions(path: &Path) -> Result<Vec<MatchDecision>, MatchError> {
    read_jsonl(path)
}

pub fn append_usage(usage: &[UsageRecord], path: &Path) -> Result<(), MatchError> {
    append_jsonl(usage, path)
}

pub fn read_usage(path: &Path) -> Result<Vec<UsageRecord>, MatchError> {
    read_jsonl(path)
}

pub fn append_failures(failures: &[PairFailure], path: &Path) -> Result<(), MatchError> {
    append_jsonl(failures, path)
}

pub fn read_failures(path: &Path) -> Result<Vec<PairFailure>, MatchError> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::{ScriptEntry, ScriptedBackend};
    use crate::promptkit::design_catalog;
    use crate::records::{CandidatePair, EntityRecord};

    #[test]
    fn decision_parsing_requires_a_standalone_yes_token() {
        let matches = [
            "Yes.",
            "yes",
            "YES!!",
            "Yes, they are the same product.",
            "The answer is yes.",
            "'Yes'",
            "After comparing both descriptions: yes",
        ];
        for text in matches {
            assert_eq!(parse_decision(text), Label::Match, "{text:?}");
        }
        let non_matches = [
            "No.",
            "No, but they are similar.",
            "These are not the same.",
            "eyes are mentioned in both",
            "Yesterday this matched.",
            "",
            "   \n  ",
            "I cannot decide.",
        ];
        for text in non_matches {
            assert_eq!(parse_decision(text), Label::NonMatch, "{text:?}");
        }
    }

    fn pair(id: &str, left: &str, right: &str, gold: Label) -> CandidatePair {
        CandidatePair {
            pair_id: id.to_string(),
            left: EntityRecord::new(format!("{id}/l"), vec![("title".into(), Some(left.into()))]),
            right: EntityRecord::new(
                format!("{id}/r"),
                vec![("title".into(), Some(right.into()))],
            ),
            gold,
        }
    }

    fn toy_dataset(split: Split) -> Dataset {
        Dataset {
            name: "toy".into(),
            split,
            domain_noun: "product descriptions".into(),
            pairs: vec![
                pair("p1", "alpha widget one", "alpha widget 1", Label::Match),
                pair("p2", "beta gadget", "gamma gadget", Label::NonMatch),
                pair("p3", "delta thing", "delta thing", Label::Match),
            ],
        }
    }

    fn oracle_backend(dataset: &Dataset) -> ScriptedBackend {
        let mut backend = ScriptedBackend::new("scripted");
        for pair in &dataset.pairs {
            let marker = crate::records::serialize_entity(&pair.left);
            let answer = if pair.gold.is_match() { "Yes." } else { "No." };
            backend.push(ScriptEntry::substring(marker, answer));
        }
        backend
    }

    #[test]
    fn matching_decides_every_pair_in_dataset_order() {
        let dataset = toy_dataset(Split::Test);
        let backend = oracle_backend(&dataset);
        let catalog = design_catalog(&dataset.domain_noun);
        let run = match_dataset(
            &dataset,
            &catalog[0],
            &MatchConfig::zero_shot("toy-model"),
            &backend,
        )
        .unwrap();
        assert_eq!(run.failures.len(), 0);
        let ids: Vec<&str> = run.decisions.iter().map(|d| d.pair_id.as_str()).collect();
        assert_eq!(ids, ["p1", "p2", "p3"]);
        for (decision, pair) in run.decisions.iter().zip(&dataset.pairs) {
            assert_eq!(decision.predicted, pair.gold);
            assert_eq!(decision.design_name, "domain-complex-force");
            assert_eq!(decision.model_id, "toy-model");
            assert!(decision.usage.prompt_tokens > 0);
        }
        assert_eq!(run.usage_log.len(), 3);
    }

    #[test]
    fn matching_rejects_the_development_split() {
        let dataset = toy_dataset(Split::Development);
        let backend = ScriptedBackend::new("scripted").with_fallback("No.");
        let catalog = design_catalog(&dataset.domain_noun);
        let err = match_dataset(
            &dataset,
            &catalog[0],
            &MatchConfig::zero_shot("toy-model"),
            &backend,
        )
        .unwrap_err();
        assert!(matches!(err, MatchError::WrongSplit { got: "dev" }));
    }

    #[test]
    fn selection_and_rules_together_are_rejected() {
        let dataset = toy_dataset(Split::Test);
        let pool = DemonstrationPool::from_dataset(&dataset);
        let rules = RuleSet::handwritten(vec!["r".into()]);
        let backend = ScriptedBackend::new("scripted").with_fallback("No.");
        let catalog = design_catalog(&dataset.domain_noun);
        let config = MatchConfig {
            model_id: "toy-model",
            selection: Some(DemoSelectionSpec {
                pool: &pool,
                strategy: SelectionStrategy::Random(1),
                shots: 2,
            }),
            rules: Some(&rules),
            batch: BatchOptions::default(),
            max_output_tokens: None,
        };
        let err = match_dataset(&dataset, &catalog[0], &config, &backend).unwrap_err();
        assert!(matches!(err, MatchError::SelectionWithRules));
    }

    #[test]
    fn backend_failures_stay_per_pair() {
        let dataset = toy_dataset(Split::Test);
        let mut backend = ScriptedBackend::new("scripted");
        backend.push(ScriptEntry::failing("beta gadget", "injected outage", false));
        backend.push(ScriptEntry::substring("Entity", "Yes."));
        let catalog = design_catalog(&dataset.domain_noun);
        let run = match_dataset(
            &dataset,
            &catalog[0],
            &MatchConfig::zero_shot("toy-model"),
            &backend,
        )
        .unwrap();
        assert_eq!(run.decisions.len() + run.failures.len(), dataset.pairs.len());
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].pair_id, "p2");
        assert!(run.failures[0].error.contains("injected outage"));
    }

    #[test]
    fn demonstrations_are_selected_per_query_and_exclude_the_query() {
        // The only positive in the pool is the query itself, so selection can
        // succeed only if the matcher fails to exclude it.
        let narrow_pool = DemonstrationPool::from_pairs(
            "dev",
            vec![
                pair("p1", "alpha widget one", "alpha widget 1", Label::Match),
                pair("d2", "epsilon item", "zeta item", Label::NonMatch),
            ],
        );
        let dataset = Dataset {
            pairs: vec![pair("p1", "alpha widget one", "alpha widget 1", Label::Match)],
            ..toy_dataset(Split::Test)
        };
        let backend = ScriptedBackend::new("scripted").with_fallback("No.");
        let catalog = design_catalog(&dataset.domain_noun);
        let selection = |pool| {
            Some(DemoSelectionSpec {
                pool,
                strategy: SelectionStrategy::Related,
                shots: 2,
            })
        };
        let config = MatchConfig {
            model_id: "toy-model",
            selection: selection(&narrow_pool),
            rules: None,
            batch: BatchOptions::default(),
            max_output_tokens: None,
        };
        let err = match_dataset(&dataset, &catalog[0], &config, &backend).unwrap_err();
        assert!(matches!(
            err,
            MatchError::Selection(SelectionError::InsufficientPool { .. })
        ));

        // With an extra positive available the same run goes through, and the
        // demonstration turns show up in the prompt token count.
        let wide_pool = DemonstrationPool::from_pairs(
            "dev",
            vec![
                pair("p1", "alpha widget one", "alpha widget 1", Label::Match),
                pair("d1", "alpha widget one", "alpha widget uno", Label::Match),
                pair("d2", "epsilon item", "zeta item", Label::NonMatch),
            ],
        );
        let config = MatchConfig {
            model_id: "toy-model",
            selection: selection(&wide_pool),
            rules: None,
            batch: BatchOptions::default(),
            max_output_tokens: None,
        };
        let run = match_dataset(&dataset, &catalog[0], &config, &backend).unwrap();
        assert_eq!(run.decisions.len(), 1);
        assert!(run.usage_log[0].prompt_tokens > 40);
    }

    #[test]
    fn decision_logs_round_trip_and_appends_are_stable() {
        let dataset = toy_dataset(Split::Test);
        let backend = oracle_backend(&dataset);
        let catalog = design_catalog(&dataset.domain_noun);
        let run = match_dataset(
            &dataset,
            &catalog[2],
            &MatchConfig::zero_shot("toy-model"),
            &backend,
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a/decisions.jsonl");
        let b = dir.path().join("b/decisions.jsonl");
        append_decisions(&run.decisions, &a).unwrap();
        append_decisions(&run.decisions, &b).unwrap();
        assert_eq!(read_decisions(&a).unwrap(), run.decisions);
        assert_eq!(
            std::fs::read(&a).unwrap(),
            std::fs::read(&b).unwrap(),
            "identical runs must persist byte-identically"
        );

        let usage_path = dir.path().join("a/usage.jsonl");
        append_usage(&run.usage_log, &usage_path).unwrap();
        assert_eq!(read_usage(&usage_path).unwrap(), run.usage_log);
    }

    #[test]
    fn corrupt_decision_logs_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.jsonl");
        std::fs::write(&path, "{broken\n").unwrap();
        match read_decisions(&path) {
            Err(MatchError::CorruptLog { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected: {other:?}"),
        }
    }
}
