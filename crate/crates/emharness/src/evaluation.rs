//! Scoring match runs: confusion counts, F1, cross-design sensitivity,
//! and per-prompt cost accounting.
//!
//! The match class is the positive class throughout. Precision, recall and
//! F1 are fractions in [0, 1]; report rendering scales them to percent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llmclient::TokenUsage;
use crate::matcher::{MatchDecision, MatchRun};
use crate::records::Label;
use crate::textmetrics::{mean_and_population_sd, StatsError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("decision references unknown pair id '{pair_id}'")]
    UnknownPairId { pair_id: String },
    #[error("no values to summarize")]
    EmptyInput,
    #[error("no price listed for model '{model_id}'")]
    UnknownModel { model_id: String },
    #[error("baseline '{key}' missing from cost table")]
    UnknownBaseline { key: String },
    #[error("baseline cost rounds to zero cents, ratios are undefined")]
    ZeroBaselineCost,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad price table: {0}")]
    BadPriceTable(#[from] serde_json::Error),
}

/// Binary confusion counts with the match class as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

/// Tally decisions against gold labels. Every decision must reference a known
/// pair id; pairs without a decision are simply not counted.
pub fn confusion(
    decisions: &[MatchDecision],
    gold: &BTreeMap<String, Label>,
) -> Result<ConfusionCounts, EvalError> {
    let mut counts = ConfusionCounts::default();
    for decision in decisions {
        let actual = gold
            .get(&decision.pair_id)
            .ok_or_else(|| EvalError::UnknownPairId {
                pair_id: decision.pair_id.clone(),
            })?;
        match (decision.predicted, actual) {
            (Label::Match, Label::Match) => counts.true_positives += 1,
            (Label::Match, Label::NonMatch) => counts.false_positives += 1,
            (Label::NonMatch, Label::NonMatch) => counts.true_negatives += 1,
            (Label::NonMatch, Label::Match) => counts.false_negatives += 1,
        }
    }
    Ok(counts)
}

/// Precision, recall and F1 as fractions. A zero denominator yields 0.0
/// rather than an error so degenerate runs still produce a row.
pub fn precision_recall_f1(counts: &ConfusionCounts) -> (f64, f64, f64) {
    let tp = counts.true_positives as f64;
    let fp = counts.false_positives as f64;
    let fn_ = counts.false_negatives as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Mean and population standard deviation over per-design scores, the
/// sensitivity summary a model gets in cross-design comparisons. Values are
/// returned on the scale they were given (pass percentages to get percent).
pub fn sensitivity(scores_by_design: &BTreeMap<String, f64>) -> Result<(f64, f64), EvalError> {
    let values: Vec<f64> = scores_by_design.values().copied().collect();
    Ok(mean_and_population_sd(&values)?)
}

/// Per-million-token prices in dollars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub prompt_price_per_1m: f64,
    pub completion_price_per_1m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable {
    models: BTreeMap<String, ModelPrice>,
}

impl PriceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model_id: impl Into<String>, price: ModelPrice) {
        self.models.insert(model_id.into(), price);
    }

    pub fn get(&self, model_id: &str) -> Option<&ModelPrice> {
        self.models.get(model_id)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Exact dollar cost of one prompt given mean token counts.
pub fn cost_dollars(prompt_tokens: f64, completion_tokens: f64, price: &ModelPrice) -> f64 {
    (prompt_tokens * price.prompt_price_per_1m + completion_tokens * price.completion_price_per_1m)
        / 1_000_000.0
}

pub fn cost_per_prompt(
    usage: &TokenUsage,
    model_id: &str,
    prices: &PriceTable,
) -> Result<f64, EvalError> {
    let price = prices.get(model_id).ok_or_else(|| EvalError::UnknownModel {
        model_id: model_id.to_string(),
    })?;
    Ok(cost_dollars(
        usage.prompt_tokens as f64,
        usage.completion_tokens as f64,
        price,
    ))
}

/// Dollars to cents rounded to two decimals, the precision cost tables are
/// printed at.
pub fn display_cents(dollars: f64) -> f64 {
    (dollars * 100.0 * 100.0).round() / 100.0
}

/// Cost ratios relative to a baseline configuration. Ratios divide the
/// display-rounded cent values, matching how published tables derive their
/// ratio rows from the printed per-prompt costs.
pub fn cost_ratios(
    costs_dollars: &BTreeMap<String, f64>,
    baseline: &str,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let base = costs_dollars
        .get(baseline)
        .ok_or_else(|| EvalError::UnknownBaseline {
            key: baseline.to_string(),
        })?;
    let base_cents = display_cents(*base);
    if base_cents == 0.0 {
        return Err(EvalError::ZeroBaselineCost);
    }
    Ok(costs_dollars
        .iter()
        .map(|(key, dollars)| (key.clone(), display_cents(*dollars) / base_cents))
        .collect())
}

/// One scored (model, design) configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub design_name: String,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub evaluated: usize,
    pub failures: usize,
    pub mean_prompt_tokens: f64,
    pub mean_completion_tokens: f64,
    pub mean_latency_secs: f64,
    pub cost_per_prompt_dollars: Option<f64>,
}

/// Cross-design F1 summary for one model, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub designs: usize,
    pub mean_f1_pct: f64,
    pub sd_f1_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<ModelSummary>,
}

/// Score one run against gold labels and price it if a price is listed.
pub fn report_row(
    run: &MatchRun,
    gold: &BTreeMap<String, Label>,
    prices: Option<&PriceTable>,
) -> Result<ReportRow, EvalError> {
    let first = run.decisions.first().ok_or(EvalError::EmptyInput)?;
    let model_id = first.model_id.clone();
    let design_name = first.design_name.clone();
    let counts = confusion(&run.decisions, gold)?;
    let (precision, recall, f1) = precision_recall_f1(&counts);
    let n = run.usage_log.len().max(1) as f64;
    let mean_prompt_tokens =
        run.usage_log.iter().map(|u| u.prompt_tokens as f64).sum::<f64>() / n;
    let mean_completion_tokens =
        run.usage_log.iter().map(|u| u.completion_tokens as f64).sum::<f64>() / n;
    let mean_latency_secs = run.usage_log.iter().map(|u| u.latency_secs).sum::<f64>() / n;
    let cost_per_prompt_dollars = match prices {
        Some(table) => {
            let price = table.get(&model_id).ok_or_else(|| EvalError::UnknownModel {
                model_id: model_id.clone(),
            })?;
            Some(cost_dollars(mean_prompt_tokens, mean_completion_tokens, price))
        }
        None => None,
    };
    Ok(ReportRow {
        model_id,
        design_name,
        counts,
        precision,
        recall,
        f1,
        evaluated: run.decisions.len(),
        failures: run.failures.len(),
        mean_prompt_tokens,
        mean_completion_tokens,
        mean_latency_secs,
        cost_per_prompt_dollars,
    })
}

impl ExperimentReport {
    /// Group rows by model (first-appearance order) and summarize F1 across
    /// designs. Rows keep their input order.
    pub fn from_rows(rows: Vec<ReportRow>) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for row in &rows {
            if !grouped.contains_key(&row.model_id) {
                order.push(row.model_id.clone());
            }
            grouped.entry(row.model_id.clone()).or_default().push(row.f1 * 100.0);
        }
        let summaries = order
            .into_iter()
            .map(|model_id| {
                let scores = &grouped[&model_id];
                let (mean, sd) = if scores.is_empty() {
                    (0.0, 0.0)
                } else {
                    mean_and_population_sd(scores).expect("non-empty scores")
                };
                ModelSummary {
                    model_id,
                    designs: scores.len(),
                    mean_f1_pct: mean,
                    sd_f1_pct: sd,
                }
            })
            .collect();
        ExperimentReport { rows, summaries }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Tsv,
}

fn pct(value: f64) -> String {
    format!("{:.2}", value * 100.0)
}

fn cost_cell(dollars: Option<f64>) -> String {
    match dollars {
        Some(d) => format!("{:.2}", display_cents(d)),
        None => "-".to_string(),
    }
}

/// Render a report deterministically. Equal reports produce byte-identical
/// output in either format.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat) -> String {
    let header = [
        "model",
        "design",
        "precision_pct",
        "recall_pct",
        "f1_pct",
        "tp",
        "fp",
        "tn",
        "fn",
        "evaluated",
        "failures",
        "mean_prompt_tokens",
        "mean_completion_tokens",
        "cost_per_prompt_cents",
        "mean_latency_secs",
    ];
    let mut body_rows: Vec<Vec<String>> = Vec::new();
    for row in &report.rows {
        body_rows.push(vec![
            row.model_id.clone(),
            row.design_name.clone(),
            pct(row.precision),
            pct(row.recall),
            pct(row.f1),
            row.counts.true_positives.to_string(),
            row.counts.false_positives.to_string(),
            row.counts.true_negatives.to_string(),
            row.counts.false_negatives.to_string(),
            row.evaluated.to_string(),
            row.failures.to_string(),
            format!("{:.2}", row.mean_prompt_tokens),
            format!("{:.2}", row.mean_completion_tokens),
            cost_cell(row.cost_per_prompt_dollars),
            format!("{:.2}", row.mean_latency_secs),
        ]);
    }
    for summary in &report.summaries {
        let mut cells = vec![
            summary.model_id.clone(),
            format!("f1 mean/sd over {} designs", summary.designs),
            "-".to_string(),
            "-".to_string(),
            format!("{:.2} / {:.2}", summary.mean_f1_pct, summary.sd_f1_pct),
        ];
        cells.extend(std::iter::repeat("-".to_string()).take(header.len() - cells.len()));
        if summary.designs < 10 {
            cells[1].push_str(" (partial catalog)");
        }
        body_rows.push(cells);
    }

    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            out.push_str(&header.join("\t"));
            out.push('\n');
            for cells in body_rows {
                out.push_str(&cells.join("\t"));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            writeln!(out, "| {} |", header.join(" | ")).unwrap();
            writeln!(out, "|{}|", vec!["---"; header.len()].join("|")).unwrap();
            for cells in body_rows {
                writeln!(out, "| {} |", cells.join(" | ")).unwrap();
            }
        }
    }
    out
}
