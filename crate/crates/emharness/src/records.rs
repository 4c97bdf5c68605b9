//! Benchmark records: entity descriptions, candidate pairs, and dataset
//! ingestion from delimited pair files.
//!
//! A benchmark ships as `<name>/{dev,test}.csv` with a header row, a `label`
//! column (1 = match, 0 = non-match), and attribute columns split into a
//! `left_` and a `right_` group. Ingestion is schema-driven so column names
//! stay configurable per benchmark instead of hard-coded.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed delimited data in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("missing required column '{column}' in {path}")]
    MissingColumn { column: String, path: String },
    #[error("duplicate column '{column}' in {path}")]
    DuplicateColumn { column: String, path: String },
    #[error("no '{prefix}' attribute columns in {path}")]
    MissingAttributes { prefix: String, path: String },
    #[error("duplicate pair id '{pair_id}' at row {row} in {path}")]
    DuplicatePairId {
        pair_id: String,
        row: usize,
        path: String,
    },
    #[error("row {row}, column '{column}' in {path}: invalid label '{value}' (expected 0 or 1)")]
    BadLabel {
        row: usize,
        column: String,
        value: String,
        path: String,
    },
    #[error("benchmark directory {dir} contains neither dev.csv nor test.csv")]
    NoSplits { dir: String },
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("fine-tuning export requires a forced-output design, got '{design}'")]
    FreeFormatDesign { design: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Gold or predicted match label for a candidate pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Match,
    NonMatch,
}

impl Label {
    pub fn from_int(value: i64) -> Option<Label> {
        match value {
            1 => Some(Label::Match),
            0 => Some(Label::NonMatch),
            _ => None,
        }
    }

    pub fn as_int(self) -> i64 {
        match self {
            Label::Match => 1,
            Label::NonMatch => 0,
        }
    }

    pub fn is_match(self) -> bool {
        self == Label::Match
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Development,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Development => "dev",
            Split::Test => "test",
        }
    }
}

/// One entity description: an ordered list of named attribute values.
///
/// Attribute names are unique and keep their source order; `None` marks an
/// attribute that is present in the schema but empty for this record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub record_id: String,
    pub attributes: Vec<(String, Option<String>)>,
}

impl EntityRecord {
    pub fn new(record_id: impl Into<String>, attributes: Vec<(String, Option<String>)>) -> Self {
        EntityRecord {
            record_id: record_id.into(),
            attributes,
        }
    }

    /// Value of the named attribute, if present and non-empty.
    pub fn attribute_value(&self, name: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| v.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub pair_id: String,
    pub left: EntityRecord,
    pub right: EntityRecord,
    pub gold: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    /// Plural noun used in domain-specific task questions, e.g.
    /// "product descriptions" or "publications".
    pub domain_noun: String,
    pub pairs: Vec<CandidatePair>,
}

impl Dataset {
    /// (matches, non-matches) counts.
    pub fn label_counts(&self) -> (usize, usize) {
        let matches = self.pairs.iter().filter(|p| p.gold.is_match()).count();
        (matches, self.pairs.len() - matches)
    }

    pub fn gold_labels(&self) -> BTreeMap<String, Label> {
        self.pairs
            .iter()
            .map(|p| (p.pair_id.clone(), p.gold))
            .collect()
    }

    pub fn pair_by_id(&self, pair_id: &str) -> Option<&CandidatePair> {
        self.pairs.iter().find(|p| p.pair_id == pair_id)
    }
}

/// Both splits of a benchmark directory.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: String,
    pub dev: Option<Dataset>,
    pub test: Option<Dataset>,
}

/// Column mapping for pair files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSchema {
    pub id_column: String,
    pub label_column: String,
    pub left_prefix: String,
    pub right_prefix: String,
}

impl Default for IngestSchema {
    fn default() -> Self {
        IngestSchema {
            id_column: "pair_id".into(),
            label_column: "label".into(),
            left_prefix: "left_".into(),
            right_prefix: "right_".into(),
        }
    }
}

impl IngestSchema {
    pub fn from_json_file(path: &Path) -> Result<Self, IngestError> {
        let file = File::open(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| IngestError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }
}

/// Concatenation of the non-empty attribute values in attribute order.
pub fn serialize_entity(record: &EntityRecord) -> String {
    record
        .attributes
        .iter()
        .filter_map(|(_, v)| v.as_deref())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Two-line framing of a pair. Values are embedded verbatim inside single
/// quotes; apostrophes in the data are not escaped.
pub fn frame_pair(pair: &CandidatePair) -> String {
    format!(
        "Entity 1: '{}'\nEntity 2: '{}'",
        serialize_entity(&pair.left),
        serialize_entity(&pair.right)
    )
}

struct ColumnLayout {
    id: Option<usize>,
    label: usize,
    left: Vec<(usize, String)>,
    right: Vec<(usize, String)>,
}

fn resolve_columns(
    headers: &csv::StringRecord,
    schema: &IngestSchema,
    path: &str,
) -> Result<ColumnLayout, IngestError> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for h in headers {
        let count = seen.entry(h).or_insert(0);
        *count += 1;
        if *count > 1 {
            return Err(IngestError::DuplicateColumn {
                column: h.to_string(),
                path: path.to_string(),
            });
        }
    }
    let mut layout = ColumnLayout {
        id: None,
        label: usize::MAX,
        left: Vec::new(),
        right: Vec::new(),
    };
    for (idx, header) in headers.iter().enumerate() {
        if header == schema.id_column {
            layout.id = Some(idx);
        } else if header == schema.label_column {
            layout.label = idx;
        } else if let Some(name) = header.strip_prefix(&schema.left_prefix) {
            layout.left.push((idx, name.to_string()));
        } else if let Some(name) = header.strip_prefix(&schema.right_prefix) {
            layout.right.push((idx, name.to_string()));
        }
    }
    if layout.label == usize::MAX {
        return Err(IngestError::MissingColumn {
            column: schema.label_column.clone(),
            path: path.to_string(),
        });
    }
    if layout.left.is_empty() {
        return Err(IngestError::MissingAttributes {
            prefix: schema.left_prefix.clone(),
            path: path.to_string(),
        });
    }
    if layout.right.is_empty() {
        return Err(IngestError::MissingAttributes {
            prefix: schema.right_prefix.clone(),
            path: path.to_string(),
        });
    }
    Ok(layout)
}

fn record_side(
    row: &csv::StringRecord,
    columns: &[(usize, String)],
    record_id: String,
) -> EntityRecord {
    let attributes = columns
        .iter()
        .map(|(idx, name)| {
            let value = row.get(*idx).unwrap_or("").trim();
            let value = if value.is_empty() {
                None
            } else {
                Some(value.to_string())
            };
            (name.clone(), value)
        })
        .collect();
    EntityRecord::new(record_id, attributes)
}

/// Load one split of a benchmark from a delimited pair file.
pub fn ingest_dataset(
    path: &Path,
    name: &str,
    split: Split,
    domain_noun: &str,
    schema: &IngestSchema,
) -> Result<Dataset, IngestError> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            path: shown.clone(),
            source,
        })?
        .clone();
    let layout = resolve_columns(&headers, schema, &shown)?;

    let mut pairs = Vec::new();
    let mut seen_ids: BTreeMap<String, usize> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|source| IngestError::Csv {
            path: shown.clone(),
            source,
        })?;
        let pair_id = match layout.id {
            Some(idx) => row.get(idx).unwrap_or("").trim().to_string(),
            None => format!("pair-{row_no:06}"),
        };
        if seen_ids.insert(pair_id.clone(), row_no).is_some() {
            return Err(IngestError::DuplicatePairId {
                pair_id,
                row: row_no,
                path: shown,
            });
        }
        let raw_label = row.get(layout.label).unwrap_or("").trim();
        let gold = raw_label
            .parse::<i64>()
            .ok()
            .and_then(Label::from_int)
            .ok_or_else(|| IngestError::BadLabel {
                row: row_no,
                column: schema.label_column.clone(),
                value: raw_label.to_string(),
                path: shown.clone(),
            })?;
        let left = record_side(&row, &layout.left, format!("{pair_id}/left"));
        let right = record_side(&row, &layout.right, format!("{pair_id}/right"));
        pairs.push(CandidatePair {
            pair_id,
            left,
            right,
            gold,
        });
    }
    Ok(Dataset {
        name: name.to_string(),
        split,
        domain_noun: domain_noun.to_string(),
        pairs,
    })
}

/// Load `dev.csv` and/or `test.csv` from a benchmark directory.
pub fn ingest_benchmark_dir(
    dir: &Path,
    domain_noun: &str,
    schema: &IngestSchema,
) -> Result<Benchmark, IngestError> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "benchmark".to_string());
    let mut benchmark = Benchmark {
        name: name.clone(),
        dev: None,
        test: None,
    };
    let dev_path = dir.join("dev.csv");
    if dev_path.is_file() {
        benchmark.dev = Some(ingest_dataset(
            &dev_path,
            &name,
            Split::Development,
            domain_noun,
            schema,
        )?);
    }
    let test_path = dir.join("test.csv");
    if test_path.is_file() {
        benchmark.test = Some(ingest_dataset(
            &test_path,
            &name,
            Split::Test,
            domain_noun,
            schema,
        )?);
    }
    if benchmark.dev.is_none() && benchmark.test.is_none() {
        return Err(IngestError::NoSplits {
            dir: dir.display().to_string(),
        });
    }
    Ok(benchmark)
}

/// Write a dataset back out in the ingestion format (used to materialize a
/// validated copy; ingesting the output reproduces the same pairs).
pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<(), ExportError> {
    let mut attr_names: Vec<String> = Vec::new();
    for pair in &dataset.pairs {
        for (name, _) in pair.left.attributes.iter().chain(&pair.right.attributes) {
            if !attr_names.contains(name) {
                attr_names.push(name.clone());
            }
        }
    }
    let mut writer = csv::Writer::from_path(path).map_err(into_io)?;
    let mut header = vec!["pair_id".to_string(), "label".to_string()];
    header.extend(attr_names.iter().map(|n| format!("left_{n}")));
    header.extend(attr_names.iter().map(|n| format!("right_{n}")));
    writer.write_record(&header).map_err(into_io)?;
    for pair in &dataset.pairs {
        let mut row = vec![pair.pair_id.clone(), pair.gold.as_int().to_string()];
        for side in [&pair.left, &pair.right] {
            for name in &attr_names {
                row.push(side.attribute_value(name).unwrap_or("").to_string());
            }
        }
        writer.write_record(&row).map_err(into_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn into_io(e: csv::Error) -> ExportError {
    ExportError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

/// Seeded down-sampling without replacement; the surviving pairs keep their
/// original relative order. A target at or above the current size is a no-op.
pub fn downsample(dataset: &Dataset, target: usize, seed: u64) -> Dataset {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if target >= dataset.pairs.len() {
        return dataset.clone();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..dataset.pairs.len()).collect();
    indices.shuffle(&mut rng);
    let mut keep: Vec<usize> = indices.into_iter().take(target).collect();
    keep.sort_unstable();
    Dataset {
        name: dataset.name.clone(),
        split: dataset.split,
        domain_noun: dataset.domain_noun.clone(),
        pairs: keep.iter().map(|&i| dataset.pairs[i].clone()).collect(),
    }
}

/// Export pairs as fine-tuning conversations: one JSON object per line with a
/// user turn holding the rendered prompt and an assistant turn holding the
/// gold answer ("Yes" / "No"). Only forced-output designs are exportable.
pub fn export_finetune_dataset(
    dataset: &Dataset,
    design: &crate::promptkit::PromptDesign,
    out: &mut dyn Write,
) -> Result<usize, ExportError> {
    use crate::promptkit::{render_match_prompt, OutputFormat};

    if design.format != OutputFormat::Force {
        return Err(ExportError::FreeFormatDesign {
            design: design.name.clone(),
        });
    }
    let mut written = 0usize;
    for pair in &dataset.pairs {
        let conversation =
            render_match_prompt(design, pair, &[], None).expect("zero-shot rendering");
        let answer = if pair.gold.is_match() { "Yes" } else { "No" };
        let line = serde_json::json!({
            "messages": [
                {"role": "user", "content": conversation.single_message()},
                {"role": "assistant", "content": answer},
            ]
        });
        serde_json::to_writer(&mut *out, &line)
            .map_err(|e| ExportError::Io(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        out.write_all(b"\n")?;
        written += 1;
    }
    Ok(written)
}

/// Parse one line of an exported fine-tuning file back into its two turns.
pub fn read_finetune_line(line: &str) -> Option<(String, String)> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    let messages = value.get("messages")?.as_array()?;
    let user = messages.first()?.get("content")?.as_str()?.to_string();
    let assistant = messages.get(1)?.get("content")?.as_str()?.to_string();
    Some((user, assistant))
}
