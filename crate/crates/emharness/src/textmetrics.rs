//! Token-level string similarity and the small statistics kit used by the
//! evaluation and explanation reports.
//!
//! All metrics operate on [`TokenBag`]s produced by one canonical tokenizer
//! so that ranking, correlation, and report code agree on what a token is.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least two samples, got {count}")]
    TooFewSamples { count: usize },
    #[error("zero variance, correlation undefined")]
    ZeroVariance,
}

/// Multiset of normalized tokens.
///
/// Normalization: lowercase, split on whitespace, strip leading and trailing
/// ASCII punctuation from each token. Interior punctuation survives, so
/// hyphenated model numbers like `d1-12mm` stay one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBag {
    tokens: Vec<String>,
}

impl TokenBag {
    pub fn from_text(text: &str) -> Self {
        let tokens = text
            .split_whitespace()
            .map(|raw| {
                raw.trim_matches(|c: char| c.is_ascii_punctuation())
                    .to_lowercase()
            })
            .filter(|t| !t.is_empty())
            .collect();
        TokenBag { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Distinct tokens in lexicographic order.
    pub fn distinct(&self) -> Vec<&str> {
        let mut set: Vec<&str> = self.tokens.iter().map(String::as_str).collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    fn counts(&self) -> std::collections::BTreeMap<&str, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for t in &self.tokens {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

/// Token-set Jaccard similarity. Two empty bags count as identical (1.0).
pub fn jaccard(a: &TokenBag, b: &TokenBag) -> f64 {
    let sa = a.distinct();
    let sb = b.distinct();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let sb_set: std::collections::BTreeSet<&str> = sb.iter().copied().collect();
    let intersection = sa.iter().filter(|t| sb_set.contains(**t)).count();
    let union = sa.len() + sb.len() - intersection;
    intersection as f64 / union as f64
}

/// Cosine similarity over token-frequency vectors. Either bag empty yields 0.0.
pub fn cosine(a: &TokenBag, b: &TokenBag) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let ca = a.counts();
    let cb = b.counts();
    let dot: f64 = ca
        .iter()
        .filter_map(|(t, &na)| cb.get(t).map(|&nb| (na * nb) as f64))
        .sum();
    let norm = |c: &std::collections::BTreeMap<&str, usize>| -> f64 {
        c.values().map(|&n| (n * n) as f64).sum::<f64>().sqrt()
    };
    // Rounding can push proportional vectors a hair past 1.0.
    (dot / (norm(&ca) * norm(&cb))).min(1.0)
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Normalized edit similarity: 1 - distance / max length. Two empty strings
/// are identical (1.0).
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max_len as f64
}

/// Generalized Jaccard with the default inner similarity: normalized edit
/// similarity thresholded at 0.5.
pub fn generalized_jaccard(a: &TokenBag, b: &TokenBag) -> f64 {
    generalized_jaccard_with(a, b, 0.5, edit_similarity)
}

/// Generalized Jaccard over distinct tokens with a pluggable inner similarity.
///
/// Cross-token similarities at or above `threshold` are paired greedily in
/// descending order (ties broken by token order, so the result is
/// deterministic); the score is the sum of paired similarities over
/// `|set(a)| + |set(b)| - matches`. With a crisp 0/1 inner similarity this
/// reduces to plain set Jaccard.
pub fn generalized_jaccard_with<F>(a: &TokenBag, b: &TokenBag, threshold: f64, inner: F) -> f64
where
    F: Fn(&str, &str) -> f64,
{
    let sa = a.distinct();
    let sb = b.distinct();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    if sa.is_empty() || sb.is_empty() {
        return 0.0;
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, ta) in sa.iter().enumerate() {
        for (j, tb) in sb.iter().enumerate() {
            let sim = inner(ta, tb);
            if sim >= threshold {
                candidates.push((sim, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then_with(|| sa[x.1].cmp(sa[y.1]))
            .then_with(|| sb[x.2].cmp(sb[y.2]))
    });
    let mut used_a = vec![false; sa.len()];
    let mut used_b = vec![false; sb.len()];
    let mut sum = 0.0;
    let mut matches = 0usize;
    for (sim, i, j) in candidates {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        sum += sim;
        matches += 1;
    }
    sum / (sa.len() + sb.len() - matches) as f64
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFewSamples { count: xs.len() });
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok(cov / (var_x * var_y).sqrt())
}

/// Mean and population standard deviation (divisor N, not N-1).
pub fn mean_and_population_sd(values: &[f64]) -> Result<(f64, f64), StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
