//! In-context demonstration pools and selection strategies.
//!
//! Demonstrations are drawn from the development split of a benchmark and
//! always come back balanced: `shots/2` matches and `shots/2` non-matches,
//! interleaved starting with a match. Three strategies are supported:
//! handpicked examples from a file, seeded random sampling, and
//! related-pair selection by token Jaccard against the query pair.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use thiserror::Error;

use crate::records::{frame_pair, CandidatePair, Dataset, Label};
use crate::textmetrics::{jaccard, TokenBag};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("shots must be an even number >= 2, got {shots}")]
    InvalidShots { shots: usize },
    #[error("pool has only {available} {polarity} examples, need {needed}")]
    InsufficientPool {
        polarity: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("related selection needs the query pair")]
    MissingQuery,
}

/// Labeled examples partitioned by gold label, usually built from a
/// development split.
#[derive(Debug, Clone)]
pub struct DemonstrationPool {
    pub source_name: String,
    pub positives: Vec<CandidatePair>,
    pub negatives: Vec<CandidatePair>,
}

impl DemonstrationPool {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let (positives, negatives) = dataset
            .pairs
            .iter()
            .cloned()
            .partition(|p| p.gold.is_match());
        DemonstrationPool {
            source_name: dataset.name.clone(),
            positives,
            negatives,
        }
    }

    pub fn from_pairs(source_name: impl Into<String>, pairs: Vec<CandidatePair>) -> Self {
        let (positives, negatives) = pairs.into_iter().partition(|p| p.gold.is_match());
        DemonstrationPool {
            source_name: source_name.into(),
            positives,
            negatives,
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum SelectionStrategy {
    /// Fixed examples kept in file order, truncated to the requested shots.
    Handpicked(Vec<CandidatePair>),
    /// Seeded uniform sampling without replacement.
    Random(u64),
    /// Most similar pool pairs by token Jaccard over the framed pair text.
    Related,
}

impl SelectionStrategy {
    pub fn describe(&self) -> String {
        match self {
            SelectionStrategy::Handpicked(pairs) => format!("handpicked({} pairs)", pairs.len()),
            SelectionStrategy::Random(seed) => format!("random(seed={seed})"),
            SelectionStrategy::Related => "related".to_string(),
        }
    }
}

/// Rank candidates by token-set Jaccard between their framed pair text and
/// the query's. Ordering is similarity descending with ties broken by
/// ascending pair id, so rankings are total and reproducible.
pub fn rank_by_jaccard<'a>(
    query: &CandidatePair,
    candidates: &'a [CandidatePair],
) -> Vec<(&'a CandidatePair, f64)> {
    let query_bag = TokenBag::from_text(&frame_pair(query));
    let mut ranked: Vec<(&CandidatePair, f64)> = candidates
        .iter()
        .map(|c| (c, jaccard(&query_bag, &TokenBag::from_text(&frame_pair(c)))))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.pair_id.cmp(&b.0.pair_id)));
    ranked
}

fn polarity_name(label: Label) -> &'static str {
    match label {
        Label::Match => "matching",
        Label::NonMatch => "non-matching",
    }
}

fn take_checked(
    picked: Vec<CandidatePair>,
    need: usize,
    polarity: Label,
) -> Result<Vec<CandidatePair>, SelectionError> {
    if picked.len() < need {
        return Err(SelectionError::InsufficientPool {
            polarity: polarity_name(polarity),
            needed: need,
            available: picked.len(),
        });
    }
    Ok(picked.into_iter().take(need).collect())
}

/// Select a balanced demonstration list for one query pair.
///
/// `shots` must be even and at least 2; the result holds exactly `shots/2`
/// matches and `shots/2` non-matches interleaved match-first. The query pair
/// itself is excluded by id and never comes back as its own demonstration.
pub fn select_demonstrations(
    pool: &DemonstrationPool,
    strategy: &SelectionStrategy,
    shots: usize,
    query: Option<&CandidatePair>,
) -> Result<Vec<CandidatePair>, SelectionError> {
    if shots < 2 || shots % 2 != 0 {
        return Err(SelectionError::InvalidShots { shots });
    }
    let need = shots / 2;
    let not_query = |p: &&CandidatePair| query.map_or(true, |q| p.pair_id != q.pair_id);

    let (positives, negatives) = match strategy {
        SelectionStrategy::Handpicked(pairs) => {
            let pos: Vec<CandidatePair> = pairs
                .iter()
                .filter(|p| p.gold.is_match())
                .filter(not_query)
                .cloned()
                .collect();
            let neg: Vec<CandidatePair> = pairs
                .iter()
                .filter(|p| !p.gold.is_match())
                .filter(not_query)
                .cloned()
                .collect();
            (pos, neg)
        }
        SelectionStrategy::Random(seed) => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
            let pos_pool: Vec<&CandidatePair> = pool.positives.iter().filter(not_query).collect();
            let neg_pool: Vec<&CandidatePair> = pool.negatives.iter().filter(not_query).collect();
            let pos = pos_pool
                .choose_multiple(&mut rng, need.min(pos_pool.len()))
                .map(|p| (*p).clone())
                .collect();
            let neg = neg_pool
                .choose_multiple(&mut rng, need.min(neg_pool.len()))
                .map(|p| (*p).clone())
                .collect();
            (pos, neg)
        }
        SelectionStrategy::Related => {
            let query = query.ok_or(SelectionError::MissingQuery)?;
            let pos_pool: Vec<CandidatePair> = pool
                .positives
                .iter()
                .filter(|p| p.pair_id != query.pair_id)
                .cloned()
                .collect();
            let neg_pool: Vec<CandidatePair> = pool
                .negatives
                .iter()
                .filter(|p| p.pair_id != query.pair_id)
                .cloned()
                .collect();
            let pos = rank_by_jaccard(query, &pos_pool)
                .into_iter()
                .map(|(p, _)| p.clone())
                .collect();
            let neg = rank_by_jaccard(query, &neg_pool)
                .into_iter()
                .map(|(p, _)| p.clone())
                .collect();
            (pos, neg)
        }
    };

    let positives = take_checked(positives, need, Label::Match)?;
    let negatives = take_checked(negatives, need, Label::NonMatch)?;
    let mut interleaved = Vec::with_capacity(shots);
    for (p, n) in positives.into_iter().zip(negatives) {
        interleaved.push(p);
        interleaved.push(n);
    }
    Ok(interleaved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{EntityRecord, Split};

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

    fn toy_pool() -> DemonstrationPool {
        let mut pairs = Vec::new();
        for i in 0..10 {
            pairs.push(pair(
                &format!("pos{i}"),
                &format!("widget model {i}"),
                &format!("widget model {i} new"),
                Label::Match,
            ));
            pairs.push(pair(
                &format!("neg{i}"),
                &format!("gadget type {i}"),
                &format!("doohickey kind {i}"),
                Label::NonMatch,
            ));
        }
        DemonstrationPool::from_pairs("toy", pairs)
    }

    #[test]
    fn pool_partitions_by_gold_label() {
        let ds = Dataset {
            name: "toy".into(),
            split: Split::Development,
            domain_noun: "product descriptions".into(),
            pairs: vec![
                pair("a", "x", "y", Label::Match),
                pair("b", "x", "z", Label::NonMatch),
                pair("c", "u", "u", Label::Match),
            ],
        };
        let pool = DemonstrationPool::from_dataset(&ds);
        assert_eq!(pool.positives.len(), 2);
        assert_eq!(pool.negatives.len(), 1);
        assert_eq!(pool.len(), 3);
    }

    #[test]
    fn ranking_orders_by_overlap_with_deterministic_ties() {
        let query = pair("q", "dymo d1 tape 12mm", "dymo d1 tape", Label::Match);
        let candidates = vec![
            pair("far", "usb cable", "hdmi cable", Label::Match),
            pair("exact", "dymo d1 tape 12mm", "dymo d1 tape", Label::Match),
            pair("close", "dymo d1", "dymo d1", Label::Match),
        ];
        let ranked = rank_by_jaccard(&query, &candidates);
        let ids: Vec<&str> = ranked.iter().map(|(p, _)| p.pair_id.as_str()).collect();
        assert_eq!(ids, ["exact", "close", "far"]);
        assert!((ranked[0].1 - 1.0).abs() < 1e-12);
        assert!((ranked[1].1 - 5.0 / 7.0).abs() < 1e-12);
        assert!((ranked[2].1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ranking_breaks_score_ties_by_ascending_id() {
        let query = pair("q", "alpha beta", "alpha beta", Label::Match);
        let candidates = vec![
            pair("zz", "alpha beta", "alpha beta", Label::Match),
            pair("aa", "alpha beta", "alpha beta", Label::Match),
        ];
        let ranked = rank_by_jaccard(&query, &candidates);
        assert_eq!(ranked[0].0.pair_id, "aa");
        assert_eq!(ranked[1].0.pair_id, "zz");
    }

    fn assert_balanced_interleaved(demos: &[CandidatePair], shots: usize) {
        assert_eq!(demos.len(), shots);
        for (i, demo) in demos.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Label::Match
            } else {
                Label::NonMatch
            };
            assert_eq!(demo.gold, expected, "slot {i}");
        }
    }

    #[test]
    fn random_selection_is_balanced_reproducible_and_seed_sensitive() {
        let pool = toy_pool();
        let a = select_demonstrations(&pool, &SelectionStrategy::Random(7), 6, None).unwrap();
        let b = select_demonstrations(&pool, &SelectionStrategy::Random(7), 6, None).unwrap();
        assert_eq!(a, b);
        assert_balanced_interleaved(&a, 6);
        let c = select_demonstrations(&pool, &SelectionStrategy::Random(8), 6, None).unwrap();
        assert_ne!(
            a.iter().map(|p| &p.pair_id).collect::<Vec<_>>(),
            c.iter().map(|p| &p.pair_id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn related_selection_picks_most_similar_per_polarity() {
        let pool = DemonstrationPool::from_pairs(
            "toy",
            vec![
                pair("pos-near", "dymo d1 tape", "dymo d1 tape 12mm", Label::Match),
                pair("pos-far", "usb charger", "usb charger white", Label::Match),
                pair("neg-near", "dymo d1 tape", "brother tze tape", Label::NonMatch),
                pair("neg-far", "coffee mug", "tea cup", Label::NonMatch),
            ],
        );
        let query = pair("q", "dymo d1 tape 12mm x 7m", "dymo d1", Label::Match);
        let demos =
            select_demonstrations(&pool, &SelectionStrategy::Related, 2, Some(&query)).unwrap();
        assert_eq!(demos[0].pair_id, "pos-near");
        assert_eq!(demos[1].pair_id, "neg-near");
    }

    #[test]
    fn query_pair_is_never_its_own_demonstration() {
        let mut pool = toy_pool();
        let query = pool.positives[0].clone();
        pool.positives.truncate(4);
        for strategy in [SelectionStrategy::Random(3), SelectionStrategy::Related] {
            let demos = select_demonstrations(&pool, &strategy, 6, Some(&query)).unwrap();
            assert!(demos.iter().all(|d| d.pair_id != query.pair_id));
            assert_balanced_interleaved(&demos, 6);
        }
    }

    #[test]
    fn handpicked_selection_keeps_file_order_and_truncates() {
        let picked = vec![
            pair("h1", "a", "a", Label::Match),
            pair("h2", "b", "c", Label::NonMatch),
            pair("h3", "d", "d", Label::Match),
            pair("h4", "e", "f", Label::NonMatch),
            pair("h5", "g", "g", Label::Match),
        ];
        let pool = toy_pool();
        let demos = select_demonstrations(
            &pool,
            &SelectionStrategy::Handpicked(picked),
            4,
            None,
        )
        .unwrap();
        let ids: Vec<&str> = demos.iter().map(|p| p.pair_id.as_str()).collect();
        assert_eq!(ids, ["h1", "h2", "h3", "h4"]);
    }

    #[test]
    fn selection_error_cases() {
        let pool = toy_pool();
        for shots in [0, 1, 3] {
            assert!(matches!(
                select_demonstrations(&pool, &SelectionStrategy::Random(1), shots, None),
                Err(SelectionError::InvalidShots { .. })
            ));
        }
        assert!(matches!(
            select_demonstrations(&pool, &SelectionStrategy::Related, 2, None),
            Err(SelectionError::MissingQuery)
        ));
        let tiny = DemonstrationPool::from_pairs(
            "tiny",
            vec![
                pair("p", "a", "a", Label::Match),
                pair("n", "b", "c", Label::NonMatch),
            ],
        );
        let err = select_demonstrations(&tiny, &SelectionStrategy::Random(1), 4, None).unwrap_err();
        match err {
            SelectionError::InsufficientPool {
                needed, available, ..
            } => {
                assert_eq!((needed, available), (2, 1));
            }
            other => panic!("unexpected error: {other}"),
        }
    }
}
