//! Ranking metrics over a set of per-example predictions: global average
//! precision over the pooled top-N lists, and top-1 hit rate.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{DcgnError, Result};

/// Each example keeps at most this many predictions.
pub const TOP_N: usize = 20;

/// One example's ground truth and its strongest predictions, sorted by
/// confidence descending (ties by class id ascending).
#[derive(Debug, Clone)]
pub struct ExamplePredictions {
    pub id: String,
    pub truth: BTreeSet<usize>,
    /// (class, confidence) pairs, at most `TOP_N`, confidence descending.
    pub top: Vec<(usize, f64)>,
}

/// Predictions for a whole evaluation split.
#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    pub examples: Vec<ExamplePredictions>,
}

impl PredictionSet {
    pub fn new() -> Self {
        PredictionSet::default()
    }

    /// Record one example's per-class scores, keeping the top N.
    pub fn push(&mut self, id: impl Into<String>, truth: impl IntoIterator<Item = usize>, scores: &[f64]) {
        let mut pairs: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        pairs.sort_by(|a, b| match b.1.partial_cmp(&a.1).expect("finite confidence") {
            Ordering::Equal => a.0.cmp(&b.0),
            other => other,
        });
        pairs.truncate(TOP_N);
        self.examples.push(ExamplePredictions {
            id: id.into(),
            truth: truth.into_iter().collect(),
            top: pairs,
        });
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Total ground-truth labels across the set, the recall denominator.
    pub fn total_positives(&self) -> usize {
        self.examples.iter().map(|e| e.truth.len()).sum()
    }
}

/// Global average precision: pool every example's top-N pairs into one list
/// ranked by confidence (ties by example id, then class id), then sum
/// precision-at-rank over the hit positions, divided by the total number of
/// ground-truth labels — including those that never made a top-N list.
pub fn gap(preds: &PredictionSet) -> Result<f64> {
    let total_positives = preds.total_positives();
    if total_positives == 0 {
        return Err(DcgnError::UndefinedMetric(
            "gap needs at least one ground-truth label".into(),
        ));
    }
    struct Pooled<'a> {
        confidence: f64,
        id: &'a str,
        class: usize,
        hit: bool,
    }
    let mut pooled: Vec<Pooled> = Vec::new();
    for example in &preds.examples {
        for &(class, confidence) in &example.top {
            pooled.push(Pooled {
                confidence,
                id: &example.id,
                class,
                hit: example.truth.contains(&class),
            });
        }
    }
    pooled.sort_by(|a, b| {
        match b.confidence.partial_cmp(&a.confidence).expect("finite confidence") {
            Ordering::Equal => a.id.cmp(b.id).then(a.class.cmp(&b.class)),
            other => other,
        }
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, pair) in pooled.iter().enumerate() {
        if pair.hit {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total_positives as f64)
}

/// Fraction of examples whose single best prediction is a true label.
pub fn hit_at_1(preds: &PredictionSet) -> Result<f64> {
    if preds.is_empty() {
        return Err(DcgnError::UndefinedMetric(
            "hit_at_1 over zero examples".into(),
        ));
    }
    let hits = preds
        .examples
        .iter()
        .filter(|e| {
            e.top
                .first()
                .is_some_and(|&(class, _)| e.truth.contains(&class))
        })
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn single_correct_top_prediction_scores_one() {
        let mut preds = PredictionSet::new();
        preds.push("a", [2], &[0.1, 0.2, 0.9]);
        assert_eq!(gap(&preds).unwrap(), 1.0);
        assert_eq!(hit_at_1(&preds).unwrap(), 1.0);
    }

    #[test]
    fn correct_prediction_ranked_second_scores_half() {
        // Two pooled pairs; the hit sits at rank 2: p(2) = 1/2, one positive.
        let mut preds = PredictionSet::new();
        preds.push("a", [1], &[0.9, 0.4]);
        assert_eq!(gap(&preds).unwrap(), 0.5);
        assert_eq!(hit_at_1(&preds).unwrap(), 0.0);
    }

    #[test]
    fn positives_missing_from_top_n_depress_recall() {
        // 21 classes: the true class 20 is ranked last and pushed out of the
        // top 20, so no pooled pair can hit and GAP would be 0/1... but a
        // second example supplies a hit at global rank 1.
        let mut scores = vec![0.5; 21];
        for (i, s) in scores.iter_mut().enumerate() {
            *s = 0.9 - 0.01 * i as f64;
        }
        let mut preds = PredictionSet::new();
        preds.push("a", [20], &scores);
        preds.push("b", [0], &[0.99]);
        // P = 2, single hit at rank 1: GAP = (1/1) / 2.
        assert_eq!(gap(&preds).unwrap(), 0.5);
    }

    #[test]
    fn zero_positives_is_undefined() {
        let mut preds = PredictionSet::new();
        preds.push("a", [], &[0.5, 0.5]);
        assert!(matches!(gap(&preds), Err(DcgnError::UndefinedMetric(_))));
    }

    #[test]
    fn hit_rate_counts_examples() {
        let mut preds = PredictionSet::new();
        preds.push("a", [0], &[0.9, 0.1]);
        preds.push("b", [1], &[0.8, 0.9]);
        preds.push("c", [0], &[0.2, 0.7]);
        let hit = hit_at_1(&preds).unwrap();
        assert!((hit - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hit_rate_ignores_lower_ranks() {
        let mut a = PredictionSet::new();
        a.push("x", [0], &[0.9, 0.8, 0.7]);
        let mut b = PredictionSet::new();
        b.push("x", [0], &[0.9, 0.1, 0.2]);
        assert_eq!(hit_at_1(&a).unwrap(), hit_at_1(&b).unwrap());
    }

    #[test]
    fn empty_set_hit_rate_is_undefined() {
        let preds = PredictionSet::new();
        assert!(matches!(hit_at_1(&preds), Err(DcgnError::UndefinedMetric(_))));
    }

    #[test]
    fn tie_break_is_deterministic_by_id_then_class() {
        // Identical confidences everywhere; example "a" class 0 is the only
        // hit and must sort first: GAP = 1 / P with P = 1... p(1) = 1.
        let mut preds = PredictionSet::new();
        preds.push("b", [], &[0.5, 0.5]);
        preds.push("a", [0], &[0.5, 0.5]);
        assert_eq!(gap(&preds).unwrap(), 1.0);
    }

    /// Direct quadratic-time average precision over the merged list.
    fn brute_force_ap(preds: &PredictionSet) -> f64 {
        let mut pairs: Vec<(f64, String, usize, bool)> = Vec::new();
        for e in &preds.examples {
            for &(class, conf) in &e.top {
                pairs.push((conf, e.id.clone(), class, e.truth.contains(&class)));
            }
        }
        pairs.sort_by(|a, b| match b.0.partial_cmp(&a.0).unwrap() {
            Ordering::Equal => a.1.cmp(&b.1).then(a.2.cmp(&b.2)),
            other => other,
        });
        let p_total = preds.total_positives() as f64;
        let mut sum = 0.0;
        for i in 0..pairs.len() {
            if !pairs[i].3 {
                continue;
            }
            let hits_at_i = pairs[..=i].iter().filter(|p| p.3).count() as f64;
            sum += hits_at_i / (i + 1) as f64 / p_total;
        }
        sum
    }

    fn random_set(seed: u64) -> PredictionSet {
        let mut rng = SplitMix64::new(seed);
        let examples = rng.uniform_usize(1, 5);
        let classes = rng.uniform_usize(1, 6);
        let mut preds = PredictionSet::new();
        for i in 0..examples {
            let scores: Vec<f64> = (0..classes).map(|_| rng.next_f64()).collect();
            let truth: Vec<usize> = (0..classes).filter(|_| rng.next_f64() < 0.4).collect();
            preds.push(format!("v{i}"), truth, &scores);
        }
        preds
    }

    #[test]
    fn matches_brute_force_average_precision() {
        let mut checked = 0;
        for seed in 0..400 {
            let preds = random_set(seed);
            if preds.total_positives() == 0 {
                continue;
            }
            let fast = gap(&preds).unwrap();
            let slow = brute_force_ap(&preds);
            assert!((fast - slow).abs() < 1e-12, "seed {seed}: {fast} vs {slow}");
            checked += 1;
            if checked >= 200 {
                break;
            }
        }
        assert!(checked >= 200, "only {checked} usable random sets");
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_confidence_transforms(seed in 0u64..500) {
            let preds = random_set(seed);
            prop_assume!(preds.total_positives() > 0);
            let base = gap(&preds).unwrap();
            for transform in [|x: f64| x * x * x, |x: f64| 1.0 / (1.0 + (-x).exp())] {
                let mut mapped = preds.clone();
                for e in &mut mapped.examples {
                    for pair in &mut e.top {
                        pair.1 = transform(pair.1);
                    }
                }
                prop_assert_eq!(gap(&mapped).unwrap(), base);
            }
        }

        #[test]
        fn gap_stays_in_unit_interval(seed in 0u64..500) {
            let preds = random_set(seed);
            prop_assume!(preds.total_positives() > 0);
            let g = gap(&preds).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }
}
