//! Metrics, baselines and the inference-cost harness.

pub mod bench;
pub mod metrics;
pub mod mf;

pub use metrics::{ndcg_at_k, recall_at_k, MetricReport, UserMetric};
pub use mf::{MfModel, MfTrainConfig};

use crate::data::InteractionDataset;

/// Top-`k` `(item, score)` pairs by descending score, lower index first on
/// ties, skipping items in the sorted `exclude` list.
pub fn top_k(scores: &[f64], k: usize, exclude: &[usize]) -> Vec<(usize, f64)> {
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    if k == 0 {
        return best;
    }
    let mut ex = exclude.iter().peekable();
    for (i, &s) in scores.iter().enumerate() {
        while ex.peek().is_some_and(|&&e| e < i) {
            ex.next();
        }
        if ex.peek() == Some(&&i) {
            continue;
        }
        if best.len() == k && s <= best[k - 1].1 {
            continue;
        }
        let pos = best.partition_point(|&(_, b)| b >= s);
        best.insert(pos, (i, s));
        if best.len() > k {
            best.pop();
        }
    }
    best
}

/// Ranks items by training popularity, ignoring the user.
pub struct PopularityRanker {
    scores: Vec<f64>,
}

impl PopularityRanker {
    pub fn new(dataset: &InteractionDataset) -> Self {
        Self {
            scores: dataset.popularity().iter().map(|&c| c as f64).collect(),
        }
    }

    pub fn recommend(&self, k: usize, exclude: &[usize]) -> Vec<usize> {
        top_k(&self.scores, k, exclude).into_iter().map(|(i, _)| i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_excludes() {
        let scores = [0.5, 0.9, 0.1, 0.9, 0.7];
        assert_eq!(top_k(&scores, 3, &[]), vec![(1, 0.9), (3, 0.9), (4, 0.7)]);
        assert_eq!(top_k(&scores, 2, &[1, 4]), vec![(3, 0.9), (0, 0.5)]);
        assert_eq!(top_k(&scores, 10, &[0, 1, 2, 3, 4]), vec![]);
        assert!(top_k(&scores, 0, &[]).is_empty());
    }

    #[test]
    fn top_k_matches_full_sort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..50).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
            let mut ex: Vec<usize> = (0..50).filter(|_| rng.random_bool(0.2)).collect();
            ex.sort_unstable();
            let mut all: Vec<(usize, f64)> = scores
                .iter()
                .copied()
                .enumerate()
                .filter(|(i, _)| !ex.contains(i))
                .collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            all.truncate(10);
            assert_eq!(top_k(&scores, 10, &ex), all);
        }
    }
}
