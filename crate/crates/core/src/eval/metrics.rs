//! Recall@K and NDCG@K over held-out interactions.

use std::collections::HashSet;
use std::fmt;

/// `|top-K ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k(recommended: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let rel: HashSet<usize> = relevant.iter().copied().collect();
    let hits = recommended.iter().take(k).filter(|i| rel.contains(i)).count();
    Some(hits as f64 / rel.len() as f64)
}

/// Binary-gain NDCG with discount `1 / log2(rank + 1)` and an ideal list of
/// `min(|relevant|, K)` hits.
pub fn ndcg_at_k(recommended: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let rel: HashSet<usize> = relevant.iter().copied().collect();
    let dcg: f64 = recommended
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| rel.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..rel.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some(dcg / ideal)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserMetric {
    pub user: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Mean Recall@K / NDCG@K over users with a non-empty relevant set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub per_user: Vec<UserMetric>,
}

impl MetricReport {
    /// Aggregates `(user, recommended, relevant)` triples; users with no
    /// relevant items are skipped. Averages are taken in user order so the
    /// result does not depend on iteration order.
    pub fn collect<'a, I>(k: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = (usize, &'a [usize], &'a [usize])>,
    {
        let mut per_user: Vec<UserMetric> = rows
            .into_iter()
            .filter_map(|(user, rec, rel)| {
                Some(UserMetric {
                    user,
                    recall: recall_at_k(rec, rel, k)?,
                    ndcg: ndcg_at_k(rec, rel, k)?,
                })
            })
            .collect();
        per_user.sort_by_key(|m| m.user);
        Self::from_per_user(k, per_user)
    }

    pub fn from_per_user(k: usize, mut per_user: Vec<UserMetric>) -> Self {
        per_user.sort_by_key(|m| m.user);
        let n = per_user.len().max(1) as f64;
        let recall = per_user.iter().map(|m| m.recall).sum::<f64>() / n;
        let ndcg = per_user.iter().map(|m| m.ndcg).sum::<f64>() / n;
        Self {
            k,
            recall,
            ndcg,
            per_user,
        }
    }

    pub fn users(&self) -> usize {
        self.per_user.len()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Recall@{k}={:.6} NDCG@{k}={:.6} users={}",
            self.recall,
            self.ndcg,
            self.users(),
            k = self.k
        )
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn recall_examples() {
        let rec: Vec<usize> = (0..10).collect();
        assert_eq!(recall_at_k(&rec, &[1, 5, 20, 30], 10), Some(0.5));
        assert_eq!(recall_at_k(&rec, &[0, 1, 2], 10), Some(1.0));
        assert_eq!(recall_at_k(&rec, &[], 10), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[7, 1, 2], &[7], 10), Some(1.0));
        assert!((ndcg_at_k(&[1, 2, 7], &[7], 10).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[1, 2, 3], &[], 10), None);
    }

    fn brute_recall(rec: &[usize], rel: &[usize], k: usize) -> f64 {
        let top = &rec[..k.min(rec.len())];
        let mut hits = 0;
        for r in rel {
            for t in top {
                if r == t {
                    hits += 1;
                }
            }
        }
        hits as f64 / rel.len() as f64
    }

    fn brute_ndcg(rec: &[usize], rel: &[usize], k: usize) -> f64 {
        let mut dcg = 0.0;
        for (pos, item) in rec.iter().enumerate().take(k) {
            if rel.contains(item) {
                dcg += 1.0 / (pos as f64 + 2.0).ln() * std::f64::consts::LN_2;
            }
        }
        let mut idcg = 0.0;
        for pos in 0..rel.len().min(k) {
            idcg += 1.0 / (pos as f64 + 2.0).ln() * std::f64::consts::LN_2;
        }
        dcg / idcg
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let mut pool: Vec<usize> = (0..60).collect();
            pool.shuffle(&mut rng);
            let rec = pool[..rng.random_range(1..30)].to_vec();
            pool.shuffle(&mut rng);
            let rel = pool[..rng.random_range(1..15)].to_vec();
            let k = rng.random_range(1..25);
            assert_eq!(recall_at_k(&rec, &rel, k).unwrap(), brute_recall(&rec, &rel, k));
            let a = ndcg_at_k(&rec, &rel, k).unwrap();
            assert!((a - brute_ndcg(&rec, &rel, k)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn perfect_ranking_scores_one(n_rel in 1usize..10, extra in 0usize..10) {
            let rel: Vec<usize> = (0..n_rel).collect();
            let rec: Vec<usize> = (0..n_rel + extra).collect();
            prop_assert_eq!(recall_at_k(&rec, &rel, 10), Some(1.0));
            prop_assert!((ndcg_at_k(&rec, &rel, 10).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn metrics_in_unit_interval(rec in proptest::collection::vec(0usize..30, 0..20), rel in proptest::collection::vec(0usize..30, 1..10), k in 1usize..20) {
            let mut rec = rec;
            rec.dedup();
            let mut seen = std::collections::HashSet::new();
            rec.retain(|x| seen.insert(*x));
            let r = recall_at_k(&rec, &rel, k).unwrap();
            let n = ndcg_at_k(&rec, &rel, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        }

        #[test]
        fn report_ignores_user_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<(usize, Vec<usize>, Vec<usize>)> = (0..8)
                .map(|u| {
                    let rec: Vec<usize> = (0..10).map(|_| rng.random_range(0..40)).collect();
                    let rel: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..40)).collect();
                    (u, rec, rel)
                })
                .collect();
            let a = MetricReport::collect(10, rows.iter().map(|(u, a, b)| (*u, a.as_slice(), b.as_slice())));
            let b = MetricReport::collect(10, rows.iter().rev().map(|(u, a, b)| (*u, a.as_slice(), b.as_slice())));
            prop_assert_eq!(a, b);
        }
    }
}
