//! Matrix-factorisation baseline trained with BPR.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{top_k, MetricReport};
use crate::data::{InteractionDataset, Split};
use crate::numeric::{tape::sigmoid, xavier_uniform, Tensor};

#[derive(Clone, Debug)]
pub struct MfTrainConfig {
    pub dim: usize,
    pub lr: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for MfTrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            lr: 0.05,
            l2: 1e-5,
            max_epochs: 200,
            patience: 20,
            k: 10,
            seed: 0,
        }
    }
}

/// User and item factor matrices; a user's scores are `I` inner products.
#[derive(Clone, Debug)]
pub struct MfModel {
    pub users: Tensor,
    pub items: Tensor,
}

impl MfModel {
    pub fn random(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            users: xavier_uniform(n_users, dim, &mut rng),
            items: xavier_uniform(n_items, dim, &mut rng),
        }
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn scores(&self, u: usize) -> Vec<f64> {
        let pu = self.users.row(u);
        (0..self.items.rows())
            .map(|i| crate::numeric::dot(pu, self.items.row(i)))
            .collect()
    }

    /// Top-`k` items by inner product, skipping the sorted `exclude` list.
    pub fn recommend(&self, u: usize, k: usize, exclude: &[usize]) -> Vec<(usize, f64)> {
        top_k(&self.scores(u), k, exclude)
    }

    pub fn evaluate(&self, dataset: &InteractionDataset, split: Split, k: usize) -> MetricReport {
        let recs: Vec<Vec<usize>> = (0..dataset.n_users())
            .map(|u| {
                if dataset.items_in(u, split).is_empty() {
                    return Vec::new();
                }
                self.recommend(u, k, dataset.train_items(u))
                    .into_iter()
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        MetricReport::collect(
            k,
            (0..dataset.n_users()).map(|u| (u, recs[u].as_slice(), dataset.items_in(u, split))),
        )
    }
}

/// Per-triple SGD on the BPR objective with validation early stopping.
pub fn mf_train(dataset: &InteractionDataset, cfg: &MfTrainConfig) -> MfModel {
    let mut model = MfModel::random(dataset.n_users(), dataset.n_items(), cfg.dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d66);
    let mut pairs = dataset.train_pairs();
    let n_items = dataset.n_items();
    let has_valid = (0..dataset.n_users()).any(|u| !dataset.valid_items(u).is_empty());
    let mut best = (f64::NEG_INFINITY, model.clone());
    let mut stale = 0;
    let d = cfg.dim;
    for _epoch in 0..cfg.max_epochs {
        pairs.shuffle(&mut rng);
        for &(u, i) in &pairs {
            let train = dataset.train_items(u);
            if train.len() >= n_items {
                continue;
            }
            let j = loop {
                let j = rng.random_range(0..n_items);
                if train.binary_search(&j).is_err() {
                    break j;
                }
            };
            let (pu, qi, qj) = (model.users.row(u).to_vec(), model.items.row(i).to_vec(), model.items.row(j).to_vec());
            let x: f64 = (0..d).map(|c| pu[c] * (qi[c] - qj[c])).sum();
            let g = sigmoid(-x);
            {
                let p = model.users.row_mut(u);
                for c in 0..d {
                    p[c] += cfg.lr * (g * (qi[c] - qj[c]) - cfg.l2 * pu[c]);
                }
            }
            {
                let q = model.items.row_mut(i);
                for c in 0..d {
                    q[c] += cfg.lr * (g * pu[c] - cfg.l2 * qi[c]);
                }
            }
            {
                let q = model.items.row_mut(j);
                for c in 0..d {
                    q[c] += cfg.lr * (-g * pu[c] - cfg.l2 * qj[c]);
                }
            }
        }
        if !has_valid {
            continue;
        }
        let recall = model.evaluate(dataset, Split::Valid, cfg.k).recall;
        if recall > best.0 {
            best = (recall, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if has_valid {
        best.1
    } else {
        model
    }
}
