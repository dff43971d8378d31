//! Per-user inference timing for the factorisation baseline and the
//! generative recommender over nested catalog subsets.

use std::fmt::{self, Write as _};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::top_k;
use crate::generation::beam_search;
use crate::numeric::{dot, xavier_uniform, Tensor};
use crate::rec_id::{RecId, RecIdError, RecIdRegistry, Vocabulary};
use crate::recommender::{embed_input, RecError, Transformer, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Paradigm {
    Mf,
    Generative,
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::Mf => "mf",
            Paradigm::Generative => "generative",
        })
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    /// Catalog size at scale 1.
    pub base_items: usize,
    /// Scale denominators; `16` means `base_items / 16`.
    pub scales: Vec<usize>,
    /// Users timed per batch.
    pub users: usize,
    /// Timed batches per cell (median taken); 0 produces an empty table.
    pub repetitions: usize,
    pub k: usize,
    pub beam_width: usize,
    pub history_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            base_items: 1 << 18,
            scales: vec![16, 8, 4, 2, 1],
            users: 16,
            repetitions: 5,
            k: 10,
            beam_width: 10,
            history_len: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub model: Paradigm,
    pub scale: usize,
    pub items: usize,
    /// Median over batches of the batch's mean per-user time.
    pub median_us: f64,
    /// Mean and standard deviation over every timed user.
    pub mean_us: f64,
    pub std_us: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, model: Paradigm, items: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model && r.items == items)
    }

    fn series(&self, model: Paradigm) -> Vec<&BenchRow> {
        let mut rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.model == model).collect();
        rows.sort_by_key(|r| r.items);
        rows
    }

    /// Median time at the largest catalog over the smallest.
    pub fn growth(&self, model: Paradigm) -> Option<f64> {
        let s = self.series(model);
        Some(s.last()?.median_us / s.first()?.median_us)
    }

    /// Largest over smallest median across all scales.
    pub fn spread(&self, model: Paradigm) -> Option<f64> {
        let s = self.series(model);
        let max = s.iter().map(|r| r.median_us).fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))))?;
        let min = s.iter().map(|r| r.median_us).fold(f64::INFINITY, f64::min);
        Some(max / min)
    }

    /// Smallest catalog at which the generative model is faster than MF.
    pub fn crossover(&self) -> Option<usize> {
        self.series(Paradigm::Mf)
            .into_iter()
            .find(|mf| self.get(Paradigm::Generative, mf.items).is_some_and(|g| g.median_us < mf.median_us))
            .map(|r| r.items)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,scale,items,median_us,mean_us,std_us\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},1/{},{},{:.3},{:.3},{:.3}",
                r.model, r.scale, r.items, r.median_us, r.mean_us, r.std_us
            );
        }
        s
    }
}

impl fmt::Display for BenchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<11} {:>6} {:>9} {:>12} {:>12} {:>12}",
            "model", "scale", "items", "median_us", "mean_us", "std_us"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<11} {:>6} {:>9} {:>12.1} {:>12.1} {:>12.1}",
                r.model.to_string(),
                format!("1/{}", r.scale),
                r.items,
                r.median_us,
                r.mean_us,
                r.std_us
            )?;
        }
        Ok(())
    }
}

/// Models and data shared by every catalog scale. Items of the scale-`1/s`
/// catalog are the first `base_items / s` entries of `order`, so catalogs
/// are nested.
pub struct BenchSetup {
    pub transformer: Transformer,
    pub vocab: Vocabulary,
    pub rec_ids: Vec<RecId>,
    pub item_reps: Tensor,
    pub mf_items: Tensor,
    pub users: Tensor,
    pub order: Vec<usize>,
}

/// Random Rec-IDs for `n` items under a vocabulary sized to hold the
/// largest semantic group.
pub fn random_rec_ids(n: usize, levels: usize, codebook_size: usize, rng: &mut ChaCha8Rng) -> (Vec<RecId>, Vocabulary) {
    let mut groups = std::collections::HashMap::<Vec<usize>, usize>::new();
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let semantic: Vec<usize> = (0..levels).map(|_| rng.random_range(0..codebook_size)).collect();
        let slot = groups.entry(semantic.clone()).or_insert(0);
        *slot += 1;
        ids.push(RecId {
            semantic,
            popularity: *slot,
        });
    }
    let max_group = groups.values().copied().max().unwrap_or(1);
    (ids, Vocabulary::new(levels, codebook_size, max_group))
}

impl BenchSetup {
    /// Randomly initialised models; timing depends on shapes, not weights.
    pub fn random(cfg: &BenchConfig, tf: TransformerConfig, levels: usize, codebook_size: usize) -> Result<Self, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (rec_ids, vocab) = random_rec_ids(cfg.base_items, levels, codebook_size, &mut rng);
        let tf = TransformerConfig {
            vocab_size: vocab.size(),
            id_len: vocab.id_len(),
            ..tf
        };
        let dim = tf.dim;
        let transformer = Transformer::new(tf, &mut rng)?;
        let item_reps = xavier_uniform(cfg.base_items, dim, &mut rng);
        let mf_items = xavier_uniform(cfg.base_items, dim, &mut rng);
        let users = xavier_uniform(cfg.users, dim, &mut rng);
        let mut order: Vec<usize> = (0..cfg.base_items).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            transformer,
            vocab,
            rec_ids,
            item_reps,
            mf_items,
            users,
            order,
        })
    }

    pub fn catalog(&self, scale: usize) -> &[usize] {
        &self.order[..(self.order.len() / scale).max(1)]
    }

    /// Registry over the scale's catalog, renumbered `0..n` in catalog order.
    pub fn registry(&self, scale: usize) -> Result<RecIdRegistry, RecIdError> {
        let ids = self.catalog(scale).iter().map(|&i| self.rec_ids[i].clone()).collect();
        RecIdRegistry::from_ids(ids, self.vocab)
    }
}

fn summarize(model: Paradigm, scale: usize, items: usize, batches: &[Vec<f64>]) -> BenchRow {
    let mut means: Vec<f64> = batches.iter().map(|b| b.iter().sum::<f64>() / b.len() as f64).collect();
    means.sort_by(f64::total_cmp);
    let all: Vec<f64> = batches.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    BenchRow {
        model,
        scale,
        items,
        median_us: means[means.len() / 2],
        mean_us: mean,
        std_us: var.sqrt(),
    }
}

fn time_us<F: FnOnce() -> Result<(), RecError>>(run: F) -> Result<f64, RecError> {
    let start = Instant::now();
    run()?;
    Ok(start.elapsed().as_secs_f64() * 1e6)
}

struct ScaleData {
    scale: usize,
    mf_items: Tensor,
    reps: Tensor,
    registry: RecIdRegistry,
    histories: Vec<Vec<usize>>,
}

/// Times top-`k` retrieval per user on one thread. MF scores every catalog
/// item; the generative model encodes the user's history and runs
/// constrained beam search of fixed width. Histories are drawn from the
/// scale's catalog and no items are excluded. After one warm-up pass, each
/// repetition times every user at every scale in turn, so that bursts of
/// machine load hit all scales alike.
pub fn bench_inference(setup: &BenchSetup, cfg: &BenchConfig) -> Result<BenchTable, RecError> {
    let mut table = BenchTable::default();
    if cfg.repetitions == 0 || cfg.users == 0 {
        return Ok(table);
    }
    let mut scales = Vec::with_capacity(cfg.scales.len());
    for &scale in &cfg.scales {
        let catalog = setup.catalog(scale);
        let n = catalog.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ scale as u64);
        let histories = (0..cfg.users)
            .map(|_| {
                let mut h = index::sample(&mut rng, n, cfg.history_len.min(n)).into_vec();
                h.sort_unstable();
                h
            })
            .collect();
        scales.push(ScaleData {
            scale,
            mf_items: setup.mf_items.gather_rows(catalog),
            reps: setup.item_reps.gather_rows(catalog),
            registry: setup.registry(scale).map_err(|_| RecError::UnknownRecId(Vec::new()))?,
            histories,
        });
    }

    let max_len = setup.transformer.config().max_len;
    let mf = |s: &ScaleData, u: usize| -> Result<(), RecError> {
        let pu = setup.users.row(u);
        let scores: Vec<f64> = (0..s.mf_items.rows()).map(|i| dot(pu, s.mf_items.row(i))).collect();
        std::hint::black_box(top_k(&scores, cfg.k, &[]));
        Ok(())
    };
    let gen = |s: &ScaleData, u: usize| -> Result<(), RecError> {
        let mut sub = ChaCha8Rng::seed_from_u64(u as u64);
        let seq = embed_input(u, &s.histories[u], &s.reps, max_len, &mut sub)?;
        let memory = setup.transformer.memory(&seq, setup.users.row(u))?;
        std::hint::black_box(beam_search(
            &setup.transformer,
            &memory,
            &s.registry,
            cfg.k,
            cfg.beam_width,
            &[],
        )?);
        Ok(())
    };

    // batches[scale][paradigm][repetition] -> per-user times
    let mut batches = vec![[Vec::new(), Vec::new()]; scales.len()];
    for rep in 0..=cfg.repetitions {
        let mut round = vec![[Vec::with_capacity(cfg.users), Vec::with_capacity(cfg.users)]; scales.len()];
        for u in 0..cfg.users {
            for (s, slot) in scales.iter().zip(round.iter_mut()) {
                slot[0].push(time_us(|| mf(s, u))?);
                slot[1].push(time_us(|| gen(s, u))?);
            }
        }
        if rep > 0 {
            for (slot, [a, b]) in batches.iter_mut().zip(round) {
                slot[0].push(a);
                slot[1].push(b);
            }
        }
    }
    for (s, [a, b]) in scales.iter().zip(&batches) {
        let n = s.mf_items.rows();
        table.rows.push(summarize(Paradigm::Mf, s.scale, n, a));
        table.rows.push(summarize(Paradigm::Generative, s.scale, n, b));
    }
    Ok(table)
}

/// `K·H·(M³ + M²·D)` for `H` layers, the per-user generative cost term that
/// the catalog size has to dominate before MF becomes the slower paradigm.
pub fn generative_cost_term(k: usize, layers: usize, id_len: usize, dim: usize) -> usize {
    k * layers * (id_len.pow(3) + id_len.pow(2) * dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommender::PosEncoding;

    fn small() -> (BenchConfig, BenchSetup) {
        let cfg = BenchConfig {
            base_items: 256,
            scales: vec![4, 2, 1],
            users: 3,
            repetitions: 3,
            k: 5,
            beam_width: 5,
            history_len: 4,
            seed: 9,
        };
        let tf = TransformerConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            ff_mult: 2,
            max_len: 4,
            vocab_size: 0,
            id_len: 0,
            pos: PosEncoding::Relation,
        };
        let setup = BenchSetup::random(&cfg, tf, 2, 8).unwrap();
        (cfg, setup)
    }

    #[test]
    fn zero_repetitions_give_empty_table() {
        let (mut cfg, setup) = small();
        cfg.repetitions = 0;
        let t = bench_inference(&setup, &cfg).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.to_csv().lines().count(), 1);
    }

    #[test]
    fn one_row_per_model_and_scale() {
        let (cfg, setup) = small();
        let t = bench_inference(&setup, &cfg).unwrap();
        assert_eq!(t.rows.len(), 6);
        for items in [64, 128, 256] {
            for m in [Paradigm::Mf, Paradigm::Generative] {
                let r = t.get(m, items).unwrap();
                assert!(r.median_us > 0.0 && r.std_us >= 0.0);
            }
        }
        assert_eq!(t.to_csv().lines().count(), 7);
        assert_eq!(t.to_string().lines().count(), 7);
    }

    #[test]
    fn catalogs_are_nested_with_valid_registries() {
        let (_, setup) = small();
        let a = setup.catalog(4);
        let b = setup.catalog(1);
        assert_eq!(&b[..a.len()], a);
        for s in [4, 2, 1] {
            let reg = setup.registry(s).unwrap();
            assert_eq!(reg.n_items(), 256 / s);
            assert_eq!(reg.vocab(), &setup.vocab);
        }
    }

    #[test]
    fn random_ids_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ids, vocab) = random_rec_ids(500, 2, 4, &mut rng);
        assert!(vocab.max_group >= 500 / 16);
        let reg = RecIdRegistry::from_ids(ids, vocab).unwrap();
        assert_eq!(reg.n_items(), 500);
    }

    #[test]
    fn table_summaries() {
        let row = |model, items, median_us| BenchRow {
            model,
            scale: 1,
            items,
            median_us,
            mean_us: median_us,
            std_us: 0.0,
        };
        let t = BenchTable {
            rows: vec![
                row(Paradigm::Mf, 10, 1.0),
                row(Paradigm::Generative, 10, 5.0),
                row(Paradigm::Mf, 20, 2.0),
                row(Paradigm::Generative, 20, 4.0),
                row(Paradigm::Mf, 40, 8.0),
                row(Paradigm::Generative, 40, 6.0),
            ],
        };
        assert_eq!(t.growth(Paradigm::Mf), Some(8.0));
        assert_eq!(t.spread(Paradigm::Generative), Some(1.5));
        assert_eq!(t.crossover(), Some(40));
        assert_eq!(generative_cost_term(10, 2, 4, 64), 20 * (64 + 16 * 64));
    }
}
