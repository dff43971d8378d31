//! Interaction logs, modality features, splits and the user-item graph.
//!
//! Interaction files hold one `user_id<TAB>item_id` pair per line. Raw ids
//! are remapped to dense 0-based indices in order of first appearance unless
//! an id list (`users.tsv` / `items.tsv`, one raw id per line) sits next to
//! the interaction file, in which case that order is used.
//!
//! Feature matrices are raw little-endian `f32` files accompanied by a text
//! descriptor `<file>.hdr` whose first line is `I D`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gumbel, StandardNormal};
use thiserror::Error;

use crate::numeric::{SparseRows, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line `{content}` (expected `user<TAB>item`)")]
    Malformed {
        path: PathBuf,
        line: usize,
        content: String,
    },
    #[error("duplicate interactions: {}", fmt_pairs(.0))]
    Duplicate(Vec<(String, String)>),
    #[error("unknown {kind} id `{id}` at line {line}")]
    UnknownId {
        kind: &'static str,
        id: String,
        line: usize,
    },
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("{modality} features have {found} rows, expected {expected}")]
    FeatureRows {
        modality: Modality,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {reason}")]
    BadFeatureFile { path: PathBuf, reason: String },
    #[error("no modality features present")]
    NoModality,
    #[error("dataset has no interactions")]
    Empty,
    #[error("invalid synthetic configuration: {0}")]
    Synth(String),
}

fn fmt_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(u, i)| format!("({u}, {i})"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub split: Split,
}

/// Users with fewer interactions than this keep all of them in training.
pub const MIN_SPLIT_INTERACTIONS: usize = 3;

/// Validated interaction log with an 80/10/10 per-user split.
#[derive(Clone, Debug)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    interactions: Vec<Interaction>,
    popularity: Vec<u32>,
    train: Vec<Vec<usize>>,
    valid: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Builds a dataset from dense `(user, item)` pairs and assigns splits
    /// with a seeded shuffle of every user's interactions.
    pub fn from_pairs(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        pairs: &[(usize, usize)],
        seed: u64,
    ) -> Result<Self, DataError> {
        if pairs.is_empty() {
            return Err(DataError::Empty);
        }
        let (nu, ni) = (user_ids.len(), item_ids.len());
        let mut seen = HashSet::with_capacity(pairs.len());
        let mut dups = Vec::new();
        let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); nu];
        for &(u, i) in pairs {
            if u >= nu || i >= ni {
                return Err(DataError::OutOfRange(format!(
                    "pair ({u}, {i}) with {nu} users and {ni} items"
                )));
            }
            if !seen.insert((u, i)) {
                dups.push((user_ids[u].clone(), item_ids[i].clone()));
                continue;
            }
            per_user[u].push(i);
        }
        if !dups.is_empty() {
            return Err(DataError::Duplicate(dups));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut interactions = Vec::with_capacity(pairs.len());
        let (mut train, mut valid, mut test) =
            (vec![Vec::new(); nu], vec![Vec::new(); nu], vec![Vec::new(); nu]);
        let mut popularity = vec![0u32; ni];
        for (u, items) in per_user.iter().enumerate() {
            // sorted first so the split depends only on the set of pairs
            let mut items = items.clone();
            items.sort_unstable();
            items.shuffle(&mut rng);
            let (n_valid, n_test) = split_sizes(items.len());
            for (k, &i) in items.iter().enumerate() {
                let split = if k < n_test {
                    Split::Test
                } else if k < n_test + n_valid {
                    Split::Valid
                } else {
                    Split::Train
                };
                match split {
                    Split::Train => {
                        train[u].push(i);
                        popularity[i] += 1;
                    }
                    Split::Valid => valid[u].push(i),
                    Split::Test => test[u].push(i),
                }
                interactions.push(Interaction { user: u, item: i, split });
            }
        }
        for lists in [&mut train, &mut valid, &mut test] {
            lists.iter_mut().for_each(|l| l.sort_unstable());
        }
        Ok(Self {
            user_ids,
            item_ids,
            interactions,
            popularity,
            train,
            valid,
            test,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_id(&self, u: usize) -> &str {
        &self.user_ids[u]
    }

    pub fn item_id(&self, i: usize) -> &str {
        &self.item_ids[i]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    /// Training interaction count per item.
    pub fn popularity(&self) -> &[u32] {
        &self.popularity
    }

    pub fn train_items(&self, u: usize) -> &[usize] {
        &self.train[u]
    }

    pub fn valid_items(&self, u: usize) -> &[usize] {
        &self.valid[u]
    }

    pub fn test_items(&self, u: usize) -> &[usize] {
        &self.test[u]
    }

    pub fn items_in(&self, u: usize, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train[u],
            Split::Valid => &self.valid[u],
            Split::Test => &self.test[u],
        }
    }

    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.interactions
            .iter()
            .filter(|x| x.split == Split::Train)
            .map(|x| (x.user, x.item))
            .collect()
    }

    pub fn stats(&self) -> DatasetStats {
        let count = |s: Split| self.interactions.iter().filter(|x| x.split == s).count();
        DatasetStats {
            users: self.n_users(),
            items: self.n_items(),
            interactions: self.interactions.len(),
            train: count(Split::Train),
            valid: count(Split::Valid),
            test: count(Split::Test),
            density: self.interactions.len() as f64 / (self.n_users() * self.n_items()) as f64,
        }
    }

    /// Writes the interaction log plus `users.tsv` / `items.tsv` id lists.
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
        for x in &self.interactions {
            writeln!(w, "{}\t{}", self.user_ids[x.user], self.item_ids[x.item]).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
        write_id_list(&dir.join("users.tsv"), &self.user_ids)?;
        write_id_list(&dir.join("items.tsv"), &self.item_ids)?;
        Ok(())
    }
}

/// `(valid, test)` counts for a user with `n` interactions.
fn split_sizes(n: usize) -> (usize, usize) {
    if n < MIN_SPLIT_INTERACTIONS {
        return (0, 0);
    }
    let tenth = ((n as f64) * 0.1).round() as usize;
    (tenth.max(1), tenth.max(1))
}

fn write_id_list(path: &Path, ids: &[String]) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for id in ids {
        writeln!(w, "{id}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_id_list(path: &Path) -> Result<Option<Vec<String>>, DataError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Some(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub density: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users={}", self.users)?;
        writeln!(f, "items={}", self.items)?;
        writeln!(f, "interactions={}", self.interactions)?;
        writeln!(f, "train={}", self.train)?;
        writeln!(f, "valid={}", self.valid)?;
        writeln!(f, "test={}", self.test)?;
        writeln!(f, "density={:.6}", self.density)
    }
}

struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    fixed: bool,
}

impl IdMap {
    fn new(fixed: Option<Vec<String>>) -> Self {
        match fixed {
            Some(ids) => {
                let index = ids.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();
                Self { ids, index, fixed: true }
            }
            None => Self {
                ids: Vec::new(),
                index: HashMap::new(),
                fixed: false,
            },
        }
    }

    fn lookup(&mut self, id: &str) -> Option<usize> {
        if let Some(&k) = self.index.get(id) {
            return Some(k);
        }
        if self.fixed {
            return None;
        }
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), self.ids.len() - 1);
        Some(self.ids.len() - 1)
    }
}

/// Reads a tab-separated interaction log and assigns seeded splits.
pub fn load_interactions(path: &Path, seed: u64) -> Result<InteractionDataset, DataError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut users = IdMap::new(read_id_list(&dir.join("users.tsv"))?);
    let mut items = IdMap::new(read_id_list(&dir.join("items.tsv"))?);
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let (Some(u), Some(i), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: k + 1,
                content: trimmed.to_string(),
            });
        };
        let (u, i) = (u.trim(), i.trim());
        if u.is_empty() || i.is_empty() {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: k + 1,
                content: trimmed.to_string(),
            });
        }
        let uu = users.lookup(u).ok_or_else(|| DataError::UnknownId {
            kind: "user",
            id: u.to_string(),
            line: k + 1,
        })?;
        let ii = items.lookup(i).ok_or_else(|| DataError::UnknownId {
            kind: "item",
            id: i.to_string(),
            line: k + 1,
        })?;
        pairs.push((uu, ii));
    }
    InteractionDataset::from_pairs(users.ids, items.ids, &pairs, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Acoustic,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Acoustic, Modality::Textual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
            Modality::Textual => "textual",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-modality item feature matrices; absent modalities are `None`.
#[derive(Clone, Debug)]
pub struct ItemFeatureBank {
    n_items: usize,
    features: [Option<Tensor>; 3],
}

impl ItemFeatureBank {
    pub fn new(n_items: usize, features: [Option<Tensor>; 3]) -> Result<Self, DataError> {
        if features.iter().all(Option::is_none) {
            return Err(DataError::NoModality);
        }
        for m in Modality::ALL {
            if let Some(t) = &features[m.index()] {
                if t.rows() != n_items {
                    return Err(DataError::FeatureRows {
                        modality: m,
                        expected: n_items,
                        found: t.rows(),
                    });
                }
            }
        }
        Ok(Self { n_items, features })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn get(&self, m: Modality) -> Option<&Tensor> {
        self.features[m.index()].as_ref()
    }

    pub fn is_present(&self, m: Modality) -> bool {
        self.features[m.index()].is_some()
    }

    /// Summed width of the present modalities.
    pub fn total_dim(&self) -> usize {
        self.features.iter().flatten().map(Tensor::cols).sum()
    }

    /// Present modalities concatenated column-wise in visual, acoustic,
    /// textual order.
    pub fn concatenated(&self) -> Tensor {
        let parts: Vec<&Tensor> = self.features.iter().flatten().collect();
        Tensor::concat_cols(&parts).expect("row counts validated at construction")
    }

    /// Restricts the bank to the given item rows.
    pub fn subset(&self, items: &[usize]) -> ItemFeatureBank {
        let features = self
            .features
            .clone()
            .map(|f| f.map(|t| t.gather_rows(items)));
        ItemFeatureBank {
            n_items: items.len(),
            features,
        }
    }

    /// Writes `<dir>/<modality>.f32` plus descriptor for present modalities.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        for m in Modality::ALL {
            if let Some(t) = self.get(m) {
                write_feature_file(&feature_path(dir, m), t)?;
            }
        }
        Ok(())
    }
}

pub fn feature_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("{}.f32", m.name()))
}

fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let hdr = header_path(path);
    fs::write(&hdr, format!("{} {}\n", t.rows(), t.cols())).map_err(io_err(&hdr))
}

fn read_feature_file(path: &Path) -> Result<Tensor, DataError> {
    let hdr = header_path(path);
    let text = fs::read_to_string(&hdr).map_err(io_err(&hdr))?;
    let bad = |reason: String| DataError::BadFeatureFile {
        path: hdr.clone(),
        reason,
    };
    let first = text.lines().next().ok_or_else(|| bad("empty descriptor".into()))?;
    let dims: Vec<usize> = first
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| bad(format!("bad header `{first}`: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(bad(format!("expected `I D`, found `{first}`")));
    };
    if rows == 0 || cols == 0 {
        return Err(bad(format!("degenerate shape {rows}x{cols}")));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != rows * cols * 4 {
        return Err(DataError::BadFeatureFile {
            path: path.to_path_buf(),
            reason: format!("{} bytes, header says {rows}x{cols} f32", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::matrix(rows, cols, data))
}

/// Loads per-modality features; a missing file marks that modality absent.
pub fn load_features(paths: [Option<&Path>; 3], n_items: usize) -> Result<ItemFeatureBank, DataError> {
    let mut features: [Option<Tensor>; 3] = [None, None, None];
    for (slot, path) in features.iter_mut().zip(paths) {
        if let Some(p) = path {
            if p.exists() {
                *slot = Some(read_feature_file(p)?);
            }
        }
    }
    ItemFeatureBank::new(n_items, features)
}

/// Loads `<dir>/{visual,acoustic,textual}.f32`.
pub fn load_features_dir(dir: &Path, n_items: usize) -> Result<ItemFeatureBank, DataError> {
    let paths = Modality::ALL.map(|m| feature_path(dir, m));
    load_features(
        [Some(paths[0].as_path()), Some(paths[1].as_path()), Some(paths[2].as_path())],
        n_items,
    )
}

/// Parameters of the latent-factor generator behind [`synth_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub density: f64,
    /// Width of each modality; `None` leaves it out.
    pub dims: [Option<usize>; 3],
    /// Number of latent clusters, also the factor rank.
    pub rank: usize,
    /// Scale of factor, selection and feature noise.
    pub noise: f64,
    /// Weight of a per-item popularity propensity in `[0, 1)`.
    pub pop_weight: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 400,
            density: 0.05,
            dims: [Some(64), Some(32), Some(32)],
            rank: 8,
            noise: 0.3,
            pop_weight: 0.5,
            seed: 0,
        }
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    pub item_cluster: Vec<usize>,
    pub user_cluster: Vec<usize>,
}

/// Samples interactions from a low-rank preference model and features as
/// noisy projections of the item factors.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(InteractionDataset, ItemFeatureBank, SynthTruth), DataError> {
    let SynthSpec {
        users,
        items,
        density,
        rank,
        noise,
        pop_weight,
        seed,
        ..
    } = *spec;
    if users == 0 || items == 0 || rank == 0 {
        return Err(DataError::Synth("users, items and rank must be positive".into()));
    }
    if !(density > 0.0 && density <= 1.0) || density * ((users * items) as f64) < (users as f64) {
        return Err(DataError::Synth(format!(
            "density {density} gives fewer than one interaction per user"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let item_cluster: Vec<usize> = (0..items).map(|_| rng.random_range(0..rank)).collect();
    let user_cluster: Vec<usize> = (0..users).map(|_| rng.random_range(0..rank)).collect();
    let factors = |clusters: &[usize], rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        clusters
            .iter()
            .map(|&c| {
                (0..rank)
                    .map(|k| if k == c { 1.0 } else { 0.0 } + noise * normal(rng))
                    .collect()
            })
            .collect()
    };
    let q = factors(&item_cluster, &mut rng);
    let p = factors(&user_cluster, &mut rng);
    let propensity: Vec<f64> = (0..items).map(|_| rng.random::<f64>().powi(2)).collect();

    let counts = Binomial::new(items as u64, density).map_err(|e| DataError::Synth(e.to_string()))?;
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let mut pairs = Vec::new();
    for u in 0..users {
        let n = (counts.sample(&mut rng) as usize).clamp(1, items);
        let mut order: Vec<usize> = (0..items).collect();
        order.shuffle(&mut rng);
        let mut scored: Vec<(f64, usize)> = order
            .into_iter()
            .map(|i| {
                let s: f64 = p[u].iter().zip(&q[i]).map(|(a, b)| a * b).sum();
                let g: f64 = gumbel.sample(&mut rng);
                (s + pop_weight * propensity[i] + noise * g, i)
            })
            .collect();
        // stable sort keeps the shuffled order among exact ties
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        pairs.extend(scored[..n].iter().map(|&(_, i)| (u, i)));
    }

    let mut features: [Option<Tensor>; 3] = [None, None, None];
    for (slot, dim) in features.iter_mut().zip(spec.dims) {
        let Some(d) = dim else { continue };
        let proj: Vec<f64> = (0..rank * d)
            .map(|_| normal(&mut rng) / (rank as f64).sqrt())
            .collect();
        let mut data = Vec::with_capacity(items * d);
        for qi in &q {
            for c in 0..d {
                let v: f64 = (0..rank).map(|k| qi[k] * proj[k * d + c]).sum();
                data.push(v + noise * normal(&mut rng));
            }
        }
        *slot = Some(Tensor::matrix(items, d, data));
    }

    let user_ids = (0..users).map(|u| u.to_string()).collect();
    let item_ids = (0..items).map(|i| i.to_string()).collect();
    let dataset = InteractionDataset::from_pairs(user_ids, item_ids, &pairs, seed)?;
    let bank = ItemFeatureBank::new(items, features)?;
    Ok((
        dataset,
        bank,
        SynthTruth {
            item_cluster,
            user_cluster,
        },
    ))
}

/// User-item bipartite graph over training interactions.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    user_items: Vec<Vec<usize>>,
    item_users: Vec<Vec<usize>>,
}

impl BipartiteGraph {
    pub fn build(dataset: &InteractionDataset) -> Self {
        let mut user_items = vec![Vec::new(); dataset.n_users()];
        let mut item_users = vec![Vec::new(); dataset.n_items()];
        for x in dataset.interactions().iter().filter(|x| x.split == Split::Train) {
            user_items[x.user].push(x.item);
            item_users[x.item].push(x.user);
        }
        user_items.iter_mut().for_each(|v| v.sort_unstable());
        item_users.iter_mut().for_each(|v| v.sort_unstable());
        Self { user_items, item_users }
    }

    pub fn n_users(&self) -> usize {
        self.user_items.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_users.len()
    }

    pub fn user_neighbors(&self, u: usize) -> &[usize] {
        &self.user_items[u]
    }

    pub fn item_neighbors(&self, i: usize) -> &[usize] {
        &self.item_users[i]
    }

    /// Row-normalised adjacency: item rows averaging over their users.
    pub fn item_mean_aggregator(&self) -> Rc<SparseRows> {
        Rc::new(mean_rows(&self.item_users, self.n_users()))
    }

    /// Row-normalised adjacency: user rows averaging over their items.
    pub fn user_mean_aggregator(&self) -> Rc<SparseRows> {
        Rc::new(mean_rows(&self.user_items, self.n_items()))
    }
}

fn mean_rows(adj: &[Vec<usize>], cols: usize) -> SparseRows {
    SparseRows {
        cols,
        rows: adj
            .iter()
            .map(|n| {
                let w = 1.0 / n.len().max(1) as f64;
                n.iter().map(|&c| (c, w)).collect()
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|k| format!("{prefix}{k}")).collect()
    }

    #[test]
    fn ten_by_ten_splits_eight_one_one() {
        let pairs: Vec<(usize, usize)> = (0..10).flat_map(|u| (0..10).map(move |i| (u, i))).collect();
        let ds = InteractionDataset::from_pairs(ids("u", 10), ids("i", 10), &pairs, 3).unwrap();
        for u in 0..10 {
            assert_eq!(ds.train_items(u).len(), 8);
            assert_eq!(ds.valid_items(u).len(), 1);
            assert_eq!(ds.test_items(u).len(), 1);
        }
    }

    #[test]
    fn sparse_users_stay_in_train() {
        let pairs = vec![(0, 0), (0, 1), (1, 2)];
        let ds = InteractionDataset::from_pairs(ids("u", 2), ids("i", 3), &pairs, 0).unwrap();
        assert_eq!(ds.train_items(0), &[0, 1]);
        assert!(ds.valid_items(0).is_empty() && ds.test_items(0).is_empty());
        assert_eq!(ds.train_items(1), &[2]);
    }

    #[test]
    fn three_interactions_split_one_each() {
        let pairs = vec![(0, 0), (0, 1), (0, 2)];
        let ds = InteractionDataset::from_pairs(ids("u", 1), ids("i", 3), &pairs, 0).unwrap();
        assert_eq!(
            (ds.train_items(0).len(), ds.valid_items(0).len(), ds.test_items(0).len()),
            (1, 1, 1)
        );
    }

    #[test]
    fn duplicates_are_reported() {
        let pairs = vec![(0, 0), (0, 1), (0, 0)];
        let err = InteractionDataset::from_pairs(ids("u", 1), ids("i", 2), &pairs, 0).unwrap_err();
        match err {
            DataError::Duplicate(d) => assert_eq!(d, vec![("u0".to_string(), "i0".to_string())]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn popularity_counts_training_edges() {
        let pairs: Vec<(usize, usize)> = (0..10).flat_map(|u| (0..10).map(move |i| (u, i))).collect();
        let ds = InteractionDataset::from_pairs(ids("u", 10), ids("i", 10), &pairs, 9).unwrap();
        let g = BipartiteGraph::build(&ds);
        for i in 0..10 {
            assert_eq!(g.item_neighbors(i).len() as u32, ds.popularity()[i]);
        }
        assert_eq!(ds.popularity().iter().sum::<u32>(), 80);
    }

    #[test]
    fn single_edge_graph() {
        let ds = InteractionDataset::from_pairs(ids("u", 1), ids("i", 1), &[(0, 0)], 0).unwrap();
        let g = BipartiteGraph::build(&ds);
        assert_eq!(g.user_neighbors(0), &[0]);
        assert_eq!(g.item_neighbors(0), &[0]);
    }

    #[test]
    fn test_edges_are_not_in_graph() {
        let pairs: Vec<(usize, usize)> = (0..10).map(|i| (0, i)).collect();
        let ds = InteractionDataset::from_pairs(ids("u", 1), ids("i", 10), &pairs, 5).unwrap();
        let g = BipartiteGraph::build(&ds);
        let t = ds.test_items(0)[0];
        assert!(!g.user_neighbors(0).contains(&t));
        assert!(g.item_neighbors(t).is_empty());
    }

    #[test]
    fn synth_noise_free_users_stay_in_cluster() {
        let spec = SynthSpec {
            users: 30,
            items: 200,
            density: 0.05,
            rank: 4,
            noise: 0.0,
            ..SynthSpec::default()
        };
        let (ds, _, truth) = synth_dataset(&spec).unwrap();
        for u in 0..ds.n_users() {
            let all: Vec<usize> = [Split::Train, Split::Valid, Split::Test]
                .iter()
                .flat_map(|&s| ds.items_in(u, s).to_vec())
                .collect();
            assert!(all.iter().all(|&i| truth.item_cluster[i] == truth.user_cluster[u]));
        }
    }

    #[test]
    fn synth_interaction_count_and_seeds() {
        let spec = SynthSpec {
            users: 100,
            items: 200,
            density: 0.05,
            ..SynthSpec::default()
        };
        let (a, bank, _) = synth_dataset(&spec).unwrap();
        let n = a.interactions().len() as f64;
        assert!((n - 1000.0).abs() < 150.0, "{n}");
        assert_eq!(bank.total_dim(), 128);
        let (b, _, _) = synth_dataset(&SynthSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(a.interactions(), b.interactions());
        let (c, _, _) = synth_dataset(&spec).unwrap();
        assert_eq!(a.interactions(), c.interactions());
    }

    #[test]
    fn synth_rejects_too_sparse() {
        let spec = SynthSpec {
            users: 10,
            items: 10,
            density: 0.05,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_dataset(&spec), Err(DataError::Synth(_))));
    }
}
