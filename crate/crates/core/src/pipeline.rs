//! Stage commands over a work directory of artifacts.
//!
//! | command       | reads                                         | writes                                  |
//! |---------------|-----------------------------------------------|-----------------------------------------|
//! | `synth`       |                                               | `interactions.tsv`, id lists, features  |
//! | `train-rqvae` | interactions, features                        | `encoder.ckpt`, `quantizer.ckpt`, `codes.txt`, `rqvae.log` |
//! | `assign-ids`  | interactions, `encoder.ckpt`, `quantizer.ckpt` | `rec_ids.txt`, `vocab.txt`, `collisions.txt` |
//! | `train-rec`   | interactions, `encoder.ckpt`, Rec-IDs         | `transformer.ckpt`, `train_rec.log`     |
//! | `recommend`   | all of the above                              | `recommendations.tsv`                   |
//! | `evaluate`    | all of the above                              | `metrics.txt`, `metrics.csv`            |
//! | `bench`       |                                               | `bench.txt`, `bench.csv`                |
//! | `ablate`      | interactions, features                        | `ablation.txt`, `ablation.csv`          |
//!
//! Every command also writes `<command>.config`, the resolved configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{Config, ConfigError};
use crate::data::{load_features_dir, load_interactions, synth_dataset, DataError, InteractionDataset, ItemFeatureBank, Split, SynthSpec};
use crate::eval::bench::{bench_inference, BenchConfig, BenchSetup};
use crate::eval::mf::mf_train;
use crate::eval::{MetricReport, MfTrainConfig, PopularityRanker};
use crate::graph_encoder::{evaluate_reps, GraphEncoder, Representations};
use crate::numeric::NumericError;
use crate::rec_id::{CollisionStats, RecIdError, RecIdRegistry, TokenVariant, Vocabulary};
use crate::recommender::{self, PosEncoding, RecError, RecTrainConfig, Transformer, TransformerConfig};
use crate::rq_vae::{train_joint, JointConfig, Quantizer, QuantizerConfig};
use crate::training::TrainError;

pub const INTERACTIONS: &str = "interactions.tsv";
pub const FEATURES: &str = "features";
pub const ENCODER: &str = "encoder.ckpt";
pub const QUANTIZER: &str = "quantizer.ckpt";
pub const CODES: &str = "codes.txt";
pub const REC_IDS: &str = "rec_ids.txt";
pub const VOCAB: &str = "vocab.txt";
pub const TRANSFORMER: &str = "transformer.ckpt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("missing {artifact}; run `genrec {command}` first")]
    Missing { artifact: String, command: &'static str },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    RecId(#[from] RecIdError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Rec(#[from] RecError),
}

impl PipelineError {
    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) => 1,
            PipelineError::Train(TrainError::Numeric(_) | TrainError::Diverged { .. })
            | PipelineError::Numeric(_)
            | PipelineError::Rec(RecError::Numeric(_)) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Artifact paths under one directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, command: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::Missing {
                artifact: name.to_string(),
                command,
            })
        }
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).map_err(io_err(&p))
    }

    fn snapshot(&self, command: &str, cfg: &Config) -> Result<()> {
        self.write(&format!("{command}.config"), &cfg.serialize())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Everything a later stage needs, loaded from disk.
pub struct Loaded {
    pub dataset: InteractionDataset,
    pub reps: Representations,
    pub registry: RecIdRegistry,
    pub transformer: Transformer,
}

pub fn load_dataset(ws: &Workspace, cfg: &Config) -> Result<InteractionDataset> {
    Ok(load_interactions(&ws.require(INTERACTIONS, "synth")?, cfg.seed)?)
}

fn load_bank(ws: &Workspace, dataset: &InteractionDataset) -> Result<ItemFeatureBank> {
    let dir = ws.require(FEATURES, "synth")?;
    Ok(load_features_dir(&dir, dataset.n_items())?)
}

pub fn synth_spec(cfg: &Config) -> SynthSpec {
    SynthSpec {
        users: cfg.synth_users,
        items: cfg.synth_items,
        density: cfg.synth_density,
        rank: cfg.synth_rank,
        noise: cfg.synth_noise,
        seed: cfg.seed,
        ..SynthSpec::default()
    }
}

/// Writes a synthetic dataset and returns its statistics report.
pub fn synth(ws: &Workspace, cfg: &Config) -> Result<String> {
    ws.snapshot("synth", cfg)?;
    let (dataset, bank, _) = synth_dataset(&synth_spec(cfg))?;
    dataset.write(&ws.path(INTERACTIONS))?;
    let dir = ws.path(FEATURES);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    bank.write(&dir)?;
    let report = format!("{}\n", load_dataset(ws, cfg)?.stats());
    ws.write("stats.txt", &report)?;
    Ok(report)
}

fn joint_config(cfg: &Config) -> JointConfig {
    JointConfig {
        optimizer: cfg.optimizer,
        lr: cfg.lr,
        l2: cfg.l2,
        batch_size: cfg.batch_size,
        max_epochs: cfg.epochs,
        patience: cfg.patience,
        k: cfg.k,
        seed: cfg.seed,
        reseed_dead_codes: cfg.reseed_dead_codes,
    }
}

pub fn quantizer_config(cfg: &Config) -> QuantizerConfig {
    QuantizerConfig {
        latent_dim: cfg.latent_dim,
        levels: cfg.id_len - 1,
        codebook_size: cfg.codebook_size,
        beta: cfg.beta,
    }
}

/// Graph encoder and quantizer trained jointly.
pub fn fit_quantizer(
    dataset: &InteractionDataset,
    bank: &ItemFeatureBank,
    cfg: &Config,
) -> Result<(GraphEncoder, Quantizer, Representations, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7271);
    let mut encoder = GraphEncoder::new(
        dataset.n_users(),
        dataset.n_items(),
        bank.total_dim(),
        cfg.dim,
        cfg.gcn_layers,
        &mut rng,
    );
    let mut quantizer = Quantizer::new(cfg.dim, &quantizer_config(cfg), &mut rng);
    let log = train_joint(dataset, bank, &mut encoder, &mut quantizer, &joint_config(cfg))?;
    let mut text = String::from("epoch\tbpr\trqvae\trecon\tcodebook\tcommit\treseeded\tvalid_recall\n");
    for e in &log.epochs {
        let _ = writeln!(
            text,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            e.epoch,
            e.bpr,
            e.rq.total,
            e.rq.recon,
            e.rq.codebook,
            e.rq.commit,
            e.reseeded,
            e.valid_recall.map_or("-".into(), |r| format!("{r:.6}"))
        );
    }
    if let Some(best) = log.best_epoch {
        let _ = writeln!(text, "# best epoch {best}");
    }
    let graph = crate::data::BipartiteGraph::build(dataset);
    let reps = encoder.encode_all(&crate::graph_encoder::GraphContext::new(bank, &graph))?;
    Ok((encoder, quantizer, reps, text))
}

pub fn train_rqvae(ws: &Workspace, cfg: &Config) -> Result<String> {
    ws.snapshot("train-rqvae", cfg)?;
    let dataset = load_dataset(ws, cfg)?;
    let bank = load_bank(ws, &dataset)?;
    let (encoder, quantizer, reps, log) = fit_quantizer(&dataset, &bank, cfg)?;
    let mut ck = Checkpoint::new("graph_encoder").with_store(&encoder.store);
    ck.tensors.push(("reps.users".into(), reps.users.clone()));
    ck.tensors.push(("reps.items".into(), reps.items.clone()));
    ck.save(&ws.path(ENCODER))?;
    let mut ck = Checkpoint::new("quantizer").with_store(&quantizer.store);
    ck.set_meta("beta", quantizer.beta);
    ck.save(&ws.path(QUANTIZER))?;
    let codes = quantizer.codes(&reps.items)?;
    let mut dump = String::new();
    for (i, c) in codes.iter().enumerate() {
        let tokens: Vec<String> = c.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(dump, "{} {}", dataset.item_id(i), tokens.join(" "));
    }
    ws.write(CODES, &dump)?;
    ws.write("rqvae.log", &log)?;
    let report = evaluate_reps(&reps, &dataset, Split::Test, cfg.k);
    Ok(format!("{log}graph encoder test {report}\n"))
}

pub fn load_reps(ws: &Workspace) -> Result<Representations> {
    let ck = Checkpoint::load(&ws.require(ENCODER, "train-rqvae")?)?;
    ck.expect_kind("graph_encoder")?;
    Ok(Representations {
        users: ck.tensor("reps.users")?.clone(),
        items: ck.tensor("reps.items")?.clone(),
    })
}

pub fn load_quantizer(ws: &Workspace) -> Result<Quantizer> {
    let ck = Checkpoint::load(&ws.require(QUANTIZER, "train-rqvae")?)?;
    ck.expect_kind("quantizer")?;
    let beta = ck.meta_parse("beta")?;
    Quantizer::from_store(ck.store("rq."), beta)
        .ok_or_else(|| CheckpointError::Malformed("quantizer parameters incomplete".into()).into())
}

pub fn vocabulary(cfg: &Config) -> Vocabulary {
    Vocabulary::new(cfg.id_len - 1, cfg.codebook_size, cfg.max_group)
}

/// Rec-IDs for every item from the quantizer's codewords.
pub fn build_registry(
    dataset: &InteractionDataset,
    quantizer: &Quantizer,
    reps: &Representations,
    vocab: Vocabulary,
    variant: TokenVariant,
    seed: u64,
) -> Result<RecIdRegistry> {
    let codes = quantizer.codes(&reps.items)?;
    Ok(RecIdRegistry::build(&codes, dataset.popularity(), vocab, variant, seed)?)
}

pub fn assign_ids(ws: &Workspace, cfg: &Config) -> Result<String> {
    ws.snapshot("assign-ids", cfg)?;
    let dataset = load_dataset(ws, cfg)?;
    let quantizer = load_quantizer(ws)?;
    let reps = load_reps(ws)?;
    if quantizer.levels() != cfg.id_len - 1 || quantizer.codebook_size() != cfg.codebook_size {
        return Err(PipelineError::Usage(format!(
            "quantizer has {} levels of {} codes but the config asks for id_len={} codebook_size={}; rerun train-rqvae",
            quantizer.levels(),
            quantizer.codebook_size(),
            cfg.id_len,
            cfg.codebook_size
        )));
    }
    let vocab = vocabulary(cfg);
    let registry = build_registry(&dataset, &quantizer, &reps, vocab, cfg.token_variant, cfg.seed)?;
    registry.write_table(&ws.path(REC_IDS), dataset.item_ids())?;
    ws.write(VOCAB, &format!("{} {} {}\n", vocab.levels, vocab.codebook_size, vocab.max_group))?;
    let report = format!("{}\n", registry.collision_stats());
    ws.write("collisions.txt", &report)?;
    Ok(report)
}

pub fn load_registry(ws: &Workspace, dataset: &InteractionDataset) -> Result<RecIdRegistry> {
    let vp = ws.require(VOCAB, "assign-ids")?;
    let text = fs::read_to_string(&vp).map_err(io_err(&vp))?;
    let nums: Vec<usize> = text.split_whitespace().filter_map(|s| s.parse().ok()).collect();
    let [levels, codebook_size, max_group] = nums[..] else {
        return Err(CheckpointError::Malformed(format!("{}: expected `levels L max_group`", vp.display())).into());
    };
    let vocab = Vocabulary::new(levels, codebook_size, max_group);
    Ok(RecIdRegistry::read_table(
        &ws.require(REC_IDS, "assign-ids")?,
        dataset.item_ids(),
        vocab,
    )?)
}

pub fn transformer_config(cfg: &Config, vocab: &Vocabulary) -> TransformerConfig {
    TransformerConfig {
        dim: cfg.dim,
        heads: cfg.heads,
        layers: cfg.layers,
        ff_mult: cfg.ff_mult,
        max_len: cfg.max_len,
        vocab_size: vocab.size(),
        id_len: vocab.id_len(),
        pos: cfg.pos_encoding,
    }
}

pub fn rec_train_config(cfg: &Config) -> RecTrainConfig {
    RecTrainConfig {
        optimizer: cfg.optimizer,
        lr: cfg.lr,
        l2: cfg.l2,
        batch_size: cfg.batch_size,
        max_epochs: cfg.epochs,
        patience: cfg.patience,
        k: cfg.k,
        seed: cfg.seed,
        validate: true,
    }
}

/// A Transformer trained on the given Rec-IDs, with its epoch log.
pub fn fit_transformer(
    dataset: &InteractionDataset,
    reps: &Representations,
    registry: &RecIdRegistry,
    cfg: &Config,
) -> Result<(Transformer, String)> {
    if reps.dim() != cfg.dim {
        return Err(PipelineError::Usage(format!(
            "representations have width {} but dim={}",
            reps.dim(),
            cfg.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7466);
    let mut model =
        Transformer::new(transformer_config(cfg, registry.vocab()), &mut rng).map_err(PipelineError::Usage)?;
    let log = recommender::train(&mut model, dataset, reps, registry, &rec_train_config(cfg))?;
    let mut text = String::new();
    for e in &log.epochs {
        let _ = writeln!(text, "{e}");
    }
    if let Some(best) = log.best_epoch {
        let _ = writeln!(text, "# best epoch {best}");
    }
    Ok((model, text))
}

fn save_transformer(model: &Transformer, path: &Path) -> Result<()> {
    let c = model.config();
    let mut ck = Checkpoint::new("transformer").with_store(&model.store);
    ck.set_meta("dim", c.dim);
    ck.set_meta("heads", c.heads);
    ck.set_meta("layers", c.layers);
    ck.set_meta("ff_mult", c.ff_mult);
    ck.set_meta("max_len", c.max_len);
    ck.set_meta("vocab_size", c.vocab_size);
    ck.set_meta("id_len", c.id_len);
    ck.set_meta("pos", c.pos);
    Ok(ck.save(path)?)
}

pub fn load_transformer(ws: &Workspace) -> Result<Transformer> {
    let ck = Checkpoint::load(&ws.require(TRANSFORMER, "train-rec")?)?;
    ck.expect_kind("transformer")?;
    let cfg = TransformerConfig {
        dim: ck.meta_parse("dim")?,
        heads: ck.meta_parse("heads")?,
        layers: ck.meta_parse("layers")?,
        ff_mult: ck.meta_parse("ff_mult")?,
        max_len: ck.meta_parse("max_len")?,
        vocab_size: ck.meta_parse("vocab_size")?,
        id_len: ck.meta_parse("id_len")?,
        pos: ck.meta_parse::<PosEncoding>("pos")?,
    };
    Transformer::from_store(cfg, ck.store("tf.")).map_err(|e| CheckpointError::Malformed(e).into())
}

pub fn train_rec(ws: &Workspace, cfg: &Config) -> Result<String> {
    ws.snapshot("train-rec", cfg)?;
    let dataset = load_dataset(ws, cfg)?;
    let reps = load_reps(ws)?;
    let registry = load_registry(ws, &dataset)?;
    let (model, log) = fit_transformer(&dataset, &reps, &registry, cfg)?;
    save_transformer(&model, &ws.path(TRANSFORMER))?;
    ws.write("train_rec.log", &log)?;
    Ok(log)
}

pub fn load_all(ws: &Workspace, cfg: &Config) -> Result<Loaded> {
    let dataset = load_dataset(ws, cfg)?;
    let reps = load_reps(ws)?;
    let registry = load_registry(ws, &dataset)?;
    let transformer = load_transformer(ws)?;
    Ok(Loaded {
        dataset,
        reps,
        registry,
        transformer,
    })
}

/// Top-K lists for the named users (all users when empty).
pub fn recommend(ws: &Workspace, cfg: &Config, users: &[String]) -> Result<String> {
    ws.snapshot("recommend", cfg)?;
    let loaded = load_all(ws, cfg)?;
    let Loaded {
        dataset,
        reps,
        registry,
        transformer: model,
    } = &loaded;
    let targets: Vec<usize> = if users.is_empty() {
        (0..dataset.n_users()).collect()
    } else {
        users
            .iter()
            .map(|u| {
                dataset
                    .user_ids()
                    .iter()
                    .position(|x| x == u)
                    .ok_or_else(|| PipelineError::Usage(format!("unknown user `{u}`")))
            })
            .collect::<Result<_>>()?
    };
    let mut out = String::new();
    for u in targets {
        if dataset.train_items(u).is_empty() {
            continue;
        }
        let recs = recommender::recommend(model, dataset, reps, registry, u, cfg.k, cfg.seed)?;
        let items: Vec<&str> = recs.iter().map(|&(i, _)| dataset.item_id(i)).collect();
        let _ = writeln!(out, "{}\t{}", dataset.user_id(u), items.join(","));
    }
    ws.write("recommendations.tsv", &out)?;
    Ok(out)
}

/// Named metric reports rendered as an aligned table and as CSV.
pub fn render_reports(rows: &[(String, MetricReport)]) -> (String, String) {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let k = rows.first().map_or(10, |(_, r)| r.k);
    let mut text = format!(
        "{:<width$} {:>10} {:>10} {:>6}\n",
        "model",
        format!("Recall@{k}"),
        format!("NDCG@{k}"),
        "users"
    );
    let mut csv = String::from("model,k,recall,ndcg,users\n");
    for (name, r) in rows {
        let _ = writeln!(text, "{name:<width$} {:>10.6} {:>10.6} {:>6}", r.recall, r.ndcg, r.users());
        let _ = writeln!(csv, "{name},{},{:.6},{:.6},{}", r.k, r.recall, r.ndcg, r.users());
    }
    text.push_str("# each user's training items are excluded from their ranking\n");
    (text, csv)
}

pub fn popularity_report(dataset: &InteractionDataset, split: Split, k: usize) -> MetricReport {
    let ranker = PopularityRanker::new(dataset);
    let rows: Vec<(usize, Vec<usize>)> = (0..dataset.n_users())
        .map(|u| (u, ranker.recommend(k, dataset.train_items(u))))
        .collect();
    MetricReport::collect(k, rows.iter().map(|(u, r)| (*u, r.as_slice(), dataset.items_in(*u, split))))
}

pub fn mf_config(cfg: &Config) -> MfTrainConfig {
    MfTrainConfig {
        dim: cfg.dim,
        lr: cfg.mf_lr,
        l2: cfg.l2,
        max_epochs: cfg.epochs,
        patience: cfg.patience,
        k: cfg.k,
        seed: cfg.seed,
    }
}

/// Test-split metrics of the generative model next to the baselines.
pub fn evaluate(ws: &Workspace, cfg: &Config) -> Result<String> {
    ws.snapshot("evaluate", cfg)?;
    let loaded = load_all(ws, cfg)?;
    let Loaded {
        dataset,
        reps,
        registry,
        transformer: model,
    } = &loaded;
    let rows = vec![
        (
            "generative".to_string(),
            recommender::evaluate(model, dataset, reps, registry, Split::Test, cfg.k, cfg.seed)?,
        ),
        ("graph-encoder".to_string(), evaluate_reps(reps, dataset, Split::Test, cfg.k)),
        ("mf".to_string(), mf_train(dataset, &mf_config(cfg)).evaluate(dataset, Split::Test, cfg.k)),
        ("popularity".to_string(), popularity_report(dataset, Split::Test, cfg.k)),
    ];
    let (text, csv) = render_reports(&rows);
    ws.write("metrics.txt", &text)?;
    ws.write("metrics.csv", &csv)?;
    Ok(text)
}

pub fn bench_config(cfg: &Config) -> BenchConfig {
    BenchConfig {
        base_items: cfg.bench_items,
        users: cfg.bench_users,
        repetitions: cfg.bench_repetitions,
        k: cfg.k,
        beam_width: cfg.k,
        history_len: cfg.max_len,
        seed: cfg.seed,
        ..BenchConfig::default()
    }
}

/// Per-user inference time of MF and the generative model over nested
/// synthetic catalogs.
pub fn bench(ws: &Workspace, cfg: &Config) -> Result<String> {
    ws.snapshot("bench", cfg)?;
    let bc = bench_config(cfg);
    let tf = TransformerConfig {
        dim: cfg.dim,
        heads: cfg.heads,
        layers: cfg.layers,
        ff_mult: cfg.ff_mult,
        max_len: cfg.max_len,
        vocab_size: 0,
        id_len: 0,
        pos: cfg.pos_encoding,
    };
    let setup = BenchSetup::random(&bc, tf, cfg.id_len - 1, cfg.codebook_size).map_err(PipelineError::Usage)?;
    let table = bench_inference(&setup, &bc)?;
    let mut text = table.to_string();
    if !table.is_empty() {
        let fmt = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.2}"));
        let _ = writeln!(
            text,
            "mf growth {}x, generative spread {}x, crossover at {}",
            fmt(table.growth(crate::eval::bench::Paradigm::Mf)),
            fmt(table.spread(crate::eval::bench::Paradigm::Generative)),
            table.crossover().map_or("none".into(), |i| format!("{i} items"))
        );
    }
    ws.write("bench.txt", &text)?;
    ws.write("bench.csv", &table.to_csv())?;
    Ok(text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Pos,
    Tokens,
    Length,
    Codebook,
}

impl std::str::FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pos" => Ok(Sweep::Pos),
            "tokens" => Ok(Sweep::Tokens),
            "length" => Ok(Sweep::Length),
            "codebook" => Ok(Sweep::Codebook),
            _ => Err(format!("unknown sweep `{s}` (pos|tokens|length|codebook)")),
        }
    }
}

/// Pre-token collision rate of the items in each nested prefix of
/// `order`, for the given fractions.
pub fn nested_collision_rates(codes: &[Vec<usize>], order: &[usize], denominators: &[usize]) -> Vec<(usize, f64)> {
    denominators
        .iter()
        .map(|&d| {
            let n = (order.len() / d).max(1);
            let sub: Vec<Vec<usize>> = order[..n].iter().map(|&i| codes[i].clone()).collect();
            (n, CollisionStats::from_codes(&sub).rate())
        })
        .collect()
}

/// Retrains the relevant stages for each setting of the chosen sweeps and
/// reports held-out test metrics.
pub fn ablate(ws: &Workspace, cfg: &Config, sweeps: &[Sweep]) -> Result<String> {
    ws.snapshot("ablate", cfg)?;
    let dataset = load_dataset(ws, cfg)?;
    let bank = load_bank(ws, &dataset)?;
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    let mut notes = String::new();

    let fit = |c: &Config, q: &Quantizer, reps: &Representations| -> Result<MetricReport> {
        let registry = build_registry(&dataset, q, reps, vocabulary(c), c.token_variant, c.seed)?;
        let (model, _) = fit_transformer(&dataset, reps, &registry, c)?;
        Ok(recommender::evaluate(&model, &dataset, reps, &registry, Split::Test, c.k, c.seed)?)
    };

    let needs_base = sweeps.iter().any(|s| matches!(s, Sweep::Pos | Sweep::Tokens));
    let base = if needs_base {
        Some(fit_quantizer(&dataset, &bank, cfg)?)
    } else {
        None
    };
    for sweep in sweeps {
        match sweep {
            Sweep::Pos => {
                let (_, q, reps, _) = base.as_ref().unwrap();
                for pos in [PosEncoding::Relation, PosEncoding::Sinusoid, PosEncoding::None] {
                    let c = Config {
                        pos_encoding: pos,
                        ..cfg.clone()
                    };
                    rows.push((format!("pos={pos}"), fit(&c, q, reps)?));
                }
            }
            Sweep::Tokens => {
                let (_, q, reps, _) = base.as_ref().unwrap();
                for variant in [TokenVariant::Popularity, TokenVariant::Random] {
                    let c = Config {
                        token_variant: variant,
                        ..cfg.clone()
                    };
                    rows.push((format!("tokens={variant}"), fit(&c, q, reps)?));
                }
                let codes = q.codes(&reps.items)?;
                let mut order: Vec<usize> = (0..codes.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(cfg.seed));
                let _ = writeln!(notes, "collision rate over nested catalogs:");
                for (n, rate) in nested_collision_rates(&codes, &order, &[16, 8, 4, 2, 1]) {
                    let _ = writeln!(notes, "  items={n:<8} rate={rate:.4}");
                }
            }
            Sweep::Length => {
                for m in 2..=5 {
                    let c = Config { id_len: m, ..cfg.clone() };
                    let (_, q, reps, _) = fit_quantizer(&dataset, &bank, &c)?;
                    rows.push((format!("id_len={m}"), fit(&c, &q, &reps)?));
                }
            }
            Sweep::Codebook => {
                for l in [64, 128, 256, 512] {
                    let c = Config {
                        codebook_size: l,
                        ..cfg.clone()
                    };
                    let (_, q, reps, _) = fit_quantizer(&dataset, &bank, &c)?;
                    rows.push((format!("codebook_size={l}"), fit(&c, &q, &reps)?));
                }
            }
        }
    }
    let (mut text, csv) = render_reports(&rows);
    text.push_str(&notes);
    ws.write("ablation.txt", &text)?;
    ws.write("ablation.csv", &csv)?;
    Ok(text)
}
