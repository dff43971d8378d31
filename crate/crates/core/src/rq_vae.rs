//! Residual-quantised autoencoder over item representations, and the
//! alternating BPR / reconstruction training of the whole first stage.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BipartiteGraph, InteractionDataset, ItemFeatureBank, Split};
use crate::graph_encoder::{bpr_loss, evaluate_reps, GraphContext, GraphEncoder};
use crate::numeric::{
    xavier_uniform, NumericError, Optimizer, OptimizerKind, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var,
    LEAKY_SLOPE,
};
use crate::training::{EarlyStopping, Progress, TrainError};

/// Index of the nearest codebook row to `r`; the lowest index wins ties.
pub fn nearest_code(codebook: &Tensor, r: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for l in 0..codebook.rows() {
        let d: f64 = codebook.row(l).iter().zip(r).map(|(b, x)| (x - b) * (x - b)).sum();
        if d < best.1 {
            best = (l, d);
        }
    }
    best.0
}

/// Result of residual quantisation for a batch of latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    /// `codes[i][m]`: codeword chosen for item `i` at level `m`.
    pub codes: Vec<Vec<usize>>,
    /// `residuals[m]` holds `r_{m+1}` for every item; the first is `z`
    /// itself and the last is what remains after all levels.
    pub residuals: Vec<Tensor>,
    /// Sum of the selected codewords.
    pub zhat: Tensor,
}

impl Quantized {
    pub fn final_residual(&self) -> &Tensor {
        self.residuals.last().expect("at least z")
    }

    pub fn levels(&self) -> usize {
        self.residuals.len() - 1
    }

    /// Codes at one level, one per item.
    pub fn level_codes(&self, m: usize) -> Vec<usize> {
        self.codes.iter().map(|c| c[m]).collect()
    }
}

pub fn quantize(codebooks: &[&Tensor], z: &Tensor) -> Quantized {
    let (n, dz) = (z.rows(), z.cols());
    let mut codes = vec![Vec::with_capacity(codebooks.len()); n];
    let mut residuals = vec![z.clone()];
    let mut zhat = Tensor::zeros(n, dz);
    for book in codebooks {
        let mut next = residuals.last().unwrap().clone();
        for i in 0..n {
            let c = nearest_code(book, next.row(i));
            codes[i].push(c);
            for ((r, s), &b) in next.row_mut(i).iter_mut().zip(zhat.row_mut(i).iter_mut()).zip(book.row(c)) {
                *r -= b;
                *s += b;
            }
        }
        residuals.push(next);
    }
    Quantized { codes, residuals, zhat }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerConfig {
    pub latent_dim: usize,
    /// Number of semantic levels, one less than the Rec-ID length.
    pub levels: usize,
    pub codebook_size: usize,
    pub beta: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            levels: 3,
            codebook_size: 128,
            beta: 0.25,
        }
    }
}

/// Loss terms of one forward pass; `total = recon + codebook + beta * commit`.
pub struct RqForward {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
    pub z: Var,
    pub h_hat: Var,
    pub quantized: Quantized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RqLoss {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

/// Encoder / decoder MLPs and per-level codebooks.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub store: ParamStore,
    enc: [(ParamId, ParamId); 2],
    dec: [(ParamId, ParamId); 2],
    codebooks: Vec<ParamId>,
    pub beta: f64,
}

impl Quantizer {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &QuantizerConfig, rng: &mut R) -> Self {
        assert!(cfg.levels >= 1 && cfg.codebook_size >= 1);
        let (d, dz) = (input_dim, cfg.latent_dim);
        let mut store = ParamStore::new();
        let mut layer = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            (
                store.add(format!("rq.{name}"), xavier_uniform(i, o, rng)),
                store.add(format!("rq.{name}_b"), Tensor::zeros(1, o)),
            )
        };
        let enc = [layer(&mut store, "enc1", d, d), layer(&mut store, "enc2", d, dz)];
        let dec = [layer(&mut store, "dec1", dz, d), layer(&mut store, "dec2", d, d)];
        let codebooks = (0..cfg.levels)
            .map(|m| store.add(format!("rq.codebook.{m}"), xavier_uniform(cfg.codebook_size, dz, rng)))
            .collect();
        Self {
            store,
            enc,
            dec,
            codebooks,
            beta: cfg.beta,
        }
    }

    pub fn from_store(store: ParamStore, beta: f64) -> Option<Self> {
        let pair = |name: &str| Some((store.find(&format!("rq.{name}"))?, store.find(&format!("rq.{name}_b"))?));
        let enc = [pair("enc1")?, pair("enc2")?];
        let dec = [pair("dec1")?, pair("dec2")?];
        let mut codebooks = Vec::new();
        while let Some(id) = store.find(&format!("rq.codebook.{}", codebooks.len())) {
            codebooks.push(id);
        }
        if codebooks.is_empty() {
            return None;
        }
        Some(Self {
            store,
            enc,
            dec,
            codebooks,
            beta,
        })
    }

    pub fn config(&self) -> QuantizerConfig {
        let b = self.store.get(self.codebooks[0]);
        QuantizerConfig {
            latent_dim: b.cols(),
            levels: self.codebooks.len(),
            codebook_size: b.rows(),
            beta: self.beta,
        }
    }

    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.store.get(self.codebooks[0]).rows()
    }

    pub fn codebook(&self, m: usize) -> &Tensor {
        self.store.get(self.codebooks[m])
    }

    pub fn codebook_id(&self, m: usize) -> ParamId {
        self.codebooks[m]
    }

    pub fn codebook_mut(&mut self, m: usize) -> &mut Tensor {
        self.store.get_mut(self.codebooks[m])
    }

    pub fn encoder_ids(&self) -> [(ParamId, ParamId); 2] {
        self.enc
    }

    pub fn decoder_ids(&self) -> [(ParamId, ParamId); 2] {
        self.dec
    }

    fn mlp(tape: &mut Tape<'_>, x: Var, layers: &[(ParamId, ParamId); 2]) -> Result<Var, NumericError> {
        let (w1, b1) = (tape.param(layers[0].0), tape.param(layers[0].1));
        let hidden = tape.affine(x, w1, b1)?;
        let hidden = tape.leaky_relu(hidden, LEAKY_SLOPE);
        let (w2, b2) = (tape.param(layers[1].0), tape.param(layers[1].1));
        tape.affine(hidden, w2, b2)
    }

    pub fn encode_var(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var, NumericError> {
        Self::mlp(tape, h, &self.enc)
    }

    pub fn decode_var(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericError> {
        Self::mlp(tape, x, &self.dec)
    }

    /// Decoder applied to `z + sg(zhat - z)`.
    pub fn decode_straight_through(&self, tape: &mut Tape<'_>, z: Var, zhat: &Tensor) -> Result<Var, NumericError> {
        let input = tape.straight_through(z, zhat.clone())?;
        self.decode_var(tape, input)
    }

    pub fn encode(&self, h: &Tensor) -> Result<Tensor, NumericError> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(h.clone());
        let z = self.encode_var(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode(&self, x: &Tensor) -> Result<Tensor, NumericError> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(x.clone());
        let y = self.decode_var(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn quantize(&self, z: &Tensor) -> Quantized {
        let books: Vec<&Tensor> = self.codebooks.iter().map(|&id| self.store.get(id)).collect();
        quantize(&books, z)
    }

    /// Semantic codewords of every row of `h`.
    pub fn codes(&self, h: &Tensor) -> Result<Vec<Vec<usize>>, NumericError> {
        Ok(self.quantize(&self.encode(h)?).codes)
    }

    /// Builds the full loss for representations `h` (rows are items).
    pub fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<RqForward, NumericError> {
        let z = self.encode_var(tape, h)?;
        let store = tape.store();
        let books: Vec<&Tensor> = self.codebooks.iter().map(|&id| store.get(id)).collect();
        let q = quantize(&books, tape.value(z));
        let h_hat = self.decode_straight_through(tape, z, &q.zhat)?;
        let recon = tape.sq_l2_dist(h, h_hat)?;

        let mut codebook_terms = Vec::new();
        let mut commit_terms = Vec::new();
        for (m, &book) in self.codebooks.iter().enumerate() {
            let book = tape.param(book);
            let selected = tape.gather_rows(book, Rc::new(q.level_codes(m)));
            // r_m = z - (codewords of earlier levels); only z carries gradient
            let earlier = tape.constant(q.residuals[0].sub(&q.residuals[m])?);
            let r = tape.sub(z, earlier)?;
            let r_sg = tape.stop_gradient(r);
            let b_sg = tape.stop_gradient(selected);
            codebook_terms.push(tape.sq_l2_dist(r_sg, selected)?);
            commit_terms.push(tape.sq_l2_dist(r, b_sg)?);
        }
        let codebook = sum_vars(tape, &codebook_terms)?;
        let commit = sum_vars(tape, &commit_terms)?;
        let weighted = tape.scale(commit, self.beta);
        let total = tape.add(recon, codebook)?;
        let total = tape.add(total, weighted)?;
        Ok(RqForward {
            total,
            recon,
            codebook,
            commit,
            z,
            h_hat,
            quantized: q,
        })
    }

    /// Loss value and gradients for constant representations `h`.
    pub fn loss_and_grads(&self, h: &Tensor) -> Result<(RqLoss, ParamGrads, Quantized), NumericError> {
        let mut tape = Tape::new(&self.store);
        let hv = tape.constant(h.clone());
        let f = self.forward(&mut tape, hv)?;
        let loss = RqLoss {
            total: tape.value(f.total).item(),
            recon: tape.value(f.recon).item(),
            codebook: tape.value(f.codebook).item(),
            commit: tape.value(f.commit).item(),
        };
        let grads = tape.backward(f.total)?.into_param_grads();
        Ok((loss, grads, f.quantized))
    }

    /// One optimiser step on the per-item mean of the loss over the rows of
    /// `h` (the returned loss is the sum); with `train_codebooks == false`
    /// the codebooks are left untouched.
    pub fn step(
        &mut self,
        h: &Tensor,
        opt: &mut Optimizer,
        train_codebooks: bool,
    ) -> Result<(RqLoss, Quantized), NumericError> {
        let (loss, mut grads, q) = self.loss_and_grads(h)?;
        grads.scale(1.0 / h.rows().max(1) as f64);
        if !train_codebooks {
            for &id in &self.codebooks {
                grads.remove(id);
            }
        }
        opt.step(&mut self.store, &grads);
        Ok((loss, q))
    }

    /// Moves every code in `unused[m]` onto the level-`m` residual of a
    /// randomly chosen item.
    pub fn reseed_codes<R: Rng + ?Sized>(&mut self, q: &Quantized, unused: &[Vec<usize>], rng: &mut R) {
        let n = q.codes.len();
        if n == 0 {
            return;
        }
        for (m, dead) in unused.iter().enumerate() {
            for &l in dead {
                let i = rng.random_range(0..n);
                let r = q.residuals[m].row(i).to_vec();
                self.codebook_mut(m).row_mut(l).copy_from_slice(&r);
            }
        }
    }
}

fn sum_vars(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var, NumericError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Bpr,
    RqVae,
}

#[derive(Clone, Debug)]
pub struct JointConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub k: usize,
    pub seed: u64,
    pub reseed_dead_codes: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: 0.001,
            l2: 1e-5,
            batch_size: 1000,
            max_epochs: 200,
            patience: 20,
            k: 10,
            seed: 0,
            reseed_dead_codes: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointEpoch {
    pub epoch: usize,
    pub bpr: f64,
    pub rq: RqLoss,
    pub valid_recall: Option<f64>,
    pub reseeded: usize,
}

#[derive(Clone, Debug, Default)]
pub struct JointLog {
    pub epochs: Vec<JointEpoch>,
    pub schedule: Vec<StepKind>,
    pub best_epoch: Option<usize>,
}

/// First stage: alternate a BPR step on the graph encoder and an RQ-VAE step
/// on fresh item representations for every mini-batch of training pairs.
/// The parameters of the epoch with the best validation Recall@K are kept.
pub fn train_joint(
    dataset: &InteractionDataset,
    bank: &ItemFeatureBank,
    encoder: &mut GraphEncoder,
    quantizer: &mut Quantizer,
    cfg: &JointConfig,
) -> Result<JointLog, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Invalid("batch size must be positive".into()));
    }
    let graph = BipartiteGraph::build(dataset);
    let ctx = GraphContext::new(bank, &graph);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a6f696e74);
    let mut enc_opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.l2);
    let mut rq_opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.l2);
    let has_valid = (0..dataset.n_users()).any(|u| !dataset.valid_items(u).is_empty());
    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut best: Option<(GraphEncoder, Quantizer)> = None;
    let mut log = JointLog::default();
    let mut pairs = dataset.train_pairs();
    let n_items = dataset.n_items();
    let size = quantizer.codebook_size();
    let mut step = 0;

    for epoch in 0..cfg.max_epochs {
        pairs.shuffle(&mut rng);
        let mut used = vec![vec![false; size]; quantizer.levels()];
        let (mut bpr_sum, mut rq_sum, mut batches) = (0.0, RqLoss::default(), 0);
        let mut last_q = None;
        for batch in pairs.chunks(cfg.batch_size) {
            let triples: Vec<(usize, usize, usize)> = batch
                .iter()
                .filter_map(|&(u, i)| sample_negative(dataset, u, n_items, &mut rng).map(|j| (u, i, j)))
                .collect();
            if !triples.is_empty() {
                let (loss, grads) = {
                    let mut tape = Tape::new(&encoder.store);
                    let (users, items) = encoder.forward(&mut tape, &ctx)?;
                    let l = bpr_loss(&mut tape, users, items, &triples)?;
                    let l = tape.scale(l, 1.0 / triples.len() as f64);
                    (tape.value(l).item(), tape.backward(l)?.into_param_grads())
                };
                check_finite("bpr", epoch, step, loss, grads.global_norm())?;
                enc_opt.step(&mut encoder.store, &grads);
                bpr_sum += loss;
            }
            log.schedule.push(StepKind::Bpr);
            step += 1;

            let reps = encoder.encode_all(&ctx)?;
            let (loss, q) = quantizer.step(&reps.items, &mut rq_opt, true)?;
            check_finite("rqvae", epoch, step, loss.total, loss.recon)?;
            for codes in &q.codes {
                for (m, &c) in codes.iter().enumerate() {
                    used[m][c] = true;
                }
            }
            rq_sum.total += loss.total;
            rq_sum.recon += loss.recon;
            rq_sum.codebook += loss.codebook;
            rq_sum.commit += loss.commit;
            last_q = Some(q);
            log.schedule.push(StepKind::RqVae);
            step += 1;
            batches += 1;
        }

        let mut reseeded = 0;
        if cfg.reseed_dead_codes {
            if let Some(q) = &last_q {
                let dead: Vec<Vec<usize>> = used
                    .iter()
                    .map(|u| (0..size).filter(|&l| !u[l]).collect())
                    .collect();
                reseeded = dead.iter().map(Vec::len).sum();
                quantizer.reseed_codes(q, &dead, &mut rng);
            }
        }

        let b = batches.max(1) as f64;
        let mut entry = JointEpoch {
            epoch,
            bpr: bpr_sum / b,
            rq: RqLoss {
                total: rq_sum.total / b,
                recon: rq_sum.recon / b,
                codebook: rq_sum.codebook / b,
                commit: rq_sum.commit / b,
            },
            valid_recall: None,
            reseeded,
        };
        if has_valid {
            let reps = encoder.encode_all(&ctx)?;
            let recall = evaluate_reps(&reps, dataset, Split::Valid, cfg.k).recall;
            entry.valid_recall = Some(recall);
            let progress = stopper.observe(epoch, recall);
            log.epochs.push(entry);
            match progress {
                Progress::Improved => best = Some((encoder.clone(), quantizer.clone())),
                Progress::Stale => {}
                Progress::Stop => break,
            }
        } else {
            log.epochs.push(entry);
        }
    }
    if let Some((e, q)) = best {
        *encoder = e;
        *quantizer = q;
    }
    log.best_epoch = stopper.best().map(|(e, _)| e);
    Ok(log)
}

fn sample_negative<R: Rng + ?Sized>(dataset: &InteractionDataset, u: usize, n_items: usize, rng: &mut R) -> Option<usize> {
    let train = dataset.train_items(u);
    if train.len() >= n_items {
        return None;
    }
    loop {
        let j = rng.random_range(0..n_items);
        if train.binary_search(&j).is_err() {
            return Some(j);
        }
    }
}

fn check_finite(stage: &'static str, epoch: usize, step: usize, loss: f64, aux: f64) -> Result<(), TrainError> {
    if loss.is_finite() && aux.is_finite() {
        return Ok(());
    }
    Err(TrainError::Diverged {
        stage,
        epoch,
        step,
        loss,
        detail: format!("auxiliary magnitude {aux}"),
    })
}
