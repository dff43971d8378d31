//! Encoder-decoder Transformer that reads a user's items and emits Rec-ID
//! tokens. Encoder self-attention carries a user-specific relation term;
//! the decoder is a standard causal stack with cross-attention.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{InteractionDataset, Split};
use crate::eval::MetricReport;
use crate::generation::beam_search;
use crate::graph_encoder::Representations;
use crate::numeric::{
    xavier_uniform, NumericError, Optimizer, OptimizerKind, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::rec_id::{RecIdRegistry, BOS};
use crate::training::{EarlyStopping, Progress, TrainError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum RecError {
    #[error("user {user} has no items to encode")]
    EmptyHistory { user: usize },
    #[error("item {0} has no Rec-ID")]
    UnknownItem(usize),
    #[error("token sequence {0:?} is not a Rec-ID")]
    UnknownRecId(Vec<usize>),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Source of order / relation information in the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEncoding {
    /// User-specific relation term in every encoder attention; no positions.
    Relation,
    /// Standard attention with sinusoidal positions added to the input.
    Sinusoid,
    /// Standard attention, no positional signal.
    None,
}

impl fmt::Display for PosEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosEncoding::Relation => "relation",
            PosEncoding::Sinusoid => "sinusoid",
            PosEncoding::None => "none",
        })
    }
}

impl FromStr for PosEncoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relation" => Ok(PosEncoding::Relation),
            "sinusoid" => Ok(PosEncoding::Sinusoid),
            "none" => Ok(PosEncoding::None),
            other => Err(format!("unknown pos-encoding `{other}` (expected relation, sinusoid or none)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    /// Encoder input length `N`.
    pub max_len: usize,
    pub vocab_size: usize,
    /// Tokens per Rec-ID.
    pub id_len: usize,
    pub pos: PosEncoding,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn validate(&self) -> Result<(), String> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(format!("dim {} is not divisible into {} heads", self.dim, self.heads));
        }
        if self.max_len == 0 || self.id_len == 0 || self.vocab_size < 3 || self.ff_mult == 0 {
            return Err("max_len, id_len and ff_mult must be positive and the vocabulary non-trivial".into());
        }
        Ok(())
    }
}

/// Encoder input: items as tokens `item + 1`, padded with 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub tokens: Vec<usize>,
    pub embeddings: Tensor,
    pub mask: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().filter(|&&t| t > 0).map(|t| t - 1)
    }
}

/// Embeds up to `n` of `items` as rows of `reps`. Longer lists are reduced
/// to a uniform random subset drawn from `rng`, kept in their given order.
pub fn embed_input<R: Rng + ?Sized>(
    user: usize,
    items: &[usize],
    reps: &Tensor,
    n: usize,
    rng: &mut R,
) -> Result<EncodedSequence, RecError> {
    if items.is_empty() {
        return Err(RecError::EmptyHistory { user });
    }
    let chosen: Vec<usize> = if items.len() > n {
        let mut idx = index::sample(rng, items.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i]).collect()
    } else {
        items.to_vec()
    };
    let d = reps.cols();
    let mut emb = Tensor::zeros(n, d);
    let mut tokens = vec![0; n];
    let mut mask = vec![false; n];
    for (p, &i) in chosen.iter().enumerate() {
        emb.row_mut(p).copy_from_slice(reps.row(i));
        tokens[p] = i + 1;
        mask[p] = true;
    }
    Ok(EncodedSequence {
        tokens,
        embeddings: emb,
        mask,
    })
}

/// Sinusoidal position table, `len x dim`.
pub fn sinusoid_table(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for p in 0..len {
        for c in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
            let angle = p as f64 * freq;
            t.set(p, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct UserTerms {
    uq: ParamId,
    uk: ParamId,
    uv: ParamId,
    /// `(w, b)` of the linear maps `h_u -> scalar` for Q, K and V.
    scalars: [(ParamId, ParamId); 3],
}

#[derive(Clone, Copy, Debug)]
struct Ff {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

type Ln = (ParamId, ParamId);

#[derive(Clone, Debug)]
struct EncLayer {
    attn: Attn,
    user: Option<UserTerms>,
    ln1: Ln,
    ff: Ff,
    ln2: Ln,
}

#[derive(Clone, Debug)]
struct DecLayer {
    attn: Attn,
    ln1: Ln,
    cross: Attn,
    ln2: Ln,
    ff: Ff,
    ln3: Ln,
}

/// Per-user scalars `(s_Q, s_K, s_V)` on a tape.
type Scalars = (Var, Var, Var);

#[derive(Clone, Debug)]
pub struct Transformer {
    pub store: ParamStore,
    cfg: TransformerConfig,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    tok_emb: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    enc_pe: Tensor,
    dec_pe: Tensor,
}

struct Builder<'a, R: Rng + ?Sized> {
    store: ParamStore,
    rng: &'a mut R,
    create: bool,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn get(&mut self, name: String, init: impl FnOnce(&mut R) -> Tensor) -> Result<ParamId, String> {
        if self.create {
            let t = init(self.rng);
            Ok(self.store.add(name, t))
        } else {
            let id = self.store.find(&name).ok_or_else(|| format!("missing parameter {name}"))?;
            let want = init(self.rng);
            if self.store.get(id).shape() != want.shape() {
                return Err(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    self.store.get(id).shape(),
                    want.shape()
                ));
            }
            Ok(id)
        }
    }

    fn matrix(&mut self, name: String, r: usize, c: usize) -> Result<ParamId, String> {
        self.get(name, |rng| xavier_uniform(r, c, rng))
    }

    fn fill(&mut self, name: String, r: usize, c: usize, v: f64) -> Result<ParamId, String> {
        self.get(name, |_| Tensor::filled(r, c, v))
    }

    fn attn(&mut self, p: &str, d: usize) -> Result<Attn, String> {
        Ok(Attn {
            wq: self.matrix(format!("{p}.wq"), d, d)?,
            wk: self.matrix(format!("{p}.wk"), d, d)?,
            wv: self.matrix(format!("{p}.wv"), d, d)?,
            wo: self.matrix(format!("{p}.wo"), d, d)?,
        })
    }

    fn ln(&mut self, p: &str, d: usize) -> Result<Ln, String> {
        Ok((self.fill(format!("{p}.g"), 1, d, 1.0)?, self.fill(format!("{p}.b"), 1, d, 0.0)?))
    }

    fn ff(&mut self, p: &str, d: usize, f: usize) -> Result<Ff, String> {
        Ok(Ff {
            w1: self.matrix(format!("{p}.w1"), d, f)?,
            b1: self.fill(format!("{p}.b1"), 1, f, 0.0)?,
            w2: self.matrix(format!("{p}.w2"), f, d)?,
            b2: self.fill(format!("{p}.b2"), 1, d, 0.0)?,
        })
    }
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(cfg: TransformerConfig, rng: &mut R) -> Result<Self, String> {
        Self::build(cfg, ParamStore::new(), rng, true)
    }

    /// Binds a loaded store to `cfg`, checking every parameter's shape.
    pub fn from_store(cfg: TransformerConfig, store: ParamStore) -> Result<Self, String> {
        Self::build(cfg, store, &mut ChaCha8Rng::seed_from_u64(0), false)
    }

    fn build<R: Rng + ?Sized>(cfg: TransformerConfig, store: ParamStore, rng: &mut R, create: bool) -> Result<Self, String> {
        cfg.validate()?;
        let (d, dh, v) = (cfg.dim, cfg.head_dim(), cfg.vocab_size);
        let mut b = Builder { store, rng, create };
        let mut enc = Vec::new();
        for l in 0..cfg.layers {
            let p = format!("tf.enc.{l}");
            let attn = b.attn(&format!("{p}.attn"), d)?;
            let user = if cfg.pos == PosEncoding::Relation {
                let mut scalar = |x: &str| -> Result<(ParamId, ParamId), String> {
                    Ok((
                        b.fill(format!("{p}.user.s{x}_w"), d, 1, 0.0)?,
                        b.fill(format!("{p}.user.s{x}_b"), 1, 1, 1.0)?,
                    ))
                };
                let scalars = [scalar("q")?, scalar("k")?, scalar("v")?];
                Some(UserTerms {
                    uq: b.matrix(format!("{p}.user.uq"), d, dh)?,
                    uk: b.matrix(format!("{p}.user.uk"), d, dh)?,
                    uv: b.matrix(format!("{p}.user.uv"), d, dh)?,
                    scalars,
                })
            } else {
                None
            };
            enc.push(EncLayer {
                attn,
                user,
                ln1: b.ln(&format!("{p}.ln1"), d)?,
                ff: b.ff(&format!("{p}.ff"), d, cfg.ff_mult * d)?,
                ln2: b.ln(&format!("{p}.ln2"), d)?,
            });
        }
        let mut dec = Vec::new();
        for l in 0..cfg.layers {
            let p = format!("tf.dec.{l}");
            dec.push(DecLayer {
                attn: b.attn(&format!("{p}.attn"), d)?,
                ln1: b.ln(&format!("{p}.ln1"), d)?,
                cross: b.attn(&format!("{p}.cross"), d)?,
                ln2: b.ln(&format!("{p}.ln2"), d)?,
                ff: b.ff(&format!("{p}.ff"), d, cfg.ff_mult * d)?,
                ln3: b.ln(&format!("{p}.ln3"), d)?,
            });
        }
        let tok_emb = b.matrix("tf.tok_emb".into(), v, d)?;
        let out_w = b.matrix("tf.out_w".into(), d, v)?;
        let out_b = b.fill("tf.out_b".into(), 1, v, 0.0)?;
        if !create && b.store.len() != count_params(&cfg) {
            return Err(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                b.store.len(),
                count_params(&cfg)
            ));
        }
        Ok(Self {
            store: b.store,
            enc_pe: sinusoid_table(cfg.max_len, d),
            dec_pe: sinusoid_table(cfg.id_len, d),
            cfg,
            enc,
            dec,
            tok_emb,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Overrides the bias of every user-scalar map (weights are zeroed), so
    /// each scalar equals `value` for all users.
    pub fn set_user_scalars(&mut self, value: f64) {
        for l in &self.enc {
            if let Some(u) = &l.user {
                for (w, b) in u.scalars {
                    let t = self.store.get_mut(w);
                    t.data_mut().iter_mut().for_each(|x| *x = 0.0);
                    *self.store.get_mut(b) = Tensor::scalar(value);
                }
            }
        }
    }

    fn user_scalars(&self, tape: &mut Tape<'_>, layer: &EncLayer, h_u: Var) -> Result<Option<Scalars>, NumericError> {
        let Some(u) = &layer.user else { return Ok(None) };
        let mut s = [h_u; 3];
        for (slot, (w, b)) in s.iter_mut().zip(u.scalars) {
            let (w, b) = (tape.param(w), tape.param(b));
            *slot = tape.affine(h_u, w, b)?;
        }
        Ok(Some((s[0], s[1], s[2])))
    }

    /// Multi-head attention of `x` (queries) over `mem` (keys / values) with
    /// an additive `mask`. With `user`, the shared foundational projections
    /// add `s_Q s_K (x U^Q)(mem U^K)^T` to every head's scores and
    /// `s_V mem U^V` to every head's values.
    fn attention(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        mem: Var,
        attn: &Attn,
        mask: &Tensor,
        user: Option<(&UserTerms, Scalars)>,
    ) -> Result<Var, NumericError> {
        Ok(self.attention_with_weights(tape, x, mem, attn, mask, user)?.0)
    }

    fn attention_with_weights(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        mem: Var,
        attn: &Attn,
        mask: &Tensor,
        user: Option<(&UserTerms, Scalars)>,
    ) -> Result<(Var, Vec<Var>), NumericError> {
        let dh = self.cfg.head_dim();
        let (wq, wk, wv, wo) = (tape.param(attn.wq), tape.param(attn.wk), tape.param(attn.wv), tape.param(attn.wo));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(mem, wk)?;
        let v = tape.matmul(mem, wv)?;
        let relation = match user {
            Some((u, (sq, sk, sv))) => {
                let (uq, uk, uv) = (tape.param(u.uq), tape.param(u.uk), tape.param(u.uv));
                let eq = tape.matmul(x, uq)?;
                let ek = tape.matmul(mem, uk)?;
                let ev = tape.matmul(mem, uv)?;
                let r = tape.matmul_bt(eq, ek)?;
                let sqk = tape.mul(sq, sk)?;
                Some((tape.scale_by(sqk, r)?, tape.scale_by(sv, ev)?))
            }
            None => None,
        };
        let mask = tape.constant(mask.clone());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut alphas = Vec::with_capacity(self.cfg.heads);
        for a in 0..self.cfg.heads {
            let (lo, hi) = (a * dh, (a + 1) * dh);
            let qa = tape.slice_cols(q, lo, hi);
            let ka = tape.slice_cols(k, lo, hi);
            let mut va = tape.slice_cols(v, lo, hi);
            let mut scores = tape.matmul_bt(qa, ka)?;
            if let Some((r, ev)) = relation {
                scores = tape.add(scores, r)?;
                va = tape.add(va, ev)?;
            }
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, mask)?;
            let alpha = tape.softmax_rows(scores);
            heads.push(tape.matmul(alpha, va)?);
            alphas.push(alpha);
        }
        let cat = tape.concat_cols(&heads)?;
        Ok((tape.matmul(cat, wo)?, alphas))
    }

    /// Output (after `W^O`) and per-head weights of encoder layer `layer`'s
    /// self-attention applied directly to `x`. `with_user == false` drops
    /// the relation term even when the model has one.
    pub fn encoder_attention(
        &self,
        layer: usize,
        x: &Tensor,
        valid: &[bool],
        h_u: &[f64],
        with_user: bool,
    ) -> Result<(Tensor, Vec<Tensor>), NumericError> {
        if !valid.iter().any(|&v| v) {
            return Err(NumericError::NonFinite {
                what: "attention over a fully masked sequence".into(),
            });
        }
        let l = &self.enc[layer];
        let mut tape = Tape::new(&self.store);
        let xv = tape.constant(x.clone());
        let hu = tape.constant(Tensor::row_vector(h_u.to_vec()));
        let user = if with_user {
            let scalars = self.user_scalars(&mut tape, l, hu)?;
            l.user.as_ref().zip(scalars)
        } else {
            None
        };
        let mask = key_mask(valid, valid.len());
        let (out, alphas) = self.attention_with_weights(&mut tape, xv, xv, &l.attn, &mask, user)?;
        Ok((tape.value(out).clone(), alphas.iter().map(|&a| tape.value(a).clone()).collect()))
    }

    /// Raw tensors of encoder layer `layer`'s attention, with the user
    /// scalars evaluated at `h_u` (`None` without a relation term).
    pub fn encoder_attention_weights(&self, layer: usize, h_u: &[f64]) -> AttentionWeights {
        let l = &self.enc[layer];
        let g = |id: ParamId| self.store.get(id).clone();
        let user = l.user.as_ref().map(|u| {
            let s = u.scalars.map(|(w, b)| {
                crate::numeric::dot(h_u, self.store.get(w).data()) + self.store.get(b).item()
            });
            (g(u.uq), g(u.uk), g(u.uv), s)
        });
        AttentionWeights {
            wq: g(l.attn.wq),
            wk: g(l.attn.wk),
            wv: g(l.attn.wv),
            wo: g(l.attn.wo),
            heads: self.cfg.heads,
            user,
        }
    }

    fn add_norm(&self, tape: &mut Tape<'_>, x: Var, y: Var, ln: Ln) -> Result<Var, NumericError> {
        let s = tape.add(x, y)?;
        let (g, b) = (tape.param(ln.0), tape.param(ln.1));
        tape.layer_norm(s, g, b, LN_EPS)
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, x: Var, ff: &Ff) -> Result<Var, NumericError> {
        let (w1, b1, w2, b2) = (tape.param(ff.w1), tape.param(ff.b1), tape.param(ff.w2), tape.param(ff.b2));
        let h = tape.affine(x, w1, b1)?;
        let h = tape.relu(h);
        tape.affine(h, w2, b2)
    }

    /// Encoder memory (`N x D`) for one sequence.
    pub fn encode(&self, tape: &mut Tape<'_>, seq: &EncodedSequence, h_u: &[f64]) -> Result<Var, RecError> {
        self.encode_layers(tape, seq, h_u, self.cfg.layers)
    }

    /// Memory after the first `depth` encoder layers.
    pub fn encode_layers(
        &self,
        tape: &mut Tape<'_>,
        seq: &EncodedSequence,
        h_u: &[f64],
        depth: usize,
    ) -> Result<Var, RecError> {
        if seq.is_empty() {
            return Err(RecError::EmptyHistory { user: usize::MAX });
        }
        let mut input = seq.embeddings.clone();
        if self.cfg.pos == PosEncoding::Sinusoid {
            input = input.add(&self.enc_pe)?;
        }
        let mut x = tape.constant(input);
        let mask = key_mask(&seq.mask, seq.mask.len());
        let hu = tape.constant(Tensor::row_vector(h_u.to_vec()));
        for layer in &self.enc[..depth] {
            let scalars = self.user_scalars(tape, layer, hu)?;
            let user = layer.user.as_ref().zip(scalars);
            let a = self.attention(tape, x, x, &layer.attn, &mask, user)?;
            x = self.add_norm(tape, x, a, layer.ln1)?;
            let f = self.feed_forward(tape, x, &layer.ff)?;
            x = self.add_norm(tape, x, f, layer.ln2)?;
        }
        Ok(x)
    }

    /// Logits (`T x V`) for decoder inputs `tokens` (starting with `BOS`).
    pub fn decode(
        &self,
        tape: &mut Tape<'_>,
        memory: Var,
        memory_mask: &[bool],
        tokens: &[usize],
    ) -> Result<Var, NumericError> {
        let t = tokens.len();
        let emb = tape.param(self.tok_emb);
        let y = tape.gather_rows(emb, Rc::new(tokens.to_vec()));
        let pe = tape.constant(self.dec_pe.slice_rows(0, t));
        let mut y = tape.add(y, pe)?;
        let causal = causal_mask(t);
        let cross = key_mask(memory_mask, t);
        for layer in &self.dec {
            let a = self.attention(tape, y, y, &layer.attn, &causal, None)?;
            y = self.add_norm(tape, y, a, layer.ln1)?;
            let c = self.attention(tape, y, memory, &layer.cross, &cross, None)?;
            y = self.add_norm(tape, y, c, layer.ln2)?;
            let f = self.feed_forward(tape, y, &layer.ff)?;
            y = self.add_norm(tape, y, f, layer.ln3)?;
        }
        let (w, b) = (tape.param(self.out_w), tape.param(self.out_b));
        tape.affine(y, w, b)
    }

    /// Sum of target-token log-probabilities under teacher forcing.
    pub fn sequence_log_prob(
        &self,
        tape: &mut Tape<'_>,
        seq: &EncodedSequence,
        h_u: &[f64],
        target: &[usize],
    ) -> Result<Var, RecError> {
        let memory = self.encode(tape, seq, h_u)?;
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.decode(tape, memory, &seq.mask, &inputs)?;
        let logp = tape.log_softmax_rows(logits);
        Ok(tape.pick_sum(logp, Rc::new(target.to_vec()))?)
    }

    /// Plain-tensor encoder memory plus cached cross-attention keys/values.
    pub fn memory(&self, seq: &EncodedSequence, h_u: &[f64]) -> Result<Memory, RecError> {
        let mut tape = Tape::new(&self.store);
        let m = self.encode(&mut tape, seq, h_u)?;
        let states = tape.value(m).clone();
        let mut keys = Vec::with_capacity(self.dec.len());
        let mut values = Vec::with_capacity(self.dec.len());
        for layer in &self.dec {
            keys.push(states.matmul(self.store.get(layer.cross.wk))?);
            values.push(states.matmul(self.store.get(layer.cross.wv))?);
        }
        Ok(Memory {
            states,
            mask: seq.mask.clone(),
            keys,
            values,
        })
    }

    pub fn start_state(&self) -> DecoderState {
        DecoderState {
            keys: vec![Vec::new(); self.dec.len()],
            values: vec![Vec::new(); self.dec.len()],
        }
    }

    /// Feeds one token and returns the next-token logits, extending the
    /// per-layer self-attention cache in `state`.
    pub fn step(&self, memory: &Memory, state: &mut DecoderState, token: usize) -> Result<Vec<f64>, NumericError> {
        let pos = state.keys.first().map_or(0, Vec::len);
        let d = self.cfg.dim;
        let mut x: Vec<f64> = self
            .store
            .get(self.tok_emb)
            .row(token)
            .iter()
            .zip(self.dec_pe.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        for (l, layer) in self.dec.iter().enumerate() {
            let q = vec_mat(&x, self.store.get(layer.attn.wq));
            state.keys[l].push(vec_mat(&x, self.store.get(layer.attn.wk)));
            state.values[l].push(vec_mat(&x, self.store.get(layer.attn.wv)));
            let mask = vec![true; state.keys[l].len()];
            let a = self.plain_attention(&q, &state.keys[l], &state.values[l], &mask, layer.attn.wo);
            x = self.plain_add_norm(&x, &a, layer.ln1);
            let q = vec_mat(&x, self.store.get(layer.cross.wq));
            let keys: Vec<&[f64]> = (0..memory.keys[l].rows()).map(|r| memory.keys[l].row(r)).collect();
            let vals: Vec<&[f64]> = (0..memory.values[l].rows()).map(|r| memory.values[l].row(r)).collect();
            let c = self.plain_attention(&q, &keys, &vals, &memory.mask, layer.cross.wo);
            x = self.plain_add_norm(&x, &c, layer.ln2);
            let f = self.plain_ff(&x, &layer.ff);
            x = self.plain_add_norm(&x, &f, layer.ln3);
        }
        debug_assert_eq!(x.len(), d);
        let mut logits = vec_mat(&x, self.store.get(self.out_w));
        for (o, b) in logits.iter_mut().zip(self.store.get(self.out_b).data()) {
            *o += b;
        }
        Ok(logits)
    }

    fn plain_attention<K: AsRef<[f64]>>(&self, q: &[f64], keys: &[K], values: &[K], mask: &[bool], wo: ParamId) -> Vec<f64> {
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; self.cfg.dim];
        let mut w = vec![0.0; keys.len()];
        for a in 0..self.cfg.heads {
            let (lo, hi) = (a * dh, (a + 1) * dh);
            for (j, k) in keys.iter().enumerate() {
                w[j] = if mask[j] {
                    crate::numeric::dot(&q[lo..hi], &k.as_ref()[lo..hi]) * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            crate::numeric::softmax_in_place(&mut w);
            for (j, v) in values.iter().enumerate() {
                if w[j] != 0.0 {
                    for (o, &x) in out[lo..hi].iter_mut().zip(&v.as_ref()[lo..hi]) {
                        *o += w[j] * x;
                    }
                }
            }
        }
        vec_mat(&out, self.store.get(wo))
    }

    fn plain_add_norm(&self, x: &[f64], y: &[f64], ln: Ln) -> Vec<f64> {
        let s: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let (g, b) = (self.store.get(ln.0).data(), self.store.get(ln.1).data());
        s.iter()
            .enumerate()
            .map(|(c, v)| g[c] * ((v - mean) * inv) + b[c])
            .collect()
    }

    fn plain_ff(&self, x: &[f64], ff: &Ff) -> Vec<f64> {
        let mut h = vec_mat(x, self.store.get(ff.w1));
        for (v, b) in h.iter_mut().zip(self.store.get(ff.b1).data()) {
            *v = (*v + b).max(0.0);
        }
        let mut o = vec_mat(&h, self.store.get(ff.w2));
        for (v, b) in o.iter_mut().zip(self.store.get(ff.b2).data()) {
            *v += b;
        }
        o
    }
}

/// Plain copies of one attention block's parameters.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
    /// `(U^Q, U^K, U^V, [s_Q, s_K, s_V])`.
    pub user: Option<(Tensor, Tensor, Tensor, [f64; 3])>,
}

fn count_params(cfg: &TransformerConfig) -> usize {
    let enc = 4 + 4 + 4 + if cfg.pos == PosEncoding::Relation { 9 } else { 0 };
    let dec = 4 + 4 + 6 + 4;
    cfg.layers * (enc + dec) + 3
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    crate::numeric::matmul_into(x, w.data(), &mut out, 1, w.rows(), w.cols());
    out
}

fn key_mask(valid: &[bool], rows: usize) -> Tensor {
    let row: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { f64::NEG_INFINITY }).collect();
    let mut data = Vec::with_capacity(rows * row.len());
    for _ in 0..rows {
        data.extend_from_slice(&row);
    }
    Tensor::matrix(rows, valid.len(), data)
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(t, t);
    for i in 0..t {
        for j in i + 1..t {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}

/// Encoder output prepared for incremental decoding.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Tensor,
    pub mask: Vec<bool>,
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

/// Self-attention cache of one partial hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One training example: the user's other items and the target's tokens.
#[derive(Clone, Debug)]
pub struct Instance {
    pub user: usize,
    pub item: usize,
    pub input: EncodedSequence,
    pub target: Vec<usize>,
}

/// Seed for everything derived from one `(user, item)` pair.
pub fn pair_seed(seed: u64, user: usize, item: usize) -> u64 {
    let mut z = seed ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (item as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Encoder input for ranking on behalf of `user`: all training items.
pub fn user_input(
    dataset: &InteractionDataset,
    reps: &Representations,
    user: usize,
    max_len: usize,
    seed: u64,
) -> Result<EncodedSequence, RecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, user, usize::MAX));
    embed_input(user, dataset.train_items(user), &reps.items, max_len, &mut rng)
}

/// One instance per training pair whose user has at least one other
/// training item.
pub fn build_instances(
    dataset: &InteractionDataset,
    reps: &Representations,
    registry: &RecIdRegistry,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Instance>, RecError> {
    let mut out = Vec::new();
    for (u, i) in dataset.train_pairs() {
        if i >= registry.n_items() {
            return Err(RecError::UnknownItem(i));
        }
        let others: Vec<usize> = dataset.train_items(u).iter().copied().filter(|&j| j != i).collect();
        if others.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, u, i));
        out.push(Instance {
            user: u,
            item: i,
            input: embed_input(u, &others, &reps.items, max_len, &mut rng)?,
            target: registry.tokens(i),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RecTrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub k: usize,
    pub seed: u64,
    /// Skip validation (and early stopping) entirely.
    pub validate: bool,
}

impl Default for RecTrainConfig {
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
            validate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub valid_recall: Option<f64>,
}

impl fmt::Display for RecEpoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} loss={:.6}", self.epoch, self.loss)?;
        if let Some(r) = self.valid_recall {
            write!(f, " valid_recall={r:.6}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RecLog {
    pub epochs: Vec<RecEpoch>,
    pub best_epoch: Option<usize>,
}

/// Gradients of the mean per-token cross-entropy over `batch`.
pub fn batch_loss_and_grads(
    model: &Transformer,
    reps: &Representations,
    batch: &[&Instance],
) -> Result<(f64, ParamGrads), RecError> {
    // a fresh tape every few instances keeps the recorded graph small
    const CHUNK: usize = 16;
    let tokens: usize = batch.iter().map(|i| i.target.len()).sum();
    let norm = 1.0 / tokens.max(1) as f64;
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<(f64, ParamGrads), RecError> {
            let mut tape = Tape::new(&model.store);
            let mut terms = Vec::with_capacity(chunk.len());
            for inst in chunk {
                terms.push(model.sequence_log_prob(&mut tape, &inst.input, reps.users.row(inst.user), &inst.target)?);
            }
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = tape.add(sum, t)?;
            }
            let loss = tape.scale(sum, -norm);
            Ok((tape.value(loss).item(), tape.backward(loss)?.into_param_grads()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    // summed in chunk order so the result does not depend on thread count
    let mut grads = ParamGrads::new(model.store.len());
    let mut total = 0.0;
    for (loss, g) in &parts {
        total += loss;
        grads.accumulate(g);
    }
    Ok((total, grads))
}

/// Teacher-forced training with validation early stopping; the best
/// epoch's parameters are restored at the end.
pub fn train(
    model: &mut Transformer,
    dataset: &InteractionDataset,
    reps: &Representations,
    registry: &RecIdRegistry,
    cfg: &RecTrainConfig,
) -> Result<RecLog, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Invalid("batch size must be positive".into()));
    }
    let instances = build_instances(dataset, reps, registry, model.cfg.max_len, cfg.seed)
        .map_err(|e| TrainError::Invalid(e.to_string()))?;
    if instances.is_empty() {
        return Err(TrainError::Invalid("no training instances (every user has a single item)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.l2);
    let validate = cfg.validate && (0..dataset.n_users()).any(|u| !dataset.valid_items(u).is_empty());
    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut best: Option<ParamStore> = None;
    let mut log = RecLog::default();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&Instance> = batch.iter().map(|&i| &instances[i]).collect();
            let (loss, grads) = batch_loss_and_grads(model, reps, &refs).map_err(|e| match e {
                RecError::Numeric(n) => TrainError::Numeric(n),
                other => TrainError::Invalid(other.to_string()),
            })?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::Diverged {
                    stage: "transformer",
                    epoch,
                    step,
                    loss,
                    detail: format!("gradient norm {}", grads.global_norm()),
                });
            }
            opt.step(&mut model.store, &grads);
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let mut entry = RecEpoch {
            epoch,
            loss: loss_sum / batches as f64,
            valid_recall: None,
        };
        if validate {
            let report = evaluate(model, dataset, reps, registry, Split::Valid, cfg.k, cfg.seed)
                .map_err(|e| TrainError::Invalid(e.to_string()))?;
            entry.valid_recall = Some(report.recall);
            let progress = stopper.observe(epoch, report.recall);
            log.epochs.push(entry);
            match progress {
                Progress::Improved => best = Some(model.store.clone()),
                Progress::Stale => {}
                Progress::Stop => break,
            }
        } else {
            log.epochs.push(entry);
        }
    }
    if let Some(store) = best {
        model.store = store;
    }
    log.best_epoch = stopper.best().map(|(e, _)| e);
    Ok(log)
}

/// Top-`k` items for `user`, excluding training items.
pub fn recommend(
    model: &Transformer,
    dataset: &InteractionDataset,
    reps: &Representations,
    registry: &RecIdRegistry,
    user: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>, RecError> {
    let input = user_input(dataset, reps, user, model.cfg.max_len, seed)?;
    let memory = model.memory(&input, reps.users.row(user))?;
    let exclude = dataset.train_items(user);
    let result = beam_search(model, &memory, registry, k, k + exclude.len(), exclude)?;
    Ok(result.items)
}

/// Recall@K / NDCG@K of generated recommendations on `split`.
pub fn evaluate(
    model: &Transformer,
    dataset: &InteractionDataset,
    reps: &Representations,
    registry: &RecIdRegistry,
    split: Split,
    k: usize,
    seed: u64,
) -> Result<MetricReport, RecError> {
    let rows = (0..dataset.n_users())
        .into_par_iter()
        .filter(|&u| !dataset.items_in(u, split).is_empty() && !dataset.train_items(u).is_empty())
        .map(|u| {
            let recs: Vec<usize> = recommend(model, dataset, reps, registry, u, k, seed)?
                .into_iter()
                .map(|(i, _)| i)
                .collect();
            Ok((u, recs))
        })
        .collect::<Result<Vec<_>, RecError>>()?;
    Ok(MetricReport::collect(
        k,
        rows.iter().map(|(u, r)| (*u, r.as_slice(), dataset.items_in(*u, split))),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradient_check;

    pub(crate) fn tiny_config(pos: PosEncoding) -> TransformerConfig {
        TransformerConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            ff_mult: 2,
            max_len: 5,
            vocab_size: 12,
            id_len: 3,
            pos,
        }
    }

    fn rand_t(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn sequence(n_real: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> EncodedSequence {
        let reps = rand_t(n_real, d, rng);
        let items: Vec<usize> = (0..n_real).collect();
        embed_input(0, &items, &reps, n, rng).unwrap()
    }

    #[test]
    fn embedding_pads_and_masks() {
        let reps = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = embed_input(0, &[2, 0], &reps, 4, &mut rng).unwrap();
        assert_eq!(s.mask, vec![true, true, false, false]);
        assert_eq!(s.tokens, vec![3, 1, 0, 0]);
        assert_eq!(s.embeddings.data(), &[5.0, 6.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let full = embed_input(0, &[0, 1, 2], &reps, 3, &mut rng).unwrap();
        assert!(full.mask.iter().all(|&m| m));
        assert!(matches!(embed_input(7, &[], &reps, 3, &mut rng), Err(RecError::EmptyHistory { user: 7 })));
    }

    #[test]
    fn subsampling_is_seeded() {
        let reps = rand_t(30, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let items: Vec<usize> = (0..30).collect();
        let a = embed_input(0, &items, &reps, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = embed_input(0, &items, &reps, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn logits_cover_the_vocabulary_and_respect_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Transformer::new(tiny_config(PosEncoding::Relation), &mut rng).unwrap();
        let seq = sequence(3, 5, 8, &mut rng);
        let hu = vec![0.3; 8];
        let mut tape = Tape::new(&m.store);
        let mem = m.encode(&mut tape, &seq, &hu).unwrap();
        let short = m.decode(&mut tape, mem, &seq.mask, &[BOS]).unwrap();
        let long = m.decode(&mut tape, mem, &seq.mask, &[BOS, 4]).unwrap();
        assert_eq!(tape.value(short).shape(), &[1, 12]);
        assert_eq!(tape.value(long).row(0), tape.value(short).row(0));
        let longer = m.decode(&mut tape, mem, &seq.mask, &[BOS, 4, 9]).unwrap();
        for r in 0..2 {
            assert_eq!(tape.value(longer).row(r), tape.value(long).row(r));
        }
    }

    #[test]
    fn padded_rows_do_not_leak_into_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Transformer::new(tiny_config(PosEncoding::Relation), &mut rng).unwrap();
        let seq = sequence(3, 5, 8, &mut rng);
        let mut changed = seq.clone();
        changed.embeddings.row_mut(4).copy_from_slice(&[9.0; 8]);
        let hu = vec![0.1; 8];
        let mut tape = Tape::new(&m.store);
        let a = m.encode(&mut tape, &seq, &hu).unwrap();
        let b = m.encode(&mut tape, &changed, &hu).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(a).row(r), tape.value(b).row(r));
        }
        assert_eq!(tape.value(a).shape(), &[5, 8]);
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Transformer::new(tiny_config(PosEncoding::None), &mut rng).unwrap();
        let seq = sequence(4, 5, 8, &mut rng);
        let mut tape = Tape::new(&m.store);
        let mem = m.encode_layers(&mut tape, &seq, &[0.0; 8], 0).unwrap();
        assert_eq!(tape.value(mem), &seq.embeddings);
    }

    #[test]
    fn cached_decoding_matches_teacher_forcing() {
        for pos in [PosEncoding::Relation, PosEncoding::Sinusoid, PosEncoding::None] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut cfg = tiny_config(pos);
            cfg.layers = 2;
            let m = Transformer::new(cfg, &mut rng).unwrap();
            let seq = sequence(4, 5, 8, &mut rng);
            let hu: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tokens = [BOS, 3, 7];
            let mut tape = Tape::new(&m.store);
            let mem = m.encode(&mut tape, &seq, &hu).unwrap();
            let logits = m.decode(&mut tape, mem, &seq.mask, &tokens).unwrap();
            let memory = m.memory(&seq, &hu).unwrap();
            let mut state = m.start_state();
            for (t, &tok) in tokens.iter().enumerate() {
                let step = m.step(&memory, &mut state, tok).unwrap();
                for (a, b) in step.iter().zip(tape.value(logits).row(t)) {
                    assert!((a - b).abs() < 1e-9, "{pos}: step {t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn uniform_logits_cost_log_vocab_per_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Transformer::new(tiny_config(PosEncoding::None), &mut rng).unwrap();
        let w = m.out_w;
        let t = m.store.get_mut(w);
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let seq = sequence(2, 5, 8, &mut rng);
        let mut tape = Tape::new(&m.store);
        let lp = m.sequence_log_prob(&mut tape, &seq, &[0.0; 8], &[4, 6, 11]).unwrap();
        assert!((tape.value(lp).item() + 3.0 * 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = tiny_config(PosEncoding::Relation);
        cfg.heads = 1;
        cfg.dim = 4;
        cfg.max_len = 3;
        let mut m = Transformer::new(cfg, &mut rng).unwrap();
        vary_user_scalars(&mut m, &mut rng);
        let seq = sequence(2, 3, 4, &mut rng);
        let hu: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut store = m.store.clone();
        let report = gradient_check(&mut store, &[], 1e-5, |tape| {
            m.sequence_log_prob(tape, &seq, &hu, &[5, 2, 11])
                .map_err(|e| match e {
                    RecError::Numeric(n) => n,
                    other => panic!("{other}"),
                })
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.checked, m.store.num_values());
    }

    /// Attention written out pair by pair from its definition.
    pub(crate) fn elementwise_attention(w: &AttentionWeights, e: &Tensor, valid: &[bool]) -> Tensor {
        let (n, d) = (e.rows(), e.cols());
        let dh = d / w.heads;
        let proj = |m: &Tensor, i: usize, col: usize, scale: f64| -> f64 {
            (0..d).map(|r| e.get(i, r) * m.get(r, col)).sum::<f64>() * scale
        };
        let mut cat = Tensor::zeros(n, d);
        for a in 0..w.heads {
            for i in 0..n {
                let mut eps = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if !valid[j] {
                        continue;
                    }
                    let mut v = 0.0;
                    for c in 0..dh {
                        v += proj(&w.wq, i, a * dh + c, 1.0) * proj(&w.wk, j, a * dh + c, 1.0);
                    }
                    if let Some((uq, uk, _, s)) = &w.user {
                        for c in 0..dh {
                            v += proj(uq, i, c, s[0]) * proj(uk, j, c, s[1]);
                        }
                    }
                    eps[j] = v / (dh as f64).sqrt();
                }
                let max = eps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = eps.iter().map(|x| (x - max).exp()).sum();
                for j in 0..n {
                    let alpha = (eps[j] - max).exp() / z;
                    for c in 0..dh {
                        let mut val = proj(&w.wv, j, a * dh + c, 1.0);
                        if let Some((_, _, uv, s)) = &w.user {
                            val += proj(uv, j, c, s[2]);
                        }
                        let cur = cat.get(i, a * dh + c);
                        cat.set(i, a * dh + c, cur + alpha * val);
                    }
                }
            }
        }
        cat.matmul(&w.wo).unwrap()
    }

    fn vary_user_scalars(m: &mut Transformer, rng: &mut ChaCha8Rng) {
        for l in &m.enc {
            for (w, _) in l.user.as_ref().map(|u| u.scalars).into_iter().flatten() {
                m.store.get_mut(w).data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
            }
        }
    }

    fn relation_model(seed: u64, d: usize, heads: usize, n: usize) -> Transformer {
        let mut cfg = tiny_config(PosEncoding::Relation);
        cfg.dim = d;
        cfg.heads = heads;
        cfg.max_len = n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Transformer::new(cfg, &mut rng).unwrap();
        vary_user_scalars(&mut m, &mut rng);
        m
    }

    #[test]
    fn fresh_user_scalars_are_one_for_everyone() {
        let m = Transformer::new(tiny_config(PosEncoding::Relation), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        for hu in [[0.0; 8], [3.0; 8]] {
            let (_, _, _, s) = m.encoder_attention_weights(0, &hu).user.unwrap();
            assert_eq!(s, [1.0; 3]);
        }
    }

    #[test]
    fn fused_attention_matches_elementwise_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for trial in 0..20 {
            let m = relation_model(trial, 16, 4, 8);
            let e = rand_t(8, 16, &mut rng);
            let hu: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let valid: Vec<bool> = (0..8).map(|j| j < 5 + trial as usize % 4).collect();
            let (fused, _) = m.encoder_attention(0, &e, &valid, &hu, true).unwrap();
            let oracle = elementwise_attention(&m.encoder_attention_weights(0, &hu), &e, &valid);
            assert!(fused.max_abs_diff(&oracle) < 1e-6);
        }
    }

    #[test]
    fn zero_user_scalars_reduce_to_standard_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut m = relation_model(1, 16, 4, 8);
        m.set_user_scalars(0.0);
        let e = rand_t(8, 16, &mut rng);
        let hu: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let valid = vec![true; 8];
        let (with, _) = m.encoder_attention(0, &e, &valid, &hu, true).unwrap();
        let (without, _) = m.encoder_attention(0, &e, &valid, &hu, false).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn uniform_scores_average_the_values() {
        // zero query weights and zero user scalars make every score 0
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut m = relation_model(2, 8, 2, 4);
        m.set_user_scalars(0.0);
        let wq = m.enc[0].attn.wq;
        m.store.get_mut(wq).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let e = rand_t(4, 8, &mut rng);
        let valid = vec![true, true, true, false];
        let (out, alphas) = m.encoder_attention(0, &e, &valid, &[0.0; 8], true).unwrap();
        let w = m.encoder_attention_weights(0, &[0.0; 8]);
        let v = e.slice_rows(0, 3).matmul(&w.wv).unwrap();
        let mut mean = Tensor::zeros(1, 8);
        for r in 0..3 {
            mean = mean.add(&v.slice_rows(r, r + 1)).unwrap();
        }
        let expected = mean.scale(1.0 / 3.0).matmul(&w.wo).unwrap();
        for i in 0..4 {
            for c in 0..8 {
                assert!((out.get(i, c) - expected.get(0, c)).abs() < 1e-12);
            }
        }
        for a in &alphas {
            for i in 0..4 {
                assert_eq!(a.get(i, 3), 0.0);
            }
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let m = relation_model(3, 8, 1, 1);
        let e = rand_t(1, 8, &mut rng);
        let hu: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (out, alphas) = m.encoder_attention(0, &e, &[true], &hu, true).unwrap();
        assert_eq!(alphas[0].item(), 1.0);
        let w = m.encoder_attention_weights(0, &hu);
        let (_, _, uv, s) = w.user.as_ref().unwrap();
        let wv_u = w.wv.add(&uv.scale(s[2])).unwrap();
        let expected = e.matmul(&wv_u).unwrap().matmul(&w.wo).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn fully_masked_sequence_is_rejected() {
        let m = relation_model(4, 8, 2, 3);
        assert!(m.encoder_attention(0, &Tensor::zeros(3, 8), &[false; 3], &[0.0; 8], true).is_err());
    }

    #[test]
    fn user_matrices_are_scaled_foundations() {
        let m = relation_model(5, 8, 2, 3);
        let a = m.encoder_attention_weights(0, &[0.5; 8]);
        let b = m.encoder_attention_weights(0, &[-0.2; 8]);
        let (ua, sa) = a.user.as_ref().map(|u| (u.0.clone(), u.3)).unwrap();
        let (ub, sb) = b.user.as_ref().map(|u| (u.0.clone(), u.3)).unwrap();
        assert_eq!(ua, ub);
        assert_ne!(sa[0], sb[0]);
        let mut m2 = m.clone();
        m2.set_user_scalars(2.0);
        assert_eq!(m2.encoder_attention_weights(0, &[0.7; 8]).user.unwrap().3, [2.0; 3]);
    }

    proptest::proptest! {
        #[test]
        fn attention_rows_are_distributions(seed in 0u64..200, n_valid in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = relation_model(seed, 8, 2, 6);
            let e = rand_t(6, 8, &mut rng);
            let hu: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let valid: Vec<bool> = (0..6).map(|j| j < n_valid).collect();
            let (_, alphas) = m.encoder_attention(0, &e, &valid, &hu, true).unwrap();
            for a in &alphas {
                for i in 0..6 {
                    let row: f64 = a.row(i).iter().sum();
                    proptest::prop_assert!((row - 1.0).abs() < 1e-6);
                    for j in n_valid..6 {
                        proptest::prop_assert_eq!(a.get(i, j), 0.0);
                    }
                }
            }
        }

        #[test]
        fn encoder_is_permutation_equivariant_without_order_signal(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = tiny_config(PosEncoding::Relation);
            cfg.max_len = 5;
            let mut m = Transformer::new(cfg, &mut rng).unwrap();
            m.set_user_scalars(0.0);
            let reps = rand_t(5, 8, &mut rng);
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let a = embed_input(0, &[0, 1, 2, 3, 4], &reps, 5, &mut rng).unwrap();
            let b = embed_input(0, &perm, &reps, 5, &mut rng).unwrap();
            let mut tape = Tape::new(&m.store);
            let ma = m.encode(&mut tape, &a, &[0.0; 8]).unwrap();
            let mb = m.encode(&mut tape, &b, &[0.0; 8]).unwrap();
            for (row, &p) in perm.iter().enumerate() {
                for c in 0..8 {
                    proptest::prop_assert!((tape.value(mb).get(row, c) - tape.value(ma).get(p, c)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn checkpoint_binding_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny_config(PosEncoding::Relation);
        let m = Transformer::new(cfg.clone(), &mut rng).unwrap();
        assert!(Transformer::from_store(cfg.clone(), m.store.clone()).is_ok());
        let mut other = cfg.clone();
        other.dim = 4;
        assert!(Transformer::from_store(other, m.store.clone()).is_err());
        let mut other = cfg;
        other.pos = PosEncoding::None;
        assert!(Transformer::from_store(other, m.store.clone()).is_err());
    }
}
