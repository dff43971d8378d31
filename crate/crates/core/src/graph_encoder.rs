//! Graph convolution over the user-item graph, seeded with projected
//! multimodal features and free CF embeddings.

use std::rc::Rc;

use rand::Rng;

use crate::data::{BipartiteGraph, InteractionDataset, ItemFeatureBank, Split};
use crate::eval::{top_k, MetricReport};
use crate::numeric::{xavier_uniform, NumericError, ParamId, ParamStore, SparseRows, Tape, Tensor, Var, LEAKY_SLOPE};

/// Constant inputs shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub features: Tensor,
    pub item_agg: Rc<SparseRows>,
    pub user_agg: Rc<SparseRows>,
}

impl GraphContext {
    pub fn new(bank: &ItemFeatureBank, graph: &BipartiteGraph) -> Self {
        Self {
            features: bank.concatenated(),
            item_agg: graph.item_mean_aggregator(),
            user_agg: graph.user_mean_aggregator(),
        }
    }
}

/// Final user and item representations.
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    pub users: Tensor,
    pub items: Tensor,
}

impl Representations {
    pub fn dim(&self) -> usize {
        self.items.cols()
    }
}

/// Learned parameters of the graph encoder.
///
/// Items start from `features · W ⊕ cf`, users from a free `2D` embedding.
/// Every layer shares its self and neighbour weights between the two node
/// types, and a final projection maps the `2D` node states to `D`.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub store: ParamStore,
    proj: ParamId,
    item_cf: ParamId,
    user_init: ParamId,
    layers: Vec<(ParamId, ParamId)>,
    out_proj: ParamId,
    dim: usize,
}

impl GraphEncoder {
    pub fn new<R: Rng + ?Sized>(
        n_users: usize,
        n_items: usize,
        feature_dim: usize,
        dim: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        assert!(layers >= 1, "graph encoder needs at least one layer");
        let mut store = ParamStore::new();
        let proj = store.add("gcn.proj", xavier_uniform(feature_dim, dim, rng));
        let item_cf = store.add("gcn.item_cf", xavier_uniform(n_items, dim, rng));
        let user_init = store.add("gcn.user_init", xavier_uniform(n_users, 2 * dim, rng));
        let layers = (0..layers)
            .map(|l| {
                (
                    store.add(format!("gcn.{l}.w_self"), xavier_uniform(2 * dim, 2 * dim, rng)),
                    store.add(format!("gcn.{l}.w_neigh"), xavier_uniform(2 * dim, 2 * dim, rng)),
                )
            })
            .collect();
        let out_proj = store.add("gcn.out_proj", xavier_uniform(2 * dim, dim, rng));
        Self {
            store,
            proj,
            item_cf,
            user_init,
            layers,
            out_proj,
            dim,
        }
    }

    /// Rebuilds the handles for a store loaded from disk.
    pub fn from_store(store: ParamStore) -> Option<Self> {
        let proj = store.find("gcn.proj")?;
        let item_cf = store.find("gcn.item_cf")?;
        let user_init = store.find("gcn.user_init")?;
        let mut layers = Vec::new();
        while let (Some(a), Some(b)) = (
            store.find(&format!("gcn.{}.w_self", layers.len())),
            store.find(&format!("gcn.{}.w_neigh", layers.len())),
        ) {
            layers.push((a, b));
        }
        let out_proj = store.find("gcn.out_proj")?;
        let dim = store.get(proj).cols();
        if layers.is_empty() {
            return None;
        }
        Some(Self {
            store,
            proj,
            item_cf,
            user_init,
            layers,
            out_proj,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn proj_id(&self) -> ParamId {
        self.proj
    }

    pub fn item_cf_id(&self) -> ParamId {
        self.item_cf
    }

    pub fn layer_ids(&self, l: usize) -> (ParamId, ParamId) {
        self.layers[l]
    }

    /// `h_i^(0) = (f^v ⊕ f^a ⊕ f^t) W ⊕ h_i^c` for all items.
    pub fn init_item_nodes(&self, tape: &mut Tape<'_>, features: Var) -> Result<Var, NumericError> {
        let w = tape.param(self.proj);
        let hm = tape.matmul(features, w)?;
        let cf = tape.param(self.item_cf);
        tape.concat_cols(&[hm, cf])
    }

    /// Runs every layer and the output projection; returns `(users, items)`.
    pub fn forward(&self, tape: &mut Tape<'_>, ctx: &GraphContext) -> Result<(Var, Var), NumericError> {
        let (users, items) = self.forward_layers(tape, ctx, self.layers.len())?;
        let p = tape.param(self.out_proj);
        Ok((tape.matmul(users, p)?, tape.matmul(items, p)?))
    }

    /// Node states after the first `depth` layers, before projection.
    pub fn forward_layers(
        &self,
        tape: &mut Tape<'_>,
        ctx: &GraphContext,
        depth: usize,
    ) -> Result<(Var, Var), NumericError> {
        let feats = tape.constant(ctx.features.clone());
        let mut items = self.init_item_nodes(tape, feats)?;
        let mut users = tape.param(self.user_init);
        for &(w1, w2) in &self.layers[..depth] {
            let (w1, w2) = (tape.param(w1), tape.param(w2));
            let next_items = gcn_layer(tape, items, users, &ctx.item_agg, w1, w2)?;
            let next_users = gcn_layer(tape, users, items, &ctx.user_agg, w1, w2)?;
            items = next_items;
            users = next_users;
        }
        Ok((users, items))
    }

    /// Final representations under the current parameters.
    pub fn encode_all(&self, ctx: &GraphContext) -> Result<Representations, NumericError> {
        let mut tape = Tape::new(&self.store);
        let (u, i) = self.forward(&mut tape, ctx)?;
        Ok(Representations {
            users: tape.value(u).clone(),
            items: tape.value(i).clone(),
        })
    }
}

/// Recall@K / NDCG@K of inner-product retrieval with the representations,
/// excluding each user's training items.
pub fn evaluate_reps(reps: &Representations, dataset: &InteractionDataset, split: Split, k: usize) -> MetricReport {
    let scores = reps.users.matmul_bt(&reps.items).expect("matching widths");
    let recs: Vec<Vec<usize>> = (0..dataset.n_users())
        .map(|u| {
            if dataset.items_in(u, split).is_empty() {
                return Vec::new();
            }
            top_k(scores.row(u), k, dataset.train_items(u))
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

/// One propagation step for one side of the graph:
/// `LeakyReLU(h W1 + mean_{n ∈ N} h_n W2)`. Rows without neighbours keep
/// only the self term.
pub fn gcn_layer(
    tape: &mut Tape<'_>,
    own: Var,
    other: Var,
    agg: &Rc<SparseRows>,
    w1: Var,
    w2: Var,
) -> Result<Var, NumericError> {
    let self_term = tape.matmul(own, w1)?;
    let mean = tape.spmm(agg.clone(), other)?;
    let neigh = tape.matmul(mean, w2)?;
    let pre = tape.add(self_term, neigh)?;
    Ok(tape.leaky_relu(pre, LEAKY_SLOPE))
}

/// `Σ −ln σ(h_u·h_i − h_u·h_j)` over `(u, i, j)` triples.
pub fn bpr_loss(
    tape: &mut Tape<'_>,
    users: Var,
    items: Var,
    triples: &[(usize, usize, usize)],
) -> Result<Var, NumericError> {
    let us = tape.gather_rows(users, Rc::new(triples.iter().map(|t| t.0).collect()));
    let pos = tape.gather_rows(items, Rc::new(triples.iter().map(|t| t.1).collect()));
    let neg = tape.gather_rows(items, Rc::new(triples.iter().map(|t| t.2).collect()));
    let diff = tape.sub(pos, neg)?;
    let prod = tape.mul(us, diff)?;
    // row sums via a ones column
    let ones = tape.constant(Tensor::filled(tape.value(prod).cols(), 1, 1.0));
    let margins = tape.matmul(prod, ones)?;
    let ls = tape.log_sigmoid(margins);
    let total = tape.sum(ls);
    Ok(tape.scale(total, -1.0))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::numeric::gradient_check;

    fn scalar_bpr(gap: f64) -> f64 {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let users = tape.constant(Tensor::matrix(1, 1, vec![1.0]));
        let items = tape.constant(Tensor::matrix(2, 1, vec![gap, 0.0]));
        let l = bpr_loss(&mut tape, users, items, &[(0, 0, 1)]).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn bpr_values() {
        assert!((scalar_bpr(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // -ln σ(2) = ln(1 + e^-2)
        let oracle = (1.0 + (-2.0f64).exp()).ln();
        assert!((scalar_bpr(2.0) - oracle).abs() < 1e-15);
        assert!((scalar_bpr(2.0) - 0.126928).abs() < 1e-6);
        assert!(scalar_bpr(60.0) < 1e-20);
    }

    #[test]
    fn bpr_strictly_positive_and_decreasing() {
        let mut prev = f64::INFINITY;
        for k in -20..=20 {
            let v = scalar_bpr(k as f64 * 0.5);
            assert!(v > 0.0 && v < prev);
            prev = v;
        }
    }

    #[test]
    fn layer_with_one_neighbor_and_identity_weights() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let own = tape.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let other = tape.constant(Tensor::row_vector(vec![0.5, 0.25]));
        let eye = tape.constant(Tensor::identity(2));
        let agg = Rc::new(SparseRows {
            cols: 1,
            rows: vec![vec![(0, 1.0)]],
        });
        let out = gcn_layer(&mut tape, own, other, &agg, eye, eye).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, 2.25]);

        let empty = Rc::new(SparseRows {
            cols: 1,
            rows: vec![vec![]],
        });
        let neg = tape.constant(Tensor::row_vector(vec![-1.0, 2.0]));
        let out = gcn_layer(&mut tape, neg, other, &empty, eye, eye).unwrap();
        assert_eq!(tape.value(out).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn duplicate_neighbors_do_not_change_mean() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let own = tape.constant(Tensor::row_vector(vec![0.3, -0.2]));
        let others = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]));
        let eye = tape.constant(Tensor::identity(2));
        let one = Rc::new(SparseRows {
            cols: 2,
            rows: vec![vec![(0, 1.0)]],
        });
        let two = Rc::new(SparseRows {
            cols: 2,
            rows: vec![vec![(0, 0.5), (1, 0.5)]],
        });
        let a = gcn_layer(&mut tape, own, others, &one, eye, eye).unwrap();
        let b = gcn_layer(&mut tape, own, others, &two, eye, eye).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn item_init_concatenates_projection_and_cf() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = GraphEncoder::new(2, 3, 4, 64, 2, &mut rng);
        *enc.store.get_mut(enc.proj) = Tensor::zeros(4, 64);
        let mut tape = Tape::new(&enc.store);
        let feats = tape.constant(Tensor::zeros(3, 4));
        let h0 = enc.init_item_nodes(&mut tape, feats).unwrap();
        let v = tape.value(h0);
        assert_eq!(v.cols(), 128);
        let cf = enc.store.get(enc.item_cf);
        for r in 0..3 {
            assert!(v.row(r)[..64].iter().all(|&x| x == 0.0));
            assert_eq!(&v.row(r)[64..], cf.row(r));
        }
    }

    #[test]
    fn unit_feature_selects_projection_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = GraphEncoder::new(1, 1, 3, 4, 1, &mut rng);
        let mut tape = Tape::new(&enc.store);
        let feats = tape.constant(Tensor::row_vector(vec![0.0, 1.0, 0.0]));
        let h0 = enc.init_item_nodes(&mut tape, feats).unwrap();
        assert_eq!(&tape.value(h0).row(0)[..4], enc.store.get(enc.proj).row(1));
    }

    #[test]
    fn encode_all_shapes_and_determinism() {
        let spec = SynthSpec {
            users: 20,
            items: 30,
            density: 0.2,
            dims: [Some(8), None, Some(4)],
            ..SynthSpec::default()
        };
        let (ds, bank, _) = synth_dataset(&spec).unwrap();
        let ctx = GraphContext::new(&bank, &BipartiteGraph::build(&ds));
        let enc = GraphEncoder::new(20, 30, 12, 64, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let a = enc.encode_all(&ctx).unwrap();
        assert_eq!((a.users.rows(), a.users.cols()), (20, 64));
        assert_eq!((a.items.rows(), a.items.cols()), (30, 64));
        assert_eq!(a, enc.encode_all(&ctx).unwrap());
        let enc2 = GraphEncoder::new(20, 30, 12, 64, 2, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, enc2.encode_all(&ctx).unwrap());
    }

    #[test]
    fn single_layer_is_one_gcn_step_then_projection() {
        let spec = SynthSpec {
            users: 6,
            items: 8,
            density: 0.4,
            dims: [Some(5), None, None],
            ..SynthSpec::default()
        };
        let (ds, bank, _) = synth_dataset(&spec).unwrap();
        let ctx = GraphContext::new(&bank, &BipartiteGraph::build(&ds));
        let enc = GraphEncoder::new(6, 8, 5, 3, 1, &mut ChaCha8Rng::seed_from_u64(2));
        let reps = enc.encode_all(&ctx).unwrap();

        let mut tape = Tape::new(&enc.store);
        let feats = tape.constant(ctx.features.clone());
        let items = enc.init_item_nodes(&mut tape, feats).unwrap();
        let users = tape.param(enc.user_init);
        let (w1, w2) = (tape.param(enc.layers[0].0), tape.param(enc.layers[0].1));
        let i1 = gcn_layer(&mut tape, items, users, &ctx.item_agg, w1, w2).unwrap();
        let p = tape.param(enc.out_proj);
        let hi = tape.matmul(i1, p).unwrap();
        assert_eq!(tape.value(hi), &reps.items);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let spec = SynthSpec {
            users: 4,
            items: 4,
            density: 0.5,
            dims: [Some(3), Some(2), None],
            seed: 5,
            ..SynthSpec::default()
        };
        let (ds, bank, _) = synth_dataset(&spec).unwrap();
        let ctx = GraphContext::new(&bank, &BipartiteGraph::build(&ds));
        let mut enc = GraphEncoder::new(4, 4, 5, 3, 2, &mut ChaCha8Rng::seed_from_u64(8));
        let e = enc.clone();
        let triples = vec![(0, 1, 2), (1, 3, 0), (2, 0, 3), (3, 2, 1)];
        let report = gradient_check(&mut enc.store, &[], 1e-4, |t| {
            let (u, i) = e.forward(t, &ctx)?;
            bpr_loss(t, u, i, &triples)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
