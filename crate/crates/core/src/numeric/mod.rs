//! Dense linear algebra, reverse-mode differentiation and optimisers.

mod gradcheck;
mod optim;
pub mod tape;
mod tensor;

use rand::Rng;
use thiserror::Error;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Gradients, ParamGrads, SparseRows, Tape, Var};
pub use tensor::{log_softmax, Tensor};
pub(crate) use tensor::{dot, matmul_into, softmax_in_place};

/// Negative slope of every LeakyReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} cannot hold {values} values")]
    BadShape { shape: Vec<usize>, values: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Xavier/Glorot uniform initialisation of a `fan_in x fan_out` matrix.
pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Plain SGD with L2 penalty: `p <- p - lr * (g + l2 * p)`.
pub fn sgd_step(store: &mut ParamStore, grads: &ParamGrads, lr: f64, l2: f64) {
    for (id, g) in grads.iter() {
        let p = store.get_mut(id);
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * (gv + l2 * *pv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let t = Tensor::row_vector(vec![1.0, 1.0, 1.0]).softmax_rows();
        for v in t.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn leaky_relu_uses_one_percent_slope() {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(x, LEAKY_SLOPE);
        assert_eq!(tape.value(y).item(), -0.01);
    }

    #[test]
    fn concat_joins_vectors() {
        let a = Tensor::row_vector(vec![1.0, 2.0]);
        let b = Tensor::row_vector(vec![3.0]);
        assert_eq!(Tensor::concat_cols(&[&a, &b]).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn square_gradient() {
        let (s, id) = one_param(3.0);
        let mut tape = Tape::new(&s);
        let x = tape.param(id);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(id).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let (s, id) = one_param(0.0);
        let mut tape = Tape::new(&s);
        let x = tape.param(id);
        let y = tape.sigmoid(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(id).unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let s = ParamStore::new();
        let mut tape = Tape::new(&s);
        let x = tape.variable(Tensor::zeros(1, 2));
        assert!(matches!(tape.backward(x), Err(NumericError::NonScalarLoss { .. })));
    }

    #[test]
    fn stop_gradient_forward_and_backward() {
        let mut s = ParamStore::new();
        let x_id = s.add("x", Tensor::row_vector(vec![2.0, 3.0]));
        let mut tape = Tape::new(&s);
        let x = tape.param(x_id);
        let sg = tape.stop_gradient(x);
        assert_eq!(tape.value(sg).data(), &[2.0, 3.0]);
        let loss = tape.sum(sg);
        let g = tape.backward(loss).unwrap();
        assert!(g.param(x_id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn straight_through_passes_unit_gradient() {
        let mut s = ParamStore::new();
        let x_id = s.add("x", Tensor::row_vector(vec![1.0, 1.0]));
        let mut tape = Tape::new(&s);
        let x = tape.param(x_id);
        let y = tape.constant(Tensor::row_vector(vec![5.0, -2.0]));
        let diff = tape.sub(y, x).unwrap();
        let sg = tape.stop_gradient(diff);
        let st = tape.add(x, sg).unwrap();
        assert_eq!(tape.value(st).data(), &[5.0, -2.0]);
        let loss = tape.sum(st);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(x_id).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn straight_through_op_is_exact_forward() {
        let mut s = ParamStore::new();
        let x_id = s.add("x", Tensor::row_vector(vec![0.1, 0.7]));
        let mut tape = Tape::new(&s);
        let x = tape.param(x_id);
        let target = Tensor::row_vector(vec![0.3, -1.9]);
        let st = tape.straight_through(x, target.clone()).unwrap();
        assert_eq!(tape.value(st), &target);
        let w = tape.constant(Tensor::row_vector(vec![2.0, -3.0]));
        let y = tape.mul(st, w).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(x_id).unwrap().data(), &[2.0, -3.0]);
    }

    #[test]
    fn sgd_arithmetic() {
        let (mut s, id) = one_param(1.0);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::scalar(1.0));
        sgd_step(&mut s, &g, 0.001, 0.0);
        assert!((s.get(id).item() - 0.999).abs() < 1e-15);

        let (mut s, id) = one_param(1.0);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::scalar(0.0));
        sgd_step(&mut s, &g, 0.001, 1e-5);
        assert!((s.get(id).item() - (1.0 - 1e-8)).abs() < 1e-16);
        sgd_step(&mut s, &ParamGrads::new(1), 0.001, 0.0);
        assert!((s.get(id).item() - (1.0 - 1e-8)).abs() < 1e-16);
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let bound = (6.0f64 / 12.0).sqrt();
        let a = xavier_uniform(4, 8, &mut ChaCha8Rng::seed_from_u64(7));
        let b = xavier_uniform(4, 8, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn xavier_mean_is_near_zero() {
        let t = xavier_uniform(1000, 1000, &mut ChaCha8Rng::seed_from_u64(1));
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }
}
