use std::fmt;
use std::str::FromStr;

use super::{sgd_step, ParamGrads, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

/// First-order optimiser over one [`ParamStore`].
///
/// The L2 coefficient is folded into the gradient (`g + l2 * p`) for both
/// kinds, so SGD reproduces [`sgd_step`] exactly.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    l2: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, l2: f64) -> Self {
        assert!(lr > 0.0 && l2 >= 0.0, "lr must be > 0 and l2 >= 0");
        Self {
            kind,
            lr,
            l2,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(store, grads, self.lr, self.l2),
            OptimizerKind::Adam => self.adam(store, grads),
        }
    }

    fn adam(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(p.rows(), p.cols()), Tensor::zeros(p.rows(), p.cols())));
            let pd = p.data_mut();
            for (((pv, &gv), mv), vv) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gv = gv + self.l2 * *pv;
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_matches_free_function() {
        let mut a = ParamStore::new();
        let id = a.add("w", Tensor::row_vector(vec![1.0, -2.0]));
        let mut b = a.clone();
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::row_vector(vec![0.5, 0.25]));
        Optimizer::new(OptimizerKind::Sgd, 0.1, 1e-3).step(&mut a, &g);
        sgd_step(&mut b, &g, 0.1, 1e-3);
        assert_eq!(a.get(id), b.get(id));
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row_vector(vec![3.0, -4.0]));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, 0.0);
        for _ in 0..500 {
            let mut g = ParamGrads::new(1);
            g.set(id, s.get(id).scale(2.0));
            opt.step(&mut s, &g);
        }
        assert!(s.get(id).data().iter().all(|v| v.abs() < 1e-2), "{:?}", s.get(id));
    }
}
