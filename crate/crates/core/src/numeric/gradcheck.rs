//! Central finite-difference verification of tape gradients.

use super::{NumericError, ParamId, ParamStore, Tape, Var};

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Relative error with a floor on the magnitude so that gradients which are
/// zero analytically and numerically compare as equal.
pub(crate) fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares tape gradients with central differences of step `eps` for every
/// entry of every parameter in `params` (all parameters when empty).
pub fn gradient_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    loss: F,
) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NumericError>,
{
    let ids: Vec<ParamId> = if params.is_empty() {
        store.ids().collect()
    } else {
        params.to_vec()
    };
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?.into_param_grads()
    };
    let eval = |s: &ParamStore| -> Result<f64, NumericError> {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        let n = store.get(id).len();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let rel = rel_error(a, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::{SparseRows, Tensor, LEAKY_SLOPE};

    fn rand_t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn every_differentiable_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_t(3, 4, &mut rng));
        let b = store.add("b", rand_t(4, 5, &mut rng));
        let c = store.add("c", rand_t(3, 5, &mut rng));
        let bias = store.add("bias", rand_t(1, 5, &mut rng));
        let s = store.add("s", rand_t(1, 1, &mut rng));
        let gamma = store.add("gamma", rand_t(1, 5, &mut rng));
        let beta = store.add("beta", rand_t(1, 5, &mut rng));
        let adj = Rc::new(SparseRows {
            cols: 3,
            rows: vec![vec![(0, 0.5), (2, 0.5)], vec![], vec![(1, 1.0)], vec![(0, 1.0 / 3.0), (1, 1.0 / 3.0), (2, 1.0 / 3.0)]],
        });
        let report = gradient_check(&mut store, &[], 1e-4, |t| {
            let (a, b, c, bias, s, gamma, beta) =
                (t.param(a), t.param(b), t.param(c), t.param(bias), t.param(s), t.param(gamma), t.param(beta));
            let ab = t.matmul(a, b)?;
            let x = t.add_row(ab, bias)?;
            let x = t.mul(x, c)?;
            let x = t.leaky_relu(x, LEAKY_SLOPE);
            let y = t.matmul_bt(x, c)?;
            let y = t.softmax_rows(y);
            let z = t.matmul(y, c)?;
            let z = t.scale_by(s, z)?;
            let z = t.layer_norm(z, gamma, beta, 1e-5)?;
            let zs = t.sigmoid(z);
            let zl = t.log_sigmoid(z);
            let zr = t.relu(z);
            let w = t.concat_cols(&[zs, zl, zr])?;
            let w2 = t.slice_cols(w, 2, 9);
            let top = t.slice_rows(w2, 0, 2);
            let bottom = t.slice_rows(w2, 1, 3);
            let w2 = t.concat_rows(&[top, bottom])?;
            let g = t.gather_rows(w2, Rc::new(vec![3, 0, 2]));
            let g = t.spmm(adj.clone(), g)?;
            let ls = t.log_softmax_rows(g);
            let picked = t.pick_sum(ls, Rc::new(vec![0, 3, 6, 1]))?;
            let sq = t.sq_l2_dist(z, c)?;
            let sq = t.scale(sq, 0.1);
            let tot = t.sub(picked, sq)?;
            let sum_g = t.sum(g);
            t.add(tot, sum_g)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.checked, 12 + 20 + 15 + 5 + 1 + 5 + 5);
    }
}
