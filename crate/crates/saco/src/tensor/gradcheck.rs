//! Central finite-difference verification of analytic gradients.

use super::Params;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Outcome of a [`check_gradients`] sweep.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn assert_within(&self, tol: f64) {
        assert!(
            self.max_rel_err <= tol,
            "gradient check failed: max rel err {:.3e} at {} ({} entries checked)",
            self.max_rel_err,
            self.worst,
            self.checked
        );
    }
}

/// `|a − b| / max(floor, |a|, |b|)` with a floor that absorbs finite-difference
/// noise on near-zero gradients.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1e-4f64).max(a.abs()).max(b.abs())
}

/// Central difference of `f` w.r.t. one entry of one parameter.
pub fn numerical_grad(
    f: &mut dyn FnMut(&Params) -> f64,
    params: &Params,
    name: &str,
    idx: (usize, usize),
    h: f64,
) -> f64 {
    let mut plus = params.clone();
    plus.get_mut(name)[idx] += h;
    let mut minus = params.clone();
    minus.get_mut(name)[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Compares `analytic` against central differences of `f` on up to
/// `entries_per_param` randomly chosen entries of each parameter.
pub fn check_gradients(
    f: &mut dyn FnMut(&Params) -> f64,
    params: &Params,
    analytic: &BTreeMap<String, Array2<f64>>,
    entries_per_param: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    for (name, grad) in analytic {
        let (rows, cols) = grad.dim();
        let total = rows * cols;
        let picks: Vec<usize> = if total <= entries_per_param {
            (0..total).collect()
        } else {
            (0..entries_per_param).map(|_| rng.gen_range(0..total)).collect()
        };
        for flat in picks {
            let idx = (flat / cols, flat % cols);
            let theta = params.get(name)[idx];
            let h = 1e-5 * theta.abs().max(1.0);
            let num = numerical_grad(f, params, name, idx, h);
            let rel = relative_error(grad[idx], num);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{},{}] analytic={} numeric={num}", idx.0, idx.1, grad[idx]);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Binder, Tape};
    use ndarray::array;

    #[test]
    fn quadratic_gradient_matches() {
        let mut params = Params::new();
        params.insert("w", array![[2.0, -3.0]]);
        // f = sum(w ⊙ w)
        let mut f = |p: &Params| {
            let mut t = Tape::new();
            let mut b = Binder::new();
            let w = b.var(&mut t, p, "w");
            let sq = t.mul(w, w);
            let s = t.sum_all(sq);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let mut b = Binder::new();
        let w = b.var(&mut t, &params, "w");
        let sq = t.mul(w, w);
        let s = t.sum_all(sq);
        let g = t.backward(s);
        let mut analytic = BTreeMap::new();
        analytic.insert("w".to_string(), g.wrt(w).unwrap().clone());
        let report = check_gradients(&mut f, &params, &analytic, 8, 7);
        report.assert_within(1e-6);
    }
}
