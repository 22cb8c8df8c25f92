//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compare the analytic gradients already accumulated in `params.grad`
/// against central differences of `eval`.
///
/// Up to `max_coords` coordinates are sampled (all of them when the model is
/// small). The returned error is
/// max |analytic - cd| / max(|analytic|, |cd|, 1e-12).
pub fn finite_diff_check(
    eval: impl Fn(&ParamSet) -> f64,
    params: &mut ParamSet,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> FdReport {
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (ti, t) in params.tensors.iter().enumerate() {
        for j in 0..t.value.len() {
            coords.push((ti, j));
        }
    }
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }

    let mut max_rel = 0.0f64;
    for &(ti, j) in &coords {
        let analytic = params.tensors[ti].grad.data[j];
        let orig = params.tensors[ti].value.data[j];
        params.tensors[ti].value.data[j] = orig + eps;
        let f_plus = eval(params);
        params.tensors[ti].value.data[j] = orig - eps;
        let f_minus = eval(params);
        params.tensors[ti].value.data[j] = orig;
        let cd = (f_plus - f_minus) / (2.0 * eps);
        let rel = (analytic - cd).abs() / analytic.abs().max(cd.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    FdReport {
        max_rel_err: max_rel,
        coords_checked: coords.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::mat::Mat;
    use crate::numeric::tape::{dense, Tape};

    /// Quadratic loss through a dense layer, evaluated as a pure function.
    fn quad_loss(params: &ParamSet, x: &[f64], target: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let xn = tape.constant(Mat::row(x));
        let w = tape.param(params, 0);
        let b = tape.param(params, 1);
        let y = dense(&mut tape, xn, w, b);
        let l = tape.masked_sse(y, target.to_vec(), vec![true; target.len()]);
        tape.scalar(l)
    }

    #[test]
    fn dense_layer_gradients_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::default();
        params.push_weight("w", 3, 4, &mut rng);
        params.push_weight("b", 1, 4, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // analytic grads
        let mut tape = Tape::new();
        let xn = tape.constant(Mat::row(&x));
        let w = tape.param(&params, 0);
        let b = tape.param(&params, 1);
        let y = dense(&mut tape, xn, w, b);
        let l = tape.masked_sse(y, target.clone(), vec![true; 4]);
        tape.backward(l, 1.0, &mut params).unwrap();

        let report = finite_diff_check(
            |p| quad_loss(p, &x, &target),
            &mut params,
            1e-5,
            1000,
            0,
        );
        assert_eq!(report.coords_checked, 16);
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn constant_computation_has_zero_error() {
        let mut params = ParamSet::default();
        params.push("p", Mat::from_vec(1, 2, vec![1.0, 2.0]));
        // grads untouched (all zero), eval constant
        let report = finite_diff_check(|_| 42.0, &mut params, 1e-5, 10, 0);
        assert_eq!(report.max_rel_err, 0.0);
    }
}
