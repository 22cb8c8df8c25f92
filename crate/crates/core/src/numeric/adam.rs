//! Adam with bias correction.

use super::mat::Mat;
use super::params::ParamSet;
use crate::error::{Result, SlacError};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub hyper: AdamHyper,
    first_moment: Vec<Mat>,
    second_moment: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Self {
        let first_moment = params
            .tensors
            .iter()
            .map(|t| Mat::zeros(t.value.rows, t.value.cols))
            .collect();
        let second_moment = params
            .tensors
            .iter()
            .map(|t| Mat::zeros(t.value.rows, t.value.cols))
            .collect();
        AdamState {
            step_count: 0,
            hyper,
            first_moment,
            second_moment,
        }
    }

    /// One update over every tensor. Gradients are validated, consumed, and
    /// zeroed; updated values are checked finite.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for t in &params.tensors {
            if !t.grad.all_finite() {
                return Err(SlacError::NonFinite {
                    what: "gradient".into(),
                    tensor: t.name.clone(),
                });
            }
        }
        self.step_count += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step_count as i32);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..t.value.len() {
                let g = t.grad.data[j];
                m.data[j] = h.beta1 * m.data[j] + (1.0 - h.beta1) * g;
                v.data[j] = h.beta2 * v.data[j] + (1.0 - h.beta2) * g * g;
                let m_hat = m.data[j] / bc1;
                let v_hat = v.data[j] / bc2;
                t.value.data[j] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
            }
            t.grad.fill(0.0);
            if !t.value.all_finite() {
                return Err(SlacError::NonFinite {
                    what: "value".into(),
                    tensor: t.name.clone(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut set = ParamSet::default();
        set.push("p", Mat::from_vec(1, 2, vec![1.5, -2.0]));
        let mut adam = AdamState::new(&set, AdamHyper::default());
        adam.step(&mut set).unwrap();
        assert_eq!(set.tensors[0].value.data, vec![1.5, -2.0]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_matches_hand_evaluated_update() {
        // param 0, grad 1, lr 1e-3, defaults: bias correction cancels the
        // moment decay on step 1, so the update is lr * 1 / (1 + eps).
        let mut set = ParamSet::default();
        set.push("p", Mat::from_vec(1, 1, vec![0.0]));
        set.tensors[0].grad.data[0] = 1.0;
        let hyper = AdamHyper {
            learning_rate: 1e-3,
            ..AdamHyper::default()
        };
        let mut adam = AdamState::new(&set, hyper);
        adam.step(&mut set).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert_abs_diff_eq!(set.tensors[0].value.data[0], expected, epsilon = 1e-15);
        assert!((set.tensors[0].value.data[0] + 1e-3).abs() < 1e-10);
        // grads zeroed after the step
        assert_eq!(set.tensors[0].grad.data[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut set = ParamSet::default();
        set.push("fine", Mat::zeros(1, 1));
        set.push("broken", Mat::zeros(1, 1));
        set.tensors[1].grad.data[0] = f64::NAN;
        let mut adam = AdamState::new(&set, AdamHyper::default());
        let err = adam.step(&mut set).unwrap_err();
        assert!(err.to_string().contains("broken"));
    }

    #[test]
    fn identical_runs_are_bit_identical_after_100_steps() {
        let run = || {
            let mut set = ParamSet::default();
            set.push("p", Mat::from_vec(1, 3, vec![0.1, -0.2, 0.3]));
            let mut adam = AdamState::new(&set, AdamHyper::default());
            for step in 0..100 {
                for j in 0..3 {
                    set.tensors[0].grad.data[j] = ((step * 3 + j) as f64 * 0.01).sin();
                }
                adam.step(&mut set).unwrap();
            }
            set.tensors[0].value.data.clone()
        };
        let a = run();
        let b = run();
        let bits =
            |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
