//! Named parameter tensors with paired gradient buffers.

use rand::Rng;

use super::mat::Mat;
use crate::error::{Result, SlacError};

/// One learned tensor: value matrix plus a same-shape gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
}

impl ParamTensor {
    pub fn new(name: &str, value: Mat) -> Self {
        let grad = Mat::zeros(value.rows, value.cols);
        ParamTensor {
            name: name.to_string(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Ordered collection of parameter tensors addressed by index.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: &str, value: Mat) -> usize {
        self.tensors.push(ParamTensor::new(name, value));
        self.tensors.len() - 1
    }

    /// Glorot-uniform weight matrix: U(-b, b), b = sqrt(6 / (fan_in + fan_out)).
    pub fn push_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.push(name, Mat::from_vec(rows, cols, data))
    }

    pub fn push_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.push(name, Mat::zeros(rows, cols))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn value(&self, idx: usize) -> &Mat {
        &self.tensors[idx].value
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn check_finite_values(&self) -> Result<()> {
        for t in &self.tensors {
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
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut set = ParamSet::default();
        set.push_weight("w", 4, 9, &mut rng);
        let bound = (6.0 / 13.0f64).sqrt();
        assert!(set.tensors[0].value.data.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn index_lookup_and_grad_shape() {
        let mut set = ParamSet::default();
        set.push_zeros("a", 2, 3);
        set.push_zeros("b", 1, 1);
        assert_eq!(set.index_of("b"), Some(1));
        assert_eq!(set.tensors[0].grad.rows, 2);
        assert_eq!(set.tensors[0].grad.cols, 3);
        assert_eq!(set.n_scalars(), 7);
    }
}
