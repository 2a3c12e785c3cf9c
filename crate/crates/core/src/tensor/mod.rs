//! Dense f32 tensors and a minimal reverse-mode autodiff graph covering the
//! operations the collision-prediction network needs: 3x3 convolution, 2x2
//! max pooling, ReLU, linear layers, row softmax, single-head self-attention,
//! dropout, channel concatenation, and mean squared error.

pub mod check;
pub mod graph;
pub mod kernels;

pub use check::finite_diff_check;
pub use graph::{Graph, GraphOp, Mode, NodeId};

use rand_distr::{Distribution, StandardNormal};

/// Row-major dense tensor of 32-bit floats. `grad`, when present, is the same
/// length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n], grad: None }
    }

    /// Scalar tensor of shape [1].
    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    /// Builds a tensor from a flat buffer, checking the element count.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> crate::Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(crate::Error::shape(
                "from_vec",
                format!("shape {:?} implies {} elements, buffer has {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    /// Standard-normal initialization from the given RNG.
    pub fn randn<R: rand::Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor. Panics on misuse; callers guard via
    /// shape checks when the size is not statically known.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.data[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_enforces_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("6"), "error should name the expected count: {err}");
    }

    #[test]
    fn zero_sized_dims_yield_empty_tensors() {
        let t = Tensor::zeros(&[0, 5, 5]);
        assert_eq!(t.numel(), 0);
        assert!(Tensor::from_vec(&[0, 5, 5], vec![]).is_ok());
    }

    #[test]
    fn randn_is_seed_deterministic_and_roughly_standard() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[1000], &mut r1);
        let b = Tensor::randn(&[1000], &mut r2);
        assert_eq!(a.data, b.data);
        let mean: f32 = a.data.iter().sum::<f32>() / 1000.0;
        let var: f32 = a.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 1000.0;
        assert!(mean.abs() < 0.15, "mean {mean}");
        assert!((var - 1.0).abs() < 0.25, "var {var}");
    }
}
