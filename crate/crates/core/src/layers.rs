//! Parameter sets for the float building blocks of a transformer block.

use crate::error::{dim_err, Result};
use crate::tensor::{matmul, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(c: usize) -> Self {
        Self { gamma: vec![1.0; c], beta: vec![0.0; c] }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `γ · x̂ + β`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.cols();
        if c != self.gamma.len() || c != self.beta.len() {
            return Err(dim_err!("layer norm over {} channels got {c}", self.gamma.len()));
        }
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((v, g), b) in row.iter().zip(&self.gamma).zip(&self.beta) {
                out.push((v - mean) * inv * g + b);
            }
        }
        Tensor::new(x.dims().to_vec(), out)
    }
}

/// `y = x · W + b` with `W` stored as `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self> {
        if weight.dims().len() != 2 || weight.cols() != bias.len() {
            return Err(dim_err!("weight {:?} with bias of length {}", weight.dims(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        matmul(x, &self.weight)?.add_row_vector(&self.bias)
    }
}

/// Tanh approximation of GELU.
pub fn gelu(v: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2/π)
    0.5 * v * (1.0 + (K * (v + 0.044_715 * v * v * v)).tanh())
}

/// Row-wise softmax over the last dimension.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let start = out.len();
        let mut sum = 0.0f32;
        for &v in row {
            let e = (v - m).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..start + c] {
            *v /= sum;
        }
    }
    Tensor::from_parts(x.dims().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_normalizes() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let y = LayerNorm::identity(4).forward(&x).unwrap();
        let mean: f32 = y.data().iter().sum::<f32>() / 4.0;
        let var: f32 = y.data().iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-50.0, 0.0, 50.0]]).unwrap();
        let p = softmax_rows(&x);
        for r in 0..2 {
            assert!((p.row_slice(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!(gelu(-10.0).abs() < 1e-6);
    }
}
