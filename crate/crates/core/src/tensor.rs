//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Matrices are stored `(in, out)` so a layer is `y = x · W + b`, which keeps
//! the forward pass a sequence of contiguous row axpys.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Glorot-uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    ///
    /// Vectors are treated as biases and start at zero.
    pub fn glorot<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        if shape.len() == 2 {
            let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            for x in &mut t.data {
                *x = rng.gen_range(-a..a);
            }
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = x · W + b` for `W: (x.len(), out.len())`.
pub fn affine(x: &[f64], w: &Tensor, b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.rows(), x.len());
    debug_assert_eq!(w.cols(), out.len());
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, w.row(i), out);
        }
    }
}

/// `dx += W · dy`, the input gradient of [`affine`].
pub fn affine_input_grad(w: &Tensor, dy: &[f64], dx: &mut [f64]) {
    for (i, d) in dx.iter_mut().enumerate() {
        *d += dot(w.row(i), dy);
    }
}

/// `dW += x ⊗ dy`.
pub fn add_outer(dw: &mut Tensor, x: &[f64], dy: &[f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, dy, dw.row_mut(i));
        }
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` by the ReLU derivative evaluated at `pre`.
pub fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Backward of `y = Σ_j α_j v_j` with `α = softmax(s)`: given `dα_j = dy·v_j`,
/// returns `ds_j = α_j (dα_j − Σ_k α_k dα_k)`.
pub fn softmax_backward(alpha: &[f64], dalpha: &[f64]) -> Vec<f64> {
    let mean: f64 = alpha.iter().zip(dalpha).map(|(a, d)| a * d).sum();
    alpha
        .iter()
        .zip(dalpha)
        .map(|(a, d)| a * (d - mean))
        .collect()
}
