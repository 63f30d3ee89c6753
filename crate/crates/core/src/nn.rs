//! Minimal dense-network plumbing shared by the denoiser and the classifiers:
//! named parameter tensors, linear layers with hand-written backward passes,
//! SiLU, and Adam with global-norm clipping.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Ordered list of named tensors; the order is the checkpoint payload order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mat(&self, i: usize) -> ArrayView2<'_, f64> {
        let t = &self.tensors[i];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("matrix tensor")
    }

    pub fn mat_mut(&mut self, i: usize) -> ArrayViewMut2<'_, f64> {
        let t = &mut self.tensors[i];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("matrix tensor")
    }

    pub fn vec(&self, i: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[i].data[..])
    }

    pub fn vec_mut(&mut self, i: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.tensors[i].data[..])
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Round every parameter to the nearest `f32` so that a checkpoint
    /// round trip reproduces the in-memory model bit for bit.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn flat_get(&self, mut idx: usize) -> f64 {
        for t in &self.tensors {
            if idx < t.data.len() {
                return t.data[idx];
            }
            idx -= t.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_set(&mut self, mut idx: usize, v: f64) {
        for t in &mut self.tensors {
            if idx < t.data.len() {
                t.data[idx] = v;
                return;
            }
            idx -= t.data.len();
        }
        panic!("flat index out of range")
    }
}

/// PyTorch-style uniform init in `±1/√fan_in`.
pub fn init_linear<R: Rng + ?Sized>(
    rng: &mut R,
    name: &str,
    out_dim: usize,
    in_dim: usize,
) -> (Tensor, Tensor) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let mut w = Tensor::zeros(format!("{name}.weight"), vec![out_dim, in_dim]);
    let mut b = Tensor::zeros(format!("{name}.bias"), vec![out_dim]);
    for v in w.data.iter_mut().chain(b.data.iter_mut()) {
        *v = rng.random_range(-bound..bound);
    }
    (w, b)
}

/// `x · wᵀ + b` for a batch `x` of shape `(batch, in)`.
pub fn linear(x: &ArrayView2<'_, f64>, w: &ArrayView2<'_, f64>, b: &ArrayView1<'_, f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

/// Backward pass of [`linear`] for the layer whose weight is tensor `wi` and
/// bias tensor `wi + 1`: accumulates `dW += dyᵀ·x`, `db += Σ dy` into
/// `grads` and returns `dx = dy·W`.
pub fn linear_backward(
    params: &ParamSet,
    grads: &mut ParamSet,
    wi: usize,
    x: &ArrayView2<'_, f64>,
    dy: &ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut dw = grads.mat_mut(wi);
    dw += &dy.t().dot(x);
    let mut db = grads.vec_mut(wi + 1);
    db += &dy.sum_axis(Axis(0));
    dy.dot(&params.mat(wi))
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_arr(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(silu)
}

/// `dy ⊙ silu'(pre)`.
pub fn silu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, p| *g *= silu_grad(*p));
    out
}

/// Row-wise numerically stable log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, like: &ParamSet) -> Self {
        Self {
            cfg,
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    /// One update with learning rate `cfg.lr · lr_scale`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr_scale: f64) {
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.cfg.lr * lr_scale;
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Rescale `grads` so its global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let n = grads.norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
    n
}

pub fn rows_to_array(rows: &[&[f64]], dim: usize) -> Array2<f64> {
    let mut a = Array2::zeros((rows.len(), dim));
    for (mut r, src) in a.rows_mut().into_iter().zip(rows) {
        r.assign(&ArrayView1::from(*src));
    }
    a
}
