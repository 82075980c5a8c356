//! Small fully connected networks with hand-written backpropagation.
//!
//! Parameters are one flat vector, layer by layer, each layer storing its
//! `out x in` weight matrix row-major followed by its bias.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::Matrix;

/// ReLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer inputs and pre-activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            bail!(InvalidArgument, "layer sizes {sizes:?} need >= 2 nonzero entries");
        }
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[1] * w[0] + w[1] {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            bail!(InvalidArgument, "layer sizes {sizes:?} need >= 2 nonzero entries");
        }
        if params.len() != param_count(sizes) {
            bail!(Dimension, "{} parameters for sizes {sizes:?}, expected {}", params.len(), param_count(sizes));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer(&self, l: usize) -> (usize, usize, usize) {
        let off: usize = self.sizes[..l + 1].windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        (off, self.sizes[l], self.sizes[l + 1])
    }

    fn affine(&self, l: usize, x: &Matrix) -> Matrix {
        let (off, din, dout) = self.layer(l);
        let w = &self.params[off..off + din * dout];
        let b = &self.params[off + din * dout..off + din * dout + dout];
        let mut out = Matrix::zeros(x.rows(), dout);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for o in 0..dout {
                let wr = &w[o * din..(o + 1) * din];
                or[o] = b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            bail!(Dimension, "network expects {} inputs, got {}", self.input_dim(), x.cols());
        }
        Ok(())
    }

    /// Outputs for each row of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let layers = self.sizes.len() - 1;
        let mut h = x.clone();
        for l in 0..layers {
            h = self.affine(l, &h);
            if l + 1 < layers {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(x)?;
        let layers = self.sizes.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers),
        };
        let mut h = x.clone();
        for l in 0..layers {
            let z = self.affine(l, &h);
            tape.inputs.push(h);
            h = z.clone();
            if l + 1 < layers {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            tape.pre.push(z);
        }
        Ok((h, tape))
    }

    /// Gradients of a loss with output gradient `g` (rows match the batch):
    /// returns `(d loss / d params, d loss / d input)`.
    pub fn backward(&self, tape: &Tape, g: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let layers = self.sizes.len() - 1;
        if tape.pre.len() != layers || g.cols() != self.output_dim() || g.rows() != tape.inputs[0].rows() {
            bail!(Dimension, "output gradient does not match the recorded forward pass");
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = g.clone();
        for l in (0..layers).rev() {
            let (off, din, dout) = self.layer(l);
            if l + 1 < layers {
                let z = &tape.pre[l];
                for (d, zv) in delta.data_mut().iter_mut().zip(z.data()) {
                    if *zv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &tape.inputs[l];
            let (gw, gb) = grad[off..off + din * dout + dout].split_at_mut(din * dout);
            for r in 0..delta.rows() {
                let dr = delta.row(r);
                let xr = input.row(r);
                for o in 0..dout {
                    let d = dr[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (gwv, xv) in gw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                        *gwv += d * xv;
                    }
                }
            }
            let w = &self.params[off..off + din * dout];
            let mut prev = Matrix::zeros(delta.rows(), din);
            for r in 0..delta.rows() {
                let dr = delta.row(r);
                let pr = prev.row_mut(r);
                for o in 0..dout {
                    let d = dr[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (pv, wv) in pr.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                        *pv += d * wv;
                    }
                }
            }
            delta = prev;
        }
        Ok((grad, delta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Plain gradient descent or Adam (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        Optimizer { kind, lr, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for (k, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    self.m[k] = B1 * self.m[k] + (1.0 - B1) * g;
                    self.v[k] = B2 * self.v[k] + (1.0 - B2) * g * g;
                    *p -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest-entry-shifted softmax of one row.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
