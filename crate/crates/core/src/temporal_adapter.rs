//! Temporal adapter: encoder layers whose attention depends only on the
//! distance between frames.
//!
//! Each layer computes
//!
//! ```text
//! x_TM = LN₁(softmax(Ma) · x)
//! x_TA = LN₂(FFN(x_TM) + x_TM)        FFN(z) = GELU(z·W₁ + b₁)·W₂ + b₂
//! ```
//!
//! with `Ma[i,j] = −|i−j|/σ`. There is no positional encoding, no
//! query/key/value projection and no residual around the attention mix.
//! The first layer's input is `x_CLIP + x_AS`; further layers consume the
//! previous layer's output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayerParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl AdapterLayerParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::randn(dim, hidden, 1.0 / (dim as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::randn(hidden, dim, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, dim),
            ln1_gain: Matrix::filled(1, dim, 1.0),
            ln1_bias: Matrix::zeros(1, dim),
            ln2_gain: Matrix::filled(1, dim, 1.0),
            ln2_bias: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &Matrix); 8] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 8] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]
    }

    fn validate(&self) -> Result<()> {
        let (d, h) = self.w1.shape();
        let ok = h >= 1
            && self.b1.shape() == (1, h)
            && self.w2.shape() == (h, d)
            && [&self.b2, &self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias]
                .iter()
                .all(|m| m.shape() == (1, d));
        if !ok {
            return Err(Error::DimensionMismatch(
                "adapter layer tensors have inconsistent shapes".into(),
            ));
        }
        if !self.tensors().iter().all(|(_, m)| m.is_finite()) {
            return Err(Error::InvalidConfig("adapter layer holds non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub layers: Vec<AdapterLayerParams>,
    pub sigma: f64,
}

impl AdapterParams {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        hidden: usize,
        num_layers: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|_| AdapterLayerParams::init(dim, hidden, rng))
                .collect(),
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        self.layers.iter().try_for_each(AdapterLayerParams::validate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterOutput {
    /// Output of the last layer.
    pub x_ta: Matrix,
    /// Attention-mixed, normalized features of the last layer.
    pub x_tm: Matrix,
}

/// Row-wise softmax of `Ma[i,j] = −|i−j|/σ`.
pub fn distance_adjacency(frames: usize, sigma: f64) -> Result<Matrix> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    if frames == 0 {
        return Err(Error::DimensionMismatch("adjacency needs T >= 1".into()));
    }
    let mut m = Matrix::zeros(frames, frames);
    for i in 0..frames {
        let logits: Vec<f64> = (0..frames)
            .map(|j| -(i.abs_diff(j) as f64) / sigma)
            .collect();
        m.row_mut(i)
            .copy_from_slice(&crate::tensor::softmax(&logits));
    }
    Ok(m)
}

/// Graph handles for one layer's tensors.
#[derive(Debug, Clone, Copy)]
pub struct AdapterLayerVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl AdapterLayerVars {
    pub fn bind(g: &mut Graph, p: &AdapterLayerParams, trainable: bool) -> Self {
        let mut leaf = |m: &Matrix| {
            if trainable {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        Self {
            w1: leaf(&p.w1),
            b1: leaf(&p.b1),
            w2: leaf(&p.w2),
            b2: leaf(&p.b2),
            ln1_gain: leaf(&p.ln1_gain),
            ln1_bias: leaf(&p.ln1_bias),
            ln2_gain: leaf(&p.ln2_gain),
            ln2_bias: leaf(&p.ln2_bias),
        }
    }

    pub fn as_array(&self) -> [Var; 8] {
        [
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// Records one layer on `g`, returning `(x_TM, x_TA)`.
pub fn layer_on(g: &mut Graph, input: Var, adjacency: Var, p: &AdapterLayerVars) -> (Var, Var) {
    let mixed = g.matmul(adjacency, input);
    let normed = g.layer_norm(mixed, LAYER_NORM_EPS);
    let scaled = g.mul_row(normed, p.ln1_gain);
    let x_tm = g.add_row(scaled, p.ln1_bias);

    let h = g.matmul(x_tm, p.w1);
    let h = g.add_row(h, p.b1);
    let h = g.gelu(h);
    let f = g.matmul(h, p.w2);
    let f = g.add_row(f, p.b2);
    let res = g.add(f, x_tm);
    let normed = g.layer_norm(res, LAYER_NORM_EPS);
    let scaled = g.mul_row(normed, p.ln2_gain);
    let x_ta = g.add_row(scaled, p.ln2_bias);
    (x_tm, x_ta)
}

/// Records every layer on `g`, returning the last `(x_TM, x_TA)`.
/// `input` is `x_CLIP + x_AS`.
pub fn forward_on(
    g: &mut Graph,
    input: Var,
    frames: usize,
    sigma: f64,
    layers: &[AdapterLayerVars],
) -> Result<(Var, Var)> {
    let adjacency = g.constant(distance_adjacency(frames, sigma)?);
    let mut x = input;
    let mut x_tm = input;
    for l in layers {
        let (tm, ta) = layer_on(g, x, adjacency, l);
        x_tm = tm;
        x = ta;
    }
    Ok((x_tm, x))
}

pub fn adapter_forward(x_clip: &Matrix, x_as: &Matrix, params: &AdapterParams) -> Result<AdapterOutput> {
    if x_clip.shape() != x_as.shape() {
        return Err(Error::DimensionMismatch(format!(
            "x_CLIP is {:?} but x_AS is {:?}",
            x_clip.shape(),
            x_as.shape()
        )));
    }
    params.validate()?;
    if let Some(l) = params.layers.first() {
        if l.dim() != x_clip.cols() {
            return Err(Error::DimensionMismatch(format!(
                "adapter expects D={}, features have D={}",
                l.dim(),
                x_clip.cols()
            )));
        }
    }
    let mut g = Graph::new();
    let a = g.constant(x_clip.clone());
    let b = g.constant(x_as.clone());
    let input = g.add(a, b);
    let vars: Vec<AdapterLayerVars> = params
        .layers
        .iter()
        .map(|l| AdapterLayerVars::bind(&mut g, l, false))
        .collect();
    let (x_tm, x_ta) = forward_on(&mut g, input, x_clip.rows(), params.sigma, &vars)?;
    Ok(AdapterOutput {
        x_ta: g.value(x_ta).clone(),
        x_tm: g.value(x_tm).clone(),
    })
}
