//! Forward computations on plain tensors. [`super::Trace`] records these and
//! adds their gradient rules.

use super::kernels;
use super::tensor::{Mask, Tensor};
use crate::error::{Error, Result};

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::dim(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_acc(a.data(), b.data(), m, k, n, &mut out);
    Tensor::matrix(m, n, out)
}

pub fn masked_softmax(scores: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (q, k) = require_matrix("masked_softmax", scores)?;
    if (q, k) != (mask.rows(), mask.cols()) {
        return Err(Error::dim(
            "masked_softmax",
            scores.shape(),
            &[mask.rows(), mask.cols()],
        ));
    }
    let out = kernels::masked_softmax(scores.data(), mask).map_err(|row| Error::DegenerateRow { row })?;
    Tensor::matrix(q, k, out)
}

pub(crate) struct LayerNormParts {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_parts(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<LayerNormParts> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let n = x.rows();
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    let (g, b) = (gain.data(), bias.data());
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            out[i * d + j] = g[j] * h + b[j];
        }
    }
    Ok(LayerNormParts { out, xhat, inv_std })
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let parts = layer_norm_parts(x, gain, bias, eps)?;
    Tensor::new(x.shape().to_vec(), parts.out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy against soft targets, with clamped probabilities.
pub fn bce_mean(p: &[f64], t: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Contract("classification loss over zero anchors".into()));
    }
    if p.len() != t.len() {
        return Err(Error::dim("bce", &[p.len()], &[t.len()]));
    }
    let sum: f64 = p
        .iter()
        .zip(t)
        .map(|(&pi, &ti)| {
            let pc = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln()
        })
        .sum();
    Ok(-sum / p.len() as f64)
}
