//! Value-level kernels shared by the tape and by inference code.

use super::tensor::{dot, norm};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Softmax of one row; `-inf` entries get exactly 0.
pub fn softmax_row(row: &[f64], out: &mut [f64]) -> Result<()> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow("every entry is masked".into()));
    }
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = if v == f64::NEG_INFINITY { 0.0 } else { (v - mx).exp() };
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    Ok(())
}

/// Softmax along `axis` (0 = down columns, 1 = along rows) of a matrix.
pub fn masked_softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    match axis {
        1 => {
            let mut out = logits.clone();
            let c = logits.cols();
            for i in 0..logits.rows() {
                softmax_row(logits.row_slice(i), &mut out.data_mut()[i * c..(i + 1) * c])?;
            }
            Ok(out)
        }
        0 => Ok(masked_softmax(&logits.transpose(), 1)?.transpose()),
        _ => dim_err(format!("softmax axis {axis} out of range for a matrix")),
    }
}

/// log-softmax of one row restricted to entries not in `excluded`.
pub fn log_softmax_masked(row: &[f64], excluded: &[usize]) -> Result<Vec<f64>> {
    let mut masked = row.to_vec();
    for &j in excluded {
        masked[j] = f64::NEG_INFINITY;
    }
    let mx = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow("every entry is masked".into()));
    }
    let lse = mx + masked.iter().filter(|v| v.is_finite()).map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(masked.iter().map(|&v| if v.is_finite() { v - lse } else { f64::NEG_INFINITY }).collect())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return dim_err(format!("layer_norm gain/bias must have {c} entries"));
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row_slice(i);
        let (mean, inv) = row_moments(row, eps);
        let o = &mut out.data_mut()[i * c..(i + 1) * c];
        for k in 0..c {
            o[k] = (row[k] - mean) * inv * gain.data()[k] + bias.data()[k];
        }
    }
    Ok(out)
}

/// (mean, 1/sqrt(var + eps)) of a row, population variance.
pub fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return dim_err(format!("cosine of vectors of length {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// KL(p || uniform) over the entries of `p`, with 0 log 0 = 0.
pub fn kl_uniform(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty support".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {v} is not a probability")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("entries sum to {s}")));
    }
    let m = p.len() as f64;
    Ok(p.iter().filter(|&&v| v > 0.0).map(|&v| v * (v * m).ln()).sum())
}

/// Shrink each row of a simplex matrix toward the barycentre until its
/// squared norm is at most `theta`. Rows already inside the cap are unchanged.
pub fn simplex_cap_row(f: &[f64], theta: f64, out: &mut [f64]) -> f64 {
    let k = f.len() as f64;
    let u = 1.0 / k;
    let r2: f64 = f.iter().map(|v| (v - u) * (v - u)).sum();
    let cap = (theta - u).max(0.0);
    let s = if r2 <= cap { 1.0 } else { (cap / r2).sqrt() };
    for (o, &v) in out.iter_mut().zip(f) {
        *o = u + (v - u) * s;
    }
    s
}
