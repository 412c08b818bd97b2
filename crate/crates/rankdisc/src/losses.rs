//! Loss components of the joint objective L = L_CE + L_BCE + omega(t)*L_MSE,
//! their gradients with respect to head outputs, and the ramp-up schedule.
//!
//! All logs are epsilon-clamped at 1e-12: the pairwise BCE term is singular
//! when two softmax outputs coincide at a vertex.

use crate::ndcore::Tensor;
use crate::rankstats::PairLabelMatrix;
use crate::{Error, Result};

pub const LOG_EPS: f64 = 1e-12;

/// omega(t) = lambda * exp(-5 (1 - t/T)^2) for t < T, lambda afterwards.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RampUpSchedule {
    pub lambda: f64,
    pub ramp_length: usize,
}

impl RampUpSchedule {
    pub fn value(&self, t: usize) -> f64 {
        if t >= self.ramp_length {
            return self.lambda;
        }
        let frac = 1.0 - t as f64 / self.ramp_length as f64;
        self.lambda * (-5.0 * frac * frac).exp()
    }
}

/// One training step's loss breakdown; total = ce + bce + omega*mse.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossReport {
    pub ce: f64,
    pub bce: f64,
    pub mse: f64,
    pub omega: f64,
    pub total: f64,
}

pub fn total_loss(ce: f64, bce: f64, mse: f64, omega: f64) -> Result<LossReport> {
    for (name, v) in [("ce", ce), ("bce", bce), ("mse", mse), ("omega", omega)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss component {name}={v}"
            )));
        }
    }
    Ok(LossReport {
        ce,
        bce,
        mse,
        omega,
        total: ce + bce + omega * mse,
    })
}

/// Mean negative log-likelihood over a batch of probability rows.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, c) = (probs.rows(), probs.cols());
    if labels.len() != b {
        return Err(Error::Argument(format!(
            "cross_entropy: {} labels for batch of {}",
            labels.len(),
            b
        )));
    }
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Argument(format!(
                "cross_entropy: label {y} out of range for {c} classes"
            )));
        }
        sum -= probs.at2(i, y).clamp(LOG_EPS, 1.0).ln();
    }
    Ok(sum / b as f64)
}

/// Gradient of `cross_entropy` with respect to the pre-softmax logits:
/// (p - onehot) / B.
pub fn cross_entropy_dlogits(probs: &Tensor, labels: &[usize]) -> Tensor {
    let (b, c) = (probs.rows(), probs.cols());
    let mut d = Tensor::zeros(&[b, c]);
    let scale = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate().take(b) {
        for j in 0..c {
            let y = (label == j) as u8 as f64;
            d.set2(i, j, (probs.at2(i, j) - y) * scale);
        }
    }
    d
}

/// Pairwise BCE over inner products of softmax rows, diagonal included.
pub fn pairwise_bce(probs_u: &Tensor, s: &PairLabelMatrix) -> Result<f64> {
    let b = probs_u.rows();
    if s.size() != b {
        return Err(Error::Argument(format!(
            "pairwise_bce: label matrix {}x{0} vs batch {b}",
            s.size()
        )));
    }
    let mut sum = 0.0;
    for i in 0..b {
        for j in 0..b {
            let q = inner(probs_u.row(i), probs_u.row(j)).clamp(LOG_EPS, 1.0 - LOG_EPS);
            sum -= if s.get(i, j) == 1 {
                q.ln()
            } else {
                (1.0 - q).ln()
            };
        }
    }
    Ok(sum / (b * b) as f64)
}

/// Gradient of `pairwise_bce` with respect to the probability rows.
/// Pairs whose inner product sits in the clamp region contribute zero.
pub fn pairwise_bce_dprobs(probs_u: &Tensor, s: &PairLabelMatrix) -> Tensor {
    let (b, c) = (probs_u.rows(), probs_u.cols());
    let mut d = Tensor::zeros(&[b, c]);
    let scale = 1.0 / (b * b) as f64;
    for i in 0..b {
        for j in 0..b {
            let q = inner(probs_u.row(i), probs_u.row(j));
            if q <= LOG_EPS || q >= 1.0 - LOG_EPS {
                continue;
            }
            // d/dq of -[s log q + (1-s) log(1-q)]
            let g = if s.get(i, j) == 1 {
                -1.0 / q
            } else {
                1.0 / (1.0 - q)
            } * scale;
            // q = p_i . p_j touches both rows; i == j contributes 2 p_i
            for k in 0..c {
                d.data_mut()[i * c + k] += g * probs_u.at2(j, k);
                d.data_mut()[j * c + k] += g * probs_u.at2(i, k);
            }
        }
    }
    d
}

/// Mean squared distance between matching probability rows.
pub fn consistency_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "consistency_mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let rows = a.rows() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / rows)
}

/// Gradient of `consistency_mse` with respect to the first argument; the
/// second argument's gradient is its negation.
pub fn consistency_mse_dprobs(a: &Tensor, b: &Tensor) -> Tensor {
    let scale = 2.0 / a.rows() as f64;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| scale * (x - y))
        .collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
