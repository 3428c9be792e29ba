//! Losses on logits, predictive distributions, and the output-layer Hessian.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropySoftmax,
    /// `½‖f − y‖²` per example, so the output Hessian is exactly `I`.
    SquaredError,
}

/// Supervision for a batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Values(&'a Matrix),
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = softmax(logits.row(r));
        p.row_mut(r).copy_from_slice(&row);
    }
    p
}

/// Mean loss over the batch and its gradient with respect to the logits.
pub fn loss_and_grad(kind: LossKind, logits: &Matrix, targets: Targets<'_>) -> Result<(f64, Matrix)> {
    let (n, k) = logits.shape();
    if n == 0 {
        return Err(Error::degenerate("empty batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    match (kind, targets) {
        (LossKind::CrossEntropySoftmax, Targets::Labels(labels)) => {
            if labels.len() != n {
                return Err(Error::structural(format!("{} labels for {n} rows", labels.len())));
            }
            for (r, &y) in labels.iter().enumerate() {
                if y >= k {
                    return Err(Error::domain(format!("label {y} outside [0, {k})")));
                }
                let z = logits.row(r);
                total += log_sum_exp(z) - z[y];
                let p = softmax(z);
                let g = grad.row_mut(r);
                for c in 0..k {
                    g[c] = (p[c] - if c == y { 1.0 } else { 0.0 }) * inv_n;
                }
            }
        }
        (LossKind::SquaredError, Targets::Values(y)) => {
            if y.shape() != (n, k) {
                return Err(Error::structural(format!(
                    "targets are {:?}, logits are {:?}",
                    y.shape(),
                    (n, k)
                )));
            }
            for r in 0..n {
                let g = grad.row_mut(r);
                for c in 0..k {
                    let d = logits.get(r, c) - y.get(r, c);
                    total += 0.5 * d * d;
                    g[c] = d * inv_n;
                }
            }
        }
        (kind, _) => {
            return Err(Error::domain(format!("{kind:?} got the wrong kind of targets")));
        }
    }
    Ok((total * inv_n, grad))
}

/// Hessian of the per-example loss with respect to the logits.
pub fn output_hessian(kind: LossKind, logits: &[f64]) -> Matrix {
    let k = logits.len();
    match kind {
        LossKind::SquaredError => Matrix::identity(k),
        LossKind::CrossEntropySoftmax => {
            let p = softmax(logits);
            Matrix::from_fn(k, k, |i, j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] })
        }
    }
}

/// Draws one label per row from the row's categorical distribution.
pub fn sample_targets<R: Rng + ?Sized>(p: &Matrix, rng: &mut R) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(p.rows());
    for r in 0..p.rows() {
        let row = p.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-8 {
            return Err(Error::domain(format!(
                "row {r} is not a probability distribution (sum {sum})"
            )));
        }
        let u: f64 = rng.random::<f64>() * sum;
        let mut acc = 0.0;
        let mut pick = None;
        for (c, &v) in row.iter().enumerate() {
            acc += v;
            if u < acc {
                pick = Some(c);
                break;
            }
        }
        // u can land on the rounding slack above the last cumulative sum
        let pick = pick.unwrap_or_else(|| row.iter().rposition(|&v| v > 0.0).unwrap_or(0));
        labels.push(pick);
    }
    Ok(labels)
}

/// Fraction of rows whose largest logit is the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let pred = crate::nn::argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}
