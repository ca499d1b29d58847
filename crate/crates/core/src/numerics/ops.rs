//! Plain (non-recorded) evaluation of the loss and pooling primitives.

use std::ops::Range;

use super::tape::huber_elem;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean Huber loss of `pred - target`.
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "huber_loss of {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Domain("huber_loss of empty input".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("huber delta must be positive, got {delta}")));
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| huber_elem(p - t, delta).0)
        .sum();
    Ok(total / pred.len() as f64)
}

/// Non-overlapping windows of `factor` frames; the last may be shorter.
pub fn pool_windows(frames: usize, factor: usize) -> Result<Vec<Range<usize>>> {
    if factor < 1 {
        return Err(Error::Domain("pool factor must be at least 1".into()));
    }
    if frames < 1 {
        return Err(Error::Domain("cannot pool an empty frame axis".into()));
    }
    Ok((0..frames)
        .step_by(factor)
        .map(|s| s..(s + factor).min(frames))
        .collect())
}

/// Window means over the frame axis of a `frames x dim` tensor. A trailing
/// partial window is averaged over the frames it actually has.
pub fn temporal_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let windows = pool_windows(x.rows(), factor)?;
    mean_rows(x, &windows)
}

/// Per-channel mean over all frames.
pub fn global_mean_pool(x: &Tensor) -> Result<Tensor> {
    if x.numel() == 0 {
        return Err(Error::Domain("cannot pool an empty frame axis".into()));
    }
    let pooled = mean_rows(x, &[0..x.rows()])?;
    let dim = pooled.cols();
    pooled.reshape(vec![dim])
}

fn mean_rows(x: &Tensor, groups: &[Range<usize>]) -> Result<Tensor> {
    let dim = x.cols();
    let mut out = Vec::with_capacity(groups.len() * dim);
    for g in groups {
        let mut acc = vec![0.0; dim];
        for r in g.clone() {
            for (a, v) in acc.iter_mut().zip(x.row_slice(r)) {
                *a += v;
            }
        }
        let n = g.len() as f64;
        out.extend(acc.into_iter().map(|a| a / n));
    }
    Tensor::matrix(groups.len(), dim, out)
}
