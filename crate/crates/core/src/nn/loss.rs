//! Batch-averaged classification losses on plain `f64` slices.
//!
//! These evaluate the same tape operations used during training, so the
//! standalone values and the training loss can never drift apart.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Mean of `-[y ln p + (1 - y) ln(1 - p)]`, with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn binary_crossentropy(probs: &[f64], targets: &[f64]) -> Result<f64> {
    if let Some(&y) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Input(format!("binary target {y} is not 0 or 1")));
    }
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(Tensor::vector(probs.to_vec()), false);
    let loss = tape.binary_crossentropy(p, targets)?;
    tape.value(loss).item()
}

/// Mean of `-ln q[true]` for probability rows against one-hot rows.
pub fn categorical_crossentropy(probs: &[Vec<f64>], onehot: &[Vec<f64>]) -> Result<f64> {
    if probs.len() != onehot.len() || probs.is_empty() {
        return Err(Error::shape(format!(
            "categorical_crossentropy: {} probability rows for {} targets",
            probs.len(),
            onehot.len()
        )));
    }
    let k = probs[0].len();
    let mut targets = Vec::with_capacity(onehot.len());
    let mut flat = Vec::with_capacity(probs.len() * k);
    for (q, y) in probs.iter().zip(onehot) {
        if q.len() != k || y.len() != k {
            return Err(Error::shape("categorical_crossentropy rows differ in width"));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::Input(format!(
                "probability row sums to {total}, expected 1"
            )));
        }
        targets.push(onehot_index(y)?);
        flat.extend_from_slice(q);
    }
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(Tensor::new(vec![probs.len(), k], flat)?, false);
    let loss = tape.categorical_crossentropy(q, &targets)?;
    tape.value(loss).item()
}

/// Index of the single 1 in a one-hot row.
pub fn onehot_index(row: &[f64]) -> Result<usize> {
    let ones: Vec<usize> = row
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    let zeros = row.iter().filter(|&&v| v == 0.0).count();
    match ones.as_slice() {
        [i] if zeros + 1 == row.len() => Ok(*i),
        _ => Err(Error::Input(format!("target {row:?} is not one-hot"))),
    }
}
