//! Multilabel targets and the two one-vs-all losses.
//!
//! Both losses treat every (instance, label) pair as an independent binary
//! problem and normalize by the number of instances only, so per-pair
//! gradient magnitudes do not shrink as the label space grows.
//!
//! The squared hinge gradient is exactly zero for every pair whose margin is
//! already met. Since almost all pairs are negatives with comfortably
//! negative scores after early training, the backward kernels can skip
//! almost the whole gradient matrix; that is the implicit negative mining
//! effect. Binary cross-entropy gradients are never exactly zero, which is
//! what makes it the timing baseline.

use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, Scalar};

/// Sparse binary targets: per instance, the sorted set of positive labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    num_labels: usize,
    offsets: Vec<usize>,
    positives: Vec<u32>,
}

impl LabelMatrix {
    /// Builds from per-instance positive lists. Lists are sorted and
    /// deduplicated; labels outside `0..num_labels` are rejected.
    pub fn new(num_labels: usize, per_instance: Vec<Vec<u32>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(per_instance.len() + 1);
        offsets.push(0);
        let mut positives = Vec::new();
        for (i, mut row) in per_instance.into_iter().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&max) = row.last() {
                if max as usize >= num_labels {
                    return Err(Error::shape(
                        "label_matrix",
                        format!("instance {i} has label {max} outside 0..{num_labels}"),
                    ));
                }
            }
            positives.extend_from_slice(&row);
            offsets.push(positives.len());
        }
        Ok(LabelMatrix {
            num_labels,
            offsets,
            positives,
        })
    }

    pub fn num_instances(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn total_positives(&self) -> usize {
        self.positives.len()
    }

    /// Sorted positive labels of instance `i`.
    pub fn positives(&self, i: usize) -> &[u32] {
        &self.positives[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn is_positive(&self, i: usize, label: u32) -> bool {
        self.positives(i).binary_search(&label).is_ok()
    }

    /// New matrix holding the selected instances, in the given order.
    pub fn gather(&self, ids: &[usize]) -> LabelMatrix {
        let rows = ids.iter().map(|&i| self.positives(i).to_vec()).collect();
        LabelMatrix::new(self.num_labels, rows).expect("gathered labels stay in range")
    }

    /// Count of each label over all instances.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_labels];
        for &l in &self.positives {
            counts[l as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// One-vs-all squared hinge on +-1 targets.
    SquaredHinge,
    /// One-vs-all binary cross-entropy on logits, 0/1 targets.
    Bce,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::SquaredHinge => "sqh",
            LossKind::Bce => "bce",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqh" | "squared_hinge" => Ok(LossKind::SquaredHinge),
            "bce" => Ok(LossKind::Bce),
            other => Err(Error::config(format!("unknown loss {other:?}, expected sqh or bce"))),
        }
    }
}

fn check_dims<S: Scalar>(op: &'static str, scores: &DenseMatrix<S>, labels: &LabelMatrix) -> Result<()> {
    if scores.rows() != labels.num_instances() || scores.cols() != labels.num_labels() {
        return Err(Error::shape(
            op,
            format!(
                "scores are {}x{}, labels are {}x{}",
                scores.rows(),
                scores.cols(),
                labels.num_instances(),
                labels.num_labels()
            ),
        ));
    }
    Ok(())
}

/// Mean-over-instances squared hinge with +-1 targets:
/// `loss = (1/b) * sum max(0, 1 - y*score)^2`,
/// `d loss / d score = (1/b) * -2y * max(0, 1 - y*score)`.
///
/// Gradient entries of pairs that meet their margin (`y*score >= 1`) are
/// written as exact zeros so the sparse backward kernels can skip them.
pub fn squared_hinge<S: Scalar>(
    scores: &DenseMatrix<S>,
    labels: &LabelMatrix,
) -> Result<(S, DenseMatrix<S>)> {
    check_dims("squared_hinge", scores, labels)?;
    let b = scores.rows();
    let l = scores.cols();
    let inv_b = S::from_f64(1.0 / b.max(1) as f64);
    let two = S::from_f64(2.0);
    let mut grad = DenseMatrix::zeros(b, l);
    let row_losses: Vec<S> = grad
        .data_mut()
        .par_chunks_mut(l)
        .enumerate()
        .map(|(i, g_row)| {
            let s_row = scores.row(i);
            let mut pos = labels.positives(i).iter().peekable();
            let mut loss = S::ZERO;
            for (j, (&score, g)) in s_row.iter().zip(g_row.iter_mut()).enumerate() {
                let y_pos = matches!(pos.peek(), Some(&&p) if p as usize == j);
                if y_pos {
                    pos.next();
                }
                let y = if y_pos { S::ONE } else { -S::ONE };
                let margin = S::ONE - y * score;
                if margin > S::ZERO {
                    loss += margin * margin;
                    *g = -two * y * margin * inv_b;
                } // else leave the exact zero from init
            }
            loss
        })
        .collect();
    let total: S = row_losses.into_iter().sum();
    Ok((total * inv_b, grad))
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<S: Scalar>(t: S) -> S {
    if t >= S::ZERO {
        S::ONE / (S::ONE + (-t).exp())
    } else {
        let e = t.exp();
        e / (S::ONE + e)
    }
}

/// Mean-over-instances binary cross-entropy on logits with 0/1 targets,
/// summed over labels:
/// `loss = (1/b) * sum [ max(z, 0) - z*y + ln(1 + exp(-|z|)) ]`,
/// `d loss / d z = (1/b) * (sigmoid(z) - y)`.
///
/// The gradient for positives is computed as `-sigmoid(-z)` so it never
/// rounds to exact zero for finite scores; every pair keeps a live gradient.
pub fn bce_with_logits<S: Scalar>(
    scores: &DenseMatrix<S>,
    labels: &LabelMatrix,
) -> Result<(S, DenseMatrix<S>)> {
    check_dims("bce_with_logits", scores, labels)?;
    let b = scores.rows();
    let l = scores.cols();
    let inv_b = S::from_f64(1.0 / b.max(1) as f64);
    let mut grad = DenseMatrix::zeros(b, l);
    let row_losses: Vec<S> = grad
        .data_mut()
        .par_chunks_mut(l)
        .enumerate()
        .map(|(i, g_row)| {
            let s_row = scores.row(i);
            let mut pos = labels.positives(i).iter().peekable();
            let mut loss = S::ZERO;
            for (j, (&z, g)) in s_row.iter().zip(g_row.iter_mut()).enumerate() {
                let y_pos = matches!(pos.peek(), Some(&&p) if p as usize == j);
                if y_pos {
                    pos.next();
                }
                let softplus = (-z.abs()).exp().ln_1p();
                loss += z.max(S::ZERO) - if y_pos { z } else { S::ZERO } + softplus;
                *g = if y_pos { -sigmoid(-z) } else { sigmoid(z) } * inv_b;
            }
            loss
        })
        .collect();
    let total: S = row_losses.into_iter().sum();
    Ok((total * inv_b, grad))
}

pub fn compute_loss<S: Scalar>(
    kind: LossKind,
    scores: &DenseMatrix<S>,
    labels: &LabelMatrix,
) -> Result<(S, DenseMatrix<S>)> {
    match kind {
        LossKind::SquaredHinge => squared_hinge(scores, labels),
        LossKind::Bce => bce_with_logits(scores, labels),
    }
}
