//! Precision-at-k, the parameter memory report, and the run CSV schemas.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::LabelMatrix;
use crate::memory::{MatrixShape, SparseFormat};
use crate::model::{Head, Model};
use crate::tensor::{top_k, DenseMatrix, Scalar};

/// `p@k = mean over instances of |top_k(scores) intersect positives| / k`,
/// with top-k ties broken toward the lower label id. Instances with no
/// positives simply score 0 hits.
pub fn precision_at_k<S: Scalar>(
    scores: &DenseMatrix<S>,
    labels: &LabelMatrix,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if scores.rows() != labels.num_instances() || scores.cols() != labels.num_labels() {
        return Err(Error::shape(
            "precision_at_k",
            format!(
                "scores are {}x{}, labels are {}x{}",
                scores.rows(),
                scores.cols(),
                labels.num_instances(),
                labels.num_labels()
            ),
        ));
    }
    if ks.is_empty() {
        return Err(Error::config("precision_at_k needs at least one k"));
    }
    let max_k = *ks.iter().max().expect("non-empty");
    if max_k > scores.cols() || ks.contains(&0) {
        return Err(Error::shape(
            "precision_at_k",
            format!("ks {ks:?} outside 1..={}", scores.cols()),
        ));
    }
    // hits[i][q] = positives among the top (q+1) ranked labels of instance i.
    let hit_counts: Vec<Vec<u32>> = (0..scores.rows())
        .into_par_iter()
        .map(|i| {
            let ranked = top_k(scores.row(i), max_k).expect("max_k bounded above");
            let mut hits = Vec::with_capacity(max_k);
            let mut running = 0u32;
            for &label in &ranked {
                if labels.is_positive(i, label as u32) {
                    running += 1;
                }
                hits.push(running);
            }
            hits
        })
        .collect();
    let n = scores.rows().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let total: u64 = hit_counts.iter().map(|h| h[k - 1] as u64).sum();
            (k, total as f64 / (k as f64 * n))
        })
        .collect())
}

/// One evaluation pass summarized.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub p_at: BTreeMap<usize, f64>,
    pub n_instances: usize,
    pub loss: f64,
    pub wall_time_seconds: f64,
}

impl EvalReport {
    pub fn p(&self, k: usize) -> Option<f64> {
        self.p_at.get(&k).copied()
    }
}

/// Byte costs of a model's parameters under each storage format.
#[derive(Debug, Clone)]
pub struct MemoryReport {
    /// Shape of the head matrix (nnz reflects the actual head).
    pub head: MatrixShape,
    /// Dense intermediate blocks (weights + bias), f32 accounting.
    pub dense_block_bytes: u64,
}

impl MemoryReport {
    pub fn head_bytes(&self, format: SparseFormat) -> u64 {
        self.head.bytes(format)
    }

    /// Peak training bytes if the head used `format`: the head's values
    /// 4x'd (value, gradient, both Adam moments) plus its index structure,
    /// plus the dense blocks 4x'd.
    pub fn training_bytes(&self, format: SparseFormat) -> u64 {
        self.head.adam_training_bytes(format) + 4 * self.dense_block_bytes
    }

    pub fn by_format(&self) -> BTreeMap<&'static str, u64> {
        SparseFormat::ALL
            .iter()
            .map(|&f| (f.name(), self.head_bytes(f)))
            .collect()
    }
}

/// Costs the model's head under every format plus its dense blocks.
pub fn parameter_memory_report<S: Scalar>(model: &Model<S>) -> MemoryReport {
    let c = model.config();
    let head = match &model.head {
        Head::Dense(_) => MatrixShape::dense(c.head_input_dim() as u64, c.num_labels as u64),
        Head::Sparse(w) => MatrixShape::uniform(
            c.head_input_dim() as u64,
            c.num_labels as u64,
            w.fan_in() as u64,
        ),
    };
    let dense_block_bytes = model
        .intermediate
        .as_ref()
        .map_or(0, |l| 4 * (l.weights.data().len() as u64 + l.bias.len() as u64));
    MemoryReport {
        head,
        dense_block_bytes,
    }
}

pub const METRICS_CSV_HEADER: &str = "epoch,split,loss,p_at_1,p_at_3,p_at_5,lr,skip_fraction,epoch_seconds,head_bytes_uniform,head_bytes_dense";

/// One row of the run metrics CSV. Optional fields print as empty cells so
/// the schema never changes shape.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub p_at_1: Option<f64>,
    pub p_at_3: Option<f64>,
    pub p_at_5: Option<f64>,
    pub lr: f64,
    pub skip_fraction: Option<f64>,
    pub epoch_seconds: Option<f64>,
    pub head_bytes_uniform: u64,
    pub head_bytes_dense: u64,
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{},{:.6},{},{},{},{}",
            self.epoch,
            self.split,
            self.loss,
            cell(self.p_at_1),
            cell(self.p_at_3),
            cell(self.p_at_5),
            self.lr,
            cell(self.skip_fraction),
            cell(self.epoch_seconds),
            self.head_bytes_uniform,
            self.head_bytes_dense,
        )
    }
}

pub const REDISTRIBUTION_CSV_HEADER: &str = "step,mean_pruned_magnitude,max_pruned_magnitude";

pub fn redistribution_csv_row(step: u64, mean: f64, max: f64) -> String {
    format!("{step},{mean:.6},{max:.6}")
}
