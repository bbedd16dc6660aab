//! Uniform fixed-fan-in sparse matrix and its three kernels.
//!
//! A `d x L` weight matrix where every label column holds exactly `fan_in`
//! structural non-zeros is stored as two column-contiguous `fan_in x L`
//! arrays: `u32` source-feature indices and weights. Total cost is 8 bytes
//! per connection and the column pointer arithmetic is implicit, so kernels
//! parallelize freely over (instance, label) pairs.
//!
//! Indices within a column are kept sorted ascending. That is the canonical
//! form: it makes column set comparison cheap and gives the kernels the same
//! accumulation order as a dense loop over source features, so sparse and
//! scattered-dense results agree bit for bit in 64-bit arithmetic.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::{DenseMatrix, Scalar};
use crate::wire;

pub const SPARSE_BLOB_MAGIC: &[u8; 4] = b"UFSM";
pub const SPARSE_BLOB_VERSION: u32 = 1;

/// Counters from the gradient-zero skip path in the backward kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipStats {
    /// (instance, label) pairs whose upstream gradient was exactly zero.
    pub skipped: u64,
    /// All (instance, label) pairs visited.
    pub total: u64,
}

impl SkipStats {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.skipped as f64 / self.total as f64
        }
    }

    pub fn merge(&mut self, other: SkipStats) {
        self.skipped += other.skipped;
        self.total += other.total;
    }
}

/// Weight matrix with exactly `fan_in` connections per label column.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformSparseMatrix<S> {
    in_dim: usize,
    num_labels: usize,
    fan_in: usize,
    /// Column-contiguous: entry `w` of column `j` lives at `j * fan_in + w`.
    pub(crate) indices: Vec<u32>,
    pub(crate) weights: Vec<S>,
}

impl<S: Scalar> UniformSparseMatrix<S> {
    /// Builds from raw column-contiguous arrays. Columns are sorted into
    /// canonical ascending order (weights carried along); out-of-range or
    /// duplicate indices within a column are rejected.
    pub fn new(
        in_dim: usize,
        num_labels: usize,
        fan_in: usize,
        mut indices: Vec<u32>,
        mut weights: Vec<S>,
    ) -> Result<Self> {
        if fan_in == 0 || fan_in > in_dim {
            return Err(Error::config(format!(
                "fan_in {fan_in} must be in 1..={in_dim} (input width)"
            )));
        }
        if in_dim > u32::MAX as usize {
            return Err(Error::config(format!("input width {in_dim} exceeds u32 index range")));
        }
        let expect = fan_in * num_labels;
        if indices.len() != expect || weights.len() != expect {
            return Err(Error::shape(
                "uniform_sparse_new",
                format!(
                    "{num_labels} columns with fan-in {fan_in} need {expect} entries, got {} indices and {} weights",
                    indices.len(),
                    weights.len()
                ),
            ));
        }
        for j in 0..num_labels {
            let col = &mut indices[j * fan_in..(j + 1) * fan_in];
            let wts = &mut weights[j * fan_in..(j + 1) * fan_in];
            let mut order: Vec<usize> = (0..fan_in).collect();
            order.sort_unstable_by_key(|&w| col[w]);
            let sorted_idx: Vec<u32> = order.iter().map(|&w| col[w]).collect();
            let sorted_wts: Vec<S> = order.iter().map(|&w| wts[w]).collect();
            col.copy_from_slice(&sorted_idx);
            wts.copy_from_slice(&sorted_wts);
            for w in 0..fan_in {
                if col[w] as usize >= in_dim {
                    return Err(Error::shape(
                        "uniform_sparse_new",
                        format!("column {j} references source {} outside width {in_dim}", col[w]),
                    ));
                }
                if w > 0 && col[w] == col[w - 1] {
                    return Err(Error::shape(
                        "uniform_sparse_new",
                        format!("column {j} repeats source index {}", col[w]),
                    ));
                }
            }
        }
        Ok(UniformSparseMatrix {
            in_dim,
            num_labels,
            fan_in,
            indices,
            weights,
        })
    }

    /// Random connectivity: each column draws `fan_in` distinct sources
    /// uniformly and weights from `U(-scale, scale)`. Columns are drawn in
    /// ascending order from `rng`, so the layout is a pure function of the
    /// seed.
    pub fn random(
        in_dim: usize,
        num_labels: usize,
        fan_in: usize,
        scale: f64,
        rng: &mut SplitRng,
    ) -> Result<Self> {
        if fan_in == 0 || fan_in > in_dim {
            return Err(Error::config(format!(
                "fan_in {fan_in} must be in 1..={in_dim} (input width)"
            )));
        }
        let mut indices = Vec::with_capacity(fan_in * num_labels);
        let mut weights = Vec::with_capacity(fan_in * num_labels);
        for _ in 0..num_labels {
            let mut picks: Vec<usize> = rand::seq::index::sample(rng, in_dim, fan_in).into_vec();
            picks.sort_unstable();
            indices.extend(picks.iter().map(|&p| p as u32));
            for _ in 0..fan_in {
                weights.push(S::from_f64(rng.gen_range(-scale..scale)));
            }
        }
        UniformSparseMatrix::new(in_dim, num_labels, fan_in, indices, weights)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn nnz(&self) -> usize {
        self.fan_in * self.num_labels
    }

    pub fn column_indices(&self, j: usize) -> &[u32] {
        &self.indices[j * self.fan_in..(j + 1) * self.fan_in]
    }

    pub fn column_weights(&self, j: usize) -> &[S] {
        &self.weights[j * self.fan_in..(j + 1) * self.fan_in]
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [S] {
        &mut self.weights
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Scatters into a `d x L` dense matrix. Errors if the canonical-form
    /// invariant (sorted, distinct, in-range columns) has been broken.
    pub fn to_dense(&self) -> Result<DenseMatrix<S>> {
        self.validate()?;
        let mut out = DenseMatrix::zeros(self.in_dim, self.num_labels);
        for j in 0..self.num_labels {
            let col = self.column_indices(j);
            let wts = self.column_weights(j);
            for (&src, &w) in col.iter().zip(wts) {
                out[(src as usize, j)] = w;
            }
        }
        Ok(out)
    }

    /// Re-checks the structural invariants; cheap relative to any kernel.
    pub fn validate(&self) -> Result<()> {
        for j in 0..self.num_labels {
            let col = self.column_indices(j);
            for w in 0..self.fan_in {
                if col[w] as usize >= self.in_dim {
                    return Err(Error::shape(
                        "uniform_sparse_validate",
                        format!("column {j} references source {} outside width {}", col[w], self.in_dim),
                    ));
                }
                if w > 0 && col[w] <= col[w - 1] {
                    return Err(Error::shape(
                        "uniform_sparse_validate",
                        format!("column {j} is not sorted strictly ascending at slot {w}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (pos, w) in self.weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{what} at column {} slot {}: {w}",
                    pos / self.fan_in,
                    pos % self.fan_in
                )));
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> UniformSparseMatrix<T> {
        UniformSparseMatrix {
            in_dim: self.in_dim,
            num_labels: self.num_labels,
            fan_in: self.fan_in,
            indices: self.indices.clone(),
            weights: self.weights.iter().map(|&w| T::from_f64(w.to_f64())).collect(),
        }
    }

    /// Binary layout: magic `UFSM`, version, `in_dim`, `num_labels`,
    /// `fan_in` (all u32 LE), then indices and weights column-contiguous.
    /// Weights are stored as f32.
    pub fn write_blob<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(SPARSE_BLOB_MAGIC)?;
        wire::write_u32(out, SPARSE_BLOB_VERSION)?;
        wire::write_u32(out, self.in_dim as u32)?;
        wire::write_u32(out, self.num_labels as u32)?;
        wire::write_u32(out, self.fan_in as u32)?;
        for &i in &self.indices {
            wire::write_u32(out, i)?;
        }
        for &w in &self.weights {
            wire::write_f32(out, w.to_f64() as f32)?;
        }
        Ok(())
    }

    /// Reads a blob written by [`write_blob`](Self::write_blob), re-running
    /// all construction-time validation. `name` labels errors.
    pub fn read_blob<R: Read>(input: &mut R, name: &str) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: name.into(),
            msg,
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != SPARSE_BLOB_MAGIC {
            return Err(fail(format!("bad magic {magic:?}, expected UFSM")));
        }
        let version = wire::read_u32(input)?;
        if version != SPARSE_BLOB_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let in_dim = wire::read_u32(input)? as usize;
        let num_labels = wire::read_u32(input)? as usize;
        let fan_in = wire::read_u32(input)? as usize;
        let n = fan_in
            .checked_mul(num_labels)
            .ok_or_else(|| fail("entry count overflows".to_string()))?;
        let mut indices = Vec::with_capacity(n);
        for _ in 0..n {
            indices.push(wire::read_u32(input)?);
        }
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(S::from_f64(wire::read_f32(input)? as f64));
        }
        wire::expect_eof(input)?;
        UniformSparseMatrix::new(in_dim, num_labels, fan_in, indices, weights)
    }
}

/// `scores[i,j] = sum_w features[i, indices[w,j]] * weights[w,j]`.
///
/// One worker owns each instance row; within a (row, label) pair the fan-in
/// loop runs in slot order. Because columns are sorted ascending this is the
/// same accumulation order a dense kernel uses over the scattered matrix.
pub fn sparse_forward<S: Scalar>(
    matrix: &UniformSparseMatrix<S>,
    features: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>> {
    if features.cols() != matrix.in_dim {
        return Err(Error::shape(
            "sparse_forward",
            format!("features are {}x{}, matrix wants width {}", features.rows(), features.cols(), matrix.in_dim),
        ));
    }
    let (b, l, s) = (features.rows(), matrix.num_labels, matrix.fan_in);
    let mut out = DenseMatrix::zeros(b, l);
    let feat = features.data();
    let d = features.cols();
    out.data_mut()
        .par_chunks_mut(l)
        .enumerate()
        .for_each(|(i, out_row)| {
            let f_row = &feat[i * d..(i + 1) * d];
            for (j, o) in out_row.iter_mut().enumerate() {
                let idx = &matrix.indices[j * s..(j + 1) * s];
                let wts = &matrix.weights[j * s..(j + 1) * s];
                let mut acc = S::ZERO;
                for (&src, &w) in idx.iter().zip(wts) {
                    acc += f_row[src as usize] * w;
                }
                *o = acc;
            }
        });
    Ok(out)
}

/// `grad_features[i,k] = sum_j upstream[i,j] * W[k,j]` over the structural
/// non-zeros, with the whole label skipped when `upstream[i,j]` is exactly
/// zero. The skip happens before any index or weight is read, which is where
/// the implicit-negative-mining speedup comes from. Returns how often it
/// fired.
pub fn sparse_backward_input<S: Scalar>(
    matrix: &UniformSparseMatrix<S>,
    upstream: &DenseMatrix<S>,
) -> Result<(DenseMatrix<S>, SkipStats)> {
    if upstream.cols() != matrix.num_labels {
        return Err(Error::shape(
            "sparse_backward_input",
            format!("upstream is {}x{}, matrix has {} labels", upstream.rows(), upstream.cols(), matrix.num_labels),
        ));
    }
    let (b, l, s, d) = (upstream.rows(), matrix.num_labels, matrix.fan_in, matrix.in_dim);
    let mut grad = DenseMatrix::zeros(b, d);
    let up = upstream.data();
    let skipped: u64 = grad
        .data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, g_row)| {
            let up_row = &up[i * l..(i + 1) * l];
            let mut row_skipped = 0u64;
            for (j, &g) in up_row.iter().enumerate() {
                if g == S::ZERO {
                    row_skipped += 1;
                    continue;
                }
                let idx = &matrix.indices[j * s..(j + 1) * s];
                let wts = &matrix.weights[j * s..(j + 1) * s];
                for (&src, &w) in idx.iter().zip(wts) {
                    g_row[src as usize] += w * g;
                }
            }
            row_skipped
        })
        .sum();
    Ok((
        grad,
        SkipStats {
            skipped,
            total: (b * l) as u64,
        },
    ))
}

/// `grad[w,j] = sum_i features[i, indices[w,j]] * upstream[i,j]`, returned
/// column-contiguous and congruent to the matrix's weight array. Instances
/// with exactly zero upstream are skipped before the feature load. One
/// worker owns each label column; instances accumulate in ascending order.
pub fn sparse_backward_weights<S: Scalar>(
    matrix: &UniformSparseMatrix<S>,
    features: &DenseMatrix<S>,
    upstream: &DenseMatrix<S>,
) -> Result<(Vec<S>, SkipStats)> {
    if features.cols() != matrix.in_dim {
        return Err(Error::shape(
            "sparse_backward_weights",
            format!("features are {}x{}, matrix wants width {}", features.rows(), features.cols(), matrix.in_dim),
        ));
    }
    if upstream.cols() != matrix.num_labels || upstream.rows() != features.rows() {
        return Err(Error::shape(
            "sparse_backward_weights",
            format!(
                "upstream is {}x{}, want {}x{}",
                upstream.rows(),
                upstream.cols(),
                features.rows(),
                matrix.num_labels
            ),
        ));
    }
    let (b, l, s, d) = (features.rows(), matrix.num_labels, matrix.fan_in, matrix.in_dim);
    let mut grad = vec![S::ZERO; s * l];
    let feat = features.data();
    let up = upstream.data();
    let skipped: u64 = grad
        .par_chunks_mut(s)
        .enumerate()
        .map(|(j, g_col)| {
            let idx = &matrix.indices[j * s..(j + 1) * s];
            let mut col_skipped = 0u64;
            for i in 0..b {
                let g = up[i * l + j];
                if g == S::ZERO {
                    col_skipped += 1;
                    continue;
                }
                let f_row = &feat[i * d..(i + 1) * d];
                for (acc, &src) in g_col.iter_mut().zip(idx) {
                    *acc += f_row[src as usize] * g;
                }
            }
            col_skipped
        })
        .sum();
    Ok((
        grad,
        SkipStats {
            skipped,
            total: (b * l) as u64,
        },
    ))
}
