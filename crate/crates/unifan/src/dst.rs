//! Connection redistribution: per column, prune the lowest-|weight|
//! connections and regrow the same number on sources the column was not
//! using. Fan-in never changes, so the storage layout and every other
//! column are untouched.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optim::AdamMoments;
use crate::rng::SplitRng;
use crate::sparse::UniformSparseMatrix;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegrowInit {
    /// New connections start at 0.0; they cannot spike the loss and Adam
    /// grows them from their first gradient.
    Zero,
    /// New connections draw `U(-1/sqrt(s), 1/sqrt(s))`, like init.
    Uniform,
}

impl RegrowInit {
    pub fn name(&self) -> &'static str {
        match self {
            RegrowInit::Zero => "zero",
            RegrowInit::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DstConfig {
    /// Fraction of each column pruned per event; `floor(prune_fraction * s)`
    /// entries, which must be at least 1.
    pub prune_fraction: f64,
    /// Steps between redistribution events when not in per-epoch mode.
    pub interval_steps: usize,
    /// Redistribute at the start of each epoch instead of on a step count.
    pub per_epoch: bool,
    pub regrow_init: RegrowInit,
}

impl Default for DstConfig {
    fn default() -> Self {
        DstConfig {
            prune_fraction: 0.1,
            interval_steps: 1000,
            per_epoch: false,
            regrow_init: RegrowInit::Zero,
        }
    }
}

impl DstConfig {
    pub fn pruned_per_column(&self, fan_in: usize) -> usize {
        (self.prune_fraction * fan_in as f64).floor() as usize
    }

    /// Checks the config against a concrete head shape. A fraction that
    /// floors to zero replacements would make every event a silent no-op,
    /// so it is rejected here rather than ignored.
    pub fn validate(&self, in_dim: usize, fan_in: usize) -> Result<()> {
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            return Err(Error::config(format!(
                "prune_fraction {} outside (0, 1)",
                self.prune_fraction
            )));
        }
        if !self.per_epoch && self.interval_steps == 0 {
            return Err(Error::config("interval_steps must be positive"));
        }
        if fan_in < 2 {
            return Err(Error::config(format!(
                "redistribution needs fan_in >= 2, got {fan_in}"
            )));
        }
        let p = self.pruned_per_column(fan_in);
        if p == 0 {
            return Err(Error::config(format!(
                "prune_fraction {} floors to 0 replacements at fan_in {fan_in}",
                self.prune_fraction
            )));
        }
        if in_dim - fan_in < p {
            return Err(Error::config(format!(
                "cannot regrow {p} connections: only {} structural zeros per column",
                in_dim - fan_in
            )));
        }
        Ok(())
    }
}

/// What one redistribution event did, for the run log.
#[derive(Debug, Clone)]
pub struct RedistributionReport {
    pub columns: usize,
    pub pruned_per_column: usize,
    /// |weight| of every pruned entry, concatenated column by column.
    pub pruned_magnitudes: Vec<f64>,
}

impl RedistributionReport {
    pub fn total_pruned(&self) -> usize {
        self.pruned_magnitudes.len()
    }

    pub fn mean_pruned_magnitude(&self) -> f64 {
        if self.pruned_magnitudes.is_empty() {
            0.0
        } else {
            self.pruned_magnitudes.iter().sum::<f64>() / self.pruned_magnitudes.len() as f64
        }
    }

    pub fn max_pruned_magnitude(&self) -> f64 {
        self.pruned_magnitudes.iter().copied().fold(0.0, f64::max)
    }
}

/// One prune/regrow cycle over every column of `matrix`.
///
/// Per column: the `p = floor(prune_fraction * s)` entries with smallest
/// |weight| are dropped (ties toward the lower slot), `p` replacement
/// sources are drawn uniformly without replacement from the sources the
/// column was *not* connected to before the call, new weights follow
/// `regrow_init`, and the Adam moments of the freed slots are zeroed.
/// Surviving connections keep their weights and moments; the column ends
/// sorted with exactly `s` distinct indices again.
///
/// Each column uses its own `rng.split(column)` stream, so the result is
/// independent of thread schedule and of how much `rng` itself was used.
pub fn prune_and_regrow<S: Scalar>(
    matrix: &mut UniformSparseMatrix<S>,
    moments: &mut AdamMoments<S>,
    cfg: &DstConfig,
    rng: &SplitRng,
) -> Result<RedistributionReport> {
    let (in_dim, s, l) = (matrix.in_dim(), matrix.fan_in(), matrix.num_labels());
    cfg.validate(in_dim, s)?;
    if moments.len() != matrix.nnz() {
        return Err(Error::shape(
            "prune_and_regrow",
            format!("{} moments for {} connections", moments.len(), matrix.nnz()),
        ));
    }
    let p = cfg.pruned_per_column(s);
    let regrow_scale = 1.0 / (s as f64).sqrt();

    let pruned_magnitudes: Vec<Vec<f64>> = matrix
        .indices
        .par_chunks_mut(s)
        .zip(matrix.weights.par_chunks_mut(s))
        .zip(moments.m.par_chunks_mut(s).zip(moments.v.par_chunks_mut(s)))
        .enumerate()
        .map(|(j, ((idx, wts), (mom_m, mom_v)))| {
            let mut col_rng = rng.split(j as u64);

            // Smallest-|w| slots first, ties toward the lower slot index.
            let mut order: Vec<usize> = (0..s).collect();
            order.sort_unstable_by(|&a, &b| {
                wts[a].abs().total_cmp(&wts[b].abs()).then_with(|| a.cmp(&b))
            });
            let pruned_slots = &order[..p];
            let mut is_pruned = vec![false; s];
            let mut magnitudes = Vec::with_capacity(p);
            for &slot in pruned_slots {
                is_pruned[slot] = true;
                magnitudes.push(wts[slot].abs().to_f64());
            }

            // Structural zeros of the pre-call column, ascending. `idx` is
            // sorted, so one merge pass finds the complement.
            let mut zeros = Vec::with_capacity(in_dim - s);
            let mut next = 0usize;
            for source in 0..in_dim as u32 {
                if next < s && idx[next] == source {
                    next += 1;
                } else {
                    zeros.push(source);
                }
            }
            let picks = rand::seq::index::sample(&mut col_rng, zeros.len(), p);

            // Survivors keep (index, weight, m, v); regrown slots start
            // fresh. Rebuild the column sorted by source index.
            let mut entries: Vec<(u32, S, S, S)> = Vec::with_capacity(s);
            for slot in 0..s {
                if !is_pruned[slot] {
                    entries.push((idx[slot], wts[slot], mom_m[slot], mom_v[slot]));
                }
            }
            for pick in picks.iter() {
                let weight = match cfg.regrow_init {
                    RegrowInit::Zero => S::ZERO,
                    RegrowInit::Uniform => S::from_f64(col_rng.gen_range(-regrow_scale..regrow_scale)),
                };
                entries.push((zeros[pick], weight, S::ZERO, S::ZERO));
            }
            entries.sort_unstable_by_key(|e| e.0);
            for (slot, (source, w, m, v)) in entries.into_iter().enumerate() {
                idx[slot] = source;
                wts[slot] = w;
                mom_m[slot] = m;
                mom_v[slot] = v;
            }
            magnitudes
        })
        .collect();

    Ok(RedistributionReport {
        columns: l,
        pruned_per_column: p,
        pruned_magnitudes: pruned_magnitudes.into_iter().flatten().collect(),
    })
}
