//! Label-hashing baseline: hash the label space into a small number of
//! buckets with several independent 2-universal hashes, train one
//! meta-classifier per hash, and recover per-label scores by an unbiased
//! affine decode. The stacked indicator matrix is a uniform fixed-fan-in
//! sparse matrix (fan-in = number of hashes), so decoding reuses the sparse
//! forward kernel.

use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::LabelMatrix;
use crate::rng::SplitRng;
use crate::sparse::{sparse_forward, UniformSparseMatrix};
use crate::tensor::{DenseMatrix, Scalar};

/// Ensemble shape: `num_hashes` (R) independent hashes, each mapping the
/// `num_labels` (L) labels into `num_buckets` (B) meta-labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachEnsembleSpec {
    pub num_labels: usize,
    pub num_hashes: usize,
    pub num_buckets: usize,
    pub seed: u64,
}

impl MachEnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels == 0 || self.num_hashes == 0 {
            return Err(Error::config("need at least one label and one hash"));
        }
        if self.num_buckets < 2 {
            return Err(Error::config(format!(
                "num_buckets {} must be at least 2 (the decode divides by B - 1)",
                self.num_buckets
            )));
        }
        Ok(())
    }
}

/// Smallest prime strictly greater than `n`, by trial division.
fn next_prime(n: u64) -> u64 {
    let is_prime = |x: u64| {
        if x.is_multiple_of(2) {
            return x == 2;
        }
        let mut f = 3;
        while f * f <= x {
            if x.is_multiple_of(f) {
                return false;
            }
            f += 2;
        }
        true
    };
    let mut candidate = n + 1;
    while !is_prime(candidate) {
        candidate += 1;
    }
    candidate
}

/// Bucket assignment of every label under every hash. Row `r` is the
/// function `l -> bucket`; the stacked 0/1 matrix has exactly one 1 per
/// label per hash, i.e. stacked row sums are exactly R.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrix {
    num_buckets: usize,
    /// `assignments[r][l]` is the bucket of label `l` under hash `r`.
    assignments: Vec<Vec<u32>>,
}

impl IndicatorMatrix {
    pub fn from_assignments(num_buckets: usize, assignments: Vec<Vec<u32>>) -> Result<Self> {
        if num_buckets < 2 {
            return Err(Error::config("need at least 2 buckets"));
        }
        let Some(first) = assignments.first() else {
            return Err(Error::config("need at least one hash"));
        };
        if first.is_empty() {
            return Err(Error::config("need at least one label"));
        }
        for row in &assignments {
            if row.len() != first.len() {
                return Err(Error::config("hash rows must cover the same label count"));
            }
            if let Some(&bad) = row.iter().find(|&&b| b as usize >= num_buckets) {
                return Err(Error::config(format!(
                    "bucket {bad} outside 0..{num_buckets}"
                )));
            }
        }
        Ok(IndicatorMatrix {
            num_buckets,
            assignments,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.assignments[0].len()
    }

    pub fn num_hashes(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    /// Width of the stacked meta-label space, R * B.
    pub fn stacked_dim(&self) -> usize {
        self.num_hashes() * self.num_buckets
    }

    pub fn bucket(&self, hash: usize, label: usize) -> u32 {
        self.assignments[hash][label]
    }

    /// Stacked meta-column of `(hash, bucket(hash, label))`.
    fn stacked_index(&self, hash: usize, label: usize) -> u32 {
        (hash * self.num_buckets) as u32 + self.assignments[hash][label]
    }

    /// The stacked indicator as a uniform fixed-fan-in matrix: one column
    /// per label with fan-in R, unit weights, column indices
    /// `r * B + bucket(r, l)`. Block offsets keep each column's indices
    /// strictly ascending.
    pub fn to_uniform_sparse<S: Scalar>(&self) -> Result<UniformSparseMatrix<S>> {
        let (l, r) = (self.num_labels(), self.num_hashes());
        let mut indices = Vec::with_capacity(l * r);
        for label in 0..l {
            for hash in 0..r {
                indices.push(self.stacked_index(hash, label));
            }
        }
        UniformSparseMatrix::new(self.stacked_dim(), l, r, indices, vec![S::ONE; l * r])
    }
}

/// Draws the ensemble's hash functions `h_r(l) = ((a_r*l + b_r) mod p) mod B`
/// with `p` the smallest prime above L, `a_r` in `[1, p)`, `b_r` in `[0, p)`,
/// and tabulates every label's bucket.
pub fn build_indicators(spec: &MachEnsembleSpec) -> Result<IndicatorMatrix> {
    spec.validate()?;
    let p = next_prime(spec.num_labels as u64);
    let b = spec.num_buckets as u64;
    let mut rng = SplitRng::new(spec.seed);
    let assignments = (0..spec.num_hashes)
        .map(|_| {
            let a_r = rng.gen_range(1..p);
            let b_r = rng.gen_range(0..p);
            (0..spec.num_labels as u64)
                .map(|l| (((a_r * l + b_r) % p) % b) as u32)
                .collect()
        })
        .collect();
    IndicatorMatrix::from_assignments(spec.num_buckets, assignments)
}

/// Training targets for the meta-classifiers: instance `i` is positive for
/// stacked meta-label `r*B + h_r(l)` iff some positive label `l` of `i`
/// hashes there (multilabel OR; bucket collisions don't double-count).
pub fn meta_targets(labels: &LabelMatrix, indicators: &IndicatorMatrix) -> Result<LabelMatrix> {
    if labels.num_labels() != indicators.num_labels() {
        return Err(Error::shape(
            "meta_targets",
            format!(
                "{} labels vs indicator over {}",
                labels.num_labels(),
                indicators.num_labels()
            ),
        ));
    }
    let rows = (0..labels.num_instances())
        .map(|i| {
            labels
                .positives(i)
                .iter()
                .flat_map(|&l| {
                    (0..indicators.num_hashes()).map(move |r| (r, l as usize))
                })
                .map(|(r, l)| indicators.stacked_index(r, l))
                .collect()
        })
        .collect();
    LabelMatrix::new(indicators.stacked_dim(), rows)
}

fn check_decode_args<S: Scalar>(
    meta_scores: &DenseMatrix<S>,
    indicators: &IndicatorMatrix,
) -> Result<()> {
    if meta_scores.cols() != indicators.stacked_dim() {
        return Err(Error::shape(
            "mach_decode",
            format!(
                "meta scores are {}x{}, indicator stacks to {}",
                meta_scores.rows(),
                meta_scores.cols(),
                indicators.stacked_dim()
            ),
        ));
    }
    meta_scores.check_finite("mach_decode meta scores")
}

/// Decodes per-label scores from meta scores:
/// `y[i][l] = (B/(B-1)) * ((1/R) * sum_r meta[i][r*B + h_r(l)] - 1/B)`.
/// The inner sum is the stacked indicator (a uniform sparse matrix with
/// unit weights) applied to the meta scores; the rest is one affine map.
pub fn mach_decode<S: Scalar>(
    meta_scores: &DenseMatrix<S>,
    indicators: &IndicatorMatrix,
) -> Result<DenseMatrix<S>> {
    check_decode_args(meta_scores, indicators)?;
    let sparse = indicators.to_uniform_sparse::<S>()?;
    let sums = sparse_forward(&sparse, meta_scores)?;
    let b = S::from_f64(indicators.num_buckets as f64);
    let r = S::from_f64(indicators.num_hashes() as f64);
    let gain = b / (b - S::ONE);
    Ok(sums.map(|v| gain * (v / r - S::ONE / b)))
}

/// Reference decode, one label at a time. Must match [`mach_decode`]; kept
/// as the readable form of the same formula.
pub fn mach_decode_per_label<S: Scalar>(
    meta_scores: &DenseMatrix<S>,
    indicators: &IndicatorMatrix,
) -> Result<DenseMatrix<S>> {
    check_decode_args(meta_scores, indicators)?;
    let (l, r, b) = (
        indicators.num_labels(),
        indicators.num_hashes(),
        indicators.num_buckets,
    );
    let gain = b as f64 / (b as f64 - 1.0);
    let mut out = DenseMatrix::<S>::zeros(meta_scores.rows(), l);
    for i in 0..meta_scores.rows() {
        let meta = meta_scores.row(i);
        let row = out.row_mut(i);
        for (label, y) in row.iter_mut().enumerate() {
            let mut acc = S::ZERO;
            for hash in 0..r {
                acc += meta[indicators.stacked_index(hash, label) as usize];
            }
            *y = S::from_f64(gain * (acc.to_f64() / r as f64 - 1.0 / b as f64));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spec(seed: u64, l: usize, r: usize, b: usize) -> IndicatorMatrix {
        build_indicators(&MachEnsembleSpec {
            num_labels: l,
            num_hashes: r,
            num_buckets: b,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn next_prime_small_values() {
        assert_eq!(next_prime(1), 2);
        assert_eq!(next_prime(2), 3);
        assert_eq!(next_prime(13), 17);
        assert_eq!(next_prime(1000), 1009);
        assert_eq!(next_prime(10000), 10007);
    }

    #[test]
    fn spec_validation() {
        let ok = MachEnsembleSpec {
            num_labels: 10,
            num_hashes: 2,
            num_buckets: 4,
            seed: 0,
        };
        assert!(build_indicators(&ok).is_ok());
        assert!(build_indicators(&MachEnsembleSpec { num_buckets: 1, ..ok }).is_err());
        assert!(build_indicators(&MachEnsembleSpec { num_hashes: 0, ..ok }).is_err());
        assert!(IndicatorMatrix::from_assignments(4, vec![vec![0, 4]]).is_err());
        assert!(IndicatorMatrix::from_assignments(4, vec![vec![0, 1], vec![2]]).is_err());
    }

    #[test]
    fn stacked_rows_sum_to_num_hashes() {
        let ind = random_spec(7, 53, 4, 6);
        let sparse = ind.to_uniform_sparse::<f64>().unwrap();
        let dense = sparse.to_dense().unwrap();
        for label in 0..53 {
            let mut per_block = [0.0; 4];
            let mut total = 0.0;
            for col in 0..ind.stacked_dim() {
                let v = dense[(col, label)];
                assert!(v == 0.0 || v == 1.0);
                total += v;
                per_block[col / 6] += v;
            }
            assert_eq!(total, 4.0, "stacked row sum is R");
            assert!(per_block.iter().all(|&s| s == 1.0), "one bucket per hash");
        }
    }

    #[test]
    fn bucket_occupancy_is_roughly_uniform() {
        // L / B = 100 expected per bucket. The hash is an affine bijection
        // mod a prime just above L, so occupancy is near-exact; assert the
        // loose chi-square bound dof + 6*sqrt(2*dof).
        let ind = random_spec(3, 10_000, 1, 100);
        let mut counts = vec![0f64; 100];
        for l in 0..10_000 {
            counts[ind.bucket(0, l) as usize] += 1.0;
        }
        let expected = 100.0;
        let chi2: f64 = counts.iter().map(|&c| (c - expected).powi(2) / expected).sum();
        let dof = 99.0;
        assert!(chi2 < dof + 6.0 * (2.0 * dof).sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn injective_draw_gives_permutation_blocks() {
        // B = L and a hash that happens to be injective: every block of the
        // stacked indicator is a permutation matrix.
        for seed in 0..50 {
            let ind = random_spec(seed, 5, 3, 5);
            for r in 0..3 {
                let mut seen = [false; 5];
                for l in 0..5 {
                    seen[ind.bucket(r, l) as usize] = true;
                }
                if !seen.iter().all(|&s| s) {
                    continue; // this block drew a collision; not the case under test
                }
                let sparse = ind.to_uniform_sparse::<f64>().unwrap();
                let dense = sparse.to_dense().unwrap();
                for l in 0..5 {
                    for bucket in 0..5 {
                        let want = if ind.bucket(r, l) == bucket as u32 { 1.0 } else { 0.0 };
                        assert_eq!(dense[(r * 5 + bucket, l)], want);
                    }
                }
            }
        }
    }

    #[test]
    fn meta_targets_or_semantics() {
        // Two hashes over 4 labels into 3 buckets, chosen so labels 0 and 2
        // collide under hash 0 but not hash 1.
        let ind = IndicatorMatrix::from_assignments(
            3,
            vec![vec![1, 0, 1, 2], vec![0, 1, 2, 0]],
        )
        .unwrap();
        let labels = LabelMatrix::new(4, vec![vec![0], vec![0, 2], vec![]]).unwrap();
        let meta = meta_targets(&labels, &ind).unwrap();
        assert_eq!(meta.num_labels(), 6);
        // Single positive: exactly R meta-positives, one per block.
        assert_eq!(meta.positives(0), &[1, 3]);
        // Collision in block 0 ORs down to one meta-positive there.
        assert_eq!(meta.positives(1), &[1, 3, 5]);
        assert_eq!(meta.positives(2), &[] as &[u32]);
    }

    #[test]
    fn meta_targets_match_double_loop_oracle() {
        let ind = random_spec(9, 31, 3, 5);
        let rows: Vec<Vec<u32>> = (0..40)
            .map(|i| (0..31).filter(|l| (i * 7 + l * 3) % 5 == 0).map(|l| l as u32).collect())
            .collect();
        let labels = LabelMatrix::new(31, rows.clone()).unwrap();
        let meta = meta_targets(&labels, &ind).unwrap();
        for (i, row) in rows.iter().enumerate() {
            for r in 0..3 {
                for bucket in 0..5u32 {
                    let expect = row.iter().any(|&l| ind.bucket(r, l as usize) == bucket);
                    let got = meta.is_positive(i, (r * 5) as u32 + bucket);
                    assert_eq!(got, expect, "instance {i} hash {r} bucket {bucket}");
                }
            }
        }
    }

    #[test]
    fn matrix_and_per_label_decode_agree() {
        let mut rng = SplitRng::new(21);
        for (l, r, b) in [(17, 4, 3), (40, 2, 8), (5, 1, 5)] {
            let ind = random_spec(l as u64, l, r, b);
            let mut meta = DenseMatrix::<f64>::zeros(9, r * b);
            for x in meta.data_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
            let fast = mach_decode(&meta, &ind).unwrap();
            let slow = mach_decode_per_label(&meta, &ind).unwrap();
            for i in 0..9 {
                for label in 0..l {
                    assert!(
                        (fast[(i, label)] - slow[(i, label)]).abs() < 1e-12,
                        "({i}, {label})"
                    );
                }
            }
        }
    }

    #[test]
    fn decode_rejects_bad_input() {
        let ind = random_spec(0, 6, 2, 3);
        let wrong = DenseMatrix::<f64>::zeros(2, 7);
        assert!(mach_decode(&wrong, &ind).is_err());
        let mut inf = DenseMatrix::<f64>::zeros(2, 6);
        inf.data_mut()[3] = f64::INFINITY;
        assert!(mach_decode(&inf, &ind).is_err());
    }

    #[test]
    fn identity_block_decode_is_affine_in_posteriors() {
        // R = 1, B = L, identity assignment, meta scores = exact posteriors:
        // decode equals (B/(B-1)) * (q - 1/B), which preserves the ranking.
        let ind = IndicatorMatrix::from_assignments(4, vec![vec![0, 1, 2, 3]]).unwrap();
        let q = vec![0.4, 0.1, 0.3, 0.2];
        let meta = DenseMatrix::from_rows(std::slice::from_ref(&q)).unwrap();
        let decoded = mach_decode(&meta, &ind).unwrap();
        for (label, &ql) in q.iter().enumerate() {
            let want = (4.0 / 3.0) * (ql - 0.25);
            assert!((decoded[(0, label)] - want).abs() < 1e-15);
        }
        let ranking = crate::tensor::top_k(decoded.row(0), 4).unwrap();
        assert_eq!(ranking, vec![0, 2, 3, 1]);
    }

    /// Averages the decode over every possible single-hash assignment
    /// `[L] -> [B]` with exact bucket posteriors; the estimator is unbiased,
    /// so the average recovers the multiclass distribution exactly.
    fn brute_force_expectation(p: &[f64], b: usize) -> Vec<f64> {
        let l = p.len();
        let combos = (b as u64).pow(l as u32);
        let mut mean = vec![0.0; l];
        for code in 0..combos {
            let mut assignment = Vec::with_capacity(l);
            let mut rest = code;
            for _ in 0..l {
                assignment.push((rest % b as u64) as u32);
                rest /= b as u64;
            }
            let mut bucket_mass = vec![0.0; b];
            for (label, &bucket) in assignment.iter().enumerate() {
                bucket_mass[bucket as usize] += p[label];
            }
            let ind = IndicatorMatrix::from_assignments(b, vec![assignment]).unwrap();
            let meta = DenseMatrix::from_rows(std::slice::from_ref(&bucket_mass)).unwrap();
            let decoded = mach_decode(&meta, &ind).unwrap();
            for (label, m) in mean.iter_mut().enumerate() {
                *m += decoded[(0, label)];
            }
        }
        mean.iter().map(|m| m / combos as f64).collect()
    }

    #[test]
    fn worked_two_label_expectation() {
        // p = (0.7, 0.3), B = 2. Over the 4 assignments: half collide
        // (decode for label 0 is 2*1.0 - 1 = 1), half are disjoint
        // (2*0.7 - 1 = 0.4); the average is 0.7, i.e. p0 exactly.
        let mean = brute_force_expectation(&[0.7, 0.3], 2);
        assert!((mean[0] - 0.7).abs() < 1e-12, "{}", mean[0]);
        assert!((mean[1] - 0.3).abs() < 1e-12, "{}", mean[1]);
    }

    #[test]
    fn expectation_over_all_assignments_recovers_probabilities() {
        let cases: [(&[f64], usize); 4] = [
            (&[0.7, 0.3], 2),
            (&[0.5, 0.25, 0.25], 2),
            (&[0.4, 0.3, 0.2, 0.1], 3),
            (&[0.85, 0.05, 0.05, 0.05], 2),
        ];
        for (p, b) in cases {
            let mean = brute_force_expectation(p, b);
            for (label, (&got, &want)) in mean.iter().zip(p).enumerate() {
                assert!(
                    (got - want).abs() < 1e-10,
                    "B={b} label {label}: {got} vs {want}"
                );
            }
        }
    }
}
