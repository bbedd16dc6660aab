//! Dataset ingestion and generation: the extreme-classification repository
//! text format, a binary blob for precomputed dense features, train/val
//! splitting, minibatching, and the clustered synthetic generator used by
//! the desk-scale experiments.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::LabelMatrix;
use crate::rng::SplitRng;
use crate::tensor::{DenseMatrix, Scalar};
use crate::wire;

pub const FEATURE_BLOB_MAGIC: &[u8; 4] = b"XFEA";
pub const FEATURE_BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub features: DenseMatrix<S>,
    pub labels: LabelMatrix,
    pub name: String,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(features: DenseMatrix<S>, labels: LabelMatrix, name: String) -> Result<Self> {
        if features.rows() != labels.num_instances() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{} feature rows vs {} label rows",
                    features.rows(),
                    labels.num_instances()
                ),
            ));
        }
        Ok(Dataset {
            features,
            labels,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.num_labels()
    }

    /// Copy of the selected instances, in order.
    pub fn gather(&self, ids: &[usize]) -> Dataset<S> {
        Dataset {
            features: self.features.gather_rows(ids),
            labels: self.labels.gather(ids),
            name: self.name.clone(),
        }
    }
}

/// Parses the extreme-classification repository text format:
/// a header `N d L`, then one line per instance of
/// `label,label,... idx:val idx:val ...` with 0-based indices. The label
/// field may be empty (line starts with a space); sparse features are
/// densified.
pub fn parse_xmc_text<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let fail = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let header = lines
        .next()
        .ok_or_else(|| fail(1, "empty file, expected header \"N d L\"".to_string()))??;
    let mut parts = header.split_whitespace();
    let mut next_count = |what: &str| -> Result<usize> {
        parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| fail(1, format!("bad header {header:?}: missing or non-numeric {what}")))
    };
    let n = next_count("instance count")?;
    let d = next_count("feature dim")?;
    let l = next_count("label count")?;
    if parts.next().is_some() {
        return Err(fail(1, format!("bad header {header:?}: expected exactly \"N d L\"")));
    }

    let mut features = DenseMatrix::<S>::zeros(n, d);
    let mut label_rows: Vec<Vec<u32>> = Vec::with_capacity(n);
    for i in 0..n {
        let lineno = i + 2;
        let line = lines
            .next()
            .ok_or_else(|| fail(lineno, format!("expected {n} instance rows, file ends at {i}")))??;
        let (label_part, feat_part) = match line.split_once(' ') {
            Some((a, b)) => (a, b),
            None => (line.as_str(), ""),
        };
        if label_part.contains(':') {
            return Err(fail(
                lineno,
                "row must start with a label list (use a leading space for no labels)".to_string(),
            ));
        }
        let mut row_labels = Vec::new();
        if !label_part.is_empty() {
            for tok in label_part.split(',') {
                let id: u32 = tok
                    .parse()
                    .map_err(|_| fail(lineno, format!("bad label id {tok:?}")))?;
                if id as usize >= l {
                    return Err(fail(lineno, format!("label id {id} outside 0..{l}")));
                }
                row_labels.push(id);
            }
        }
        label_rows.push(row_labels);

        let row = features.row_mut(i);
        let mut seen = vec![];
        for pair in feat_part.split_whitespace() {
            let (idx_tok, val_tok) = pair
                .split_once(':')
                .ok_or_else(|| fail(lineno, format!("bad feature pair {pair:?}, expected idx:val")))?;
            let idx: usize = idx_tok
                .parse()
                .map_err(|_| fail(lineno, format!("bad feature index {idx_tok:?}")))?;
            if idx >= d {
                return Err(fail(lineno, format!("feature index {idx} outside 0..{d}")));
            }
            if seen.contains(&idx) {
                return Err(fail(lineno, format!("feature index {idx} repeated")));
            }
            seen.push(idx);
            let val = S::parse(val_tok)
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(lineno, format!("bad feature value {val_tok:?}")))?;
            row[idx] = val;
        }
    }
    for extra in lines {
        if !extra?.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 2,
                msg: format!("more than {n} instance rows"),
            });
        }
    }
    let labels = LabelMatrix::new(l, label_rows)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Dataset::new(features, labels, name)
}

/// Writes the text format `parse_xmc_text` reads. Only non-zero features
/// are emitted; values use the shortest representation that parses back to
/// the same number.
pub fn write_xmc_text<S: Scalar>(ds: &Dataset<S>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{} {} {}", ds.len(), ds.feature_dim(), ds.num_labels())?;
    for i in 0..ds.len() {
        let labels = ds
            .labels
            .positives(i)
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        out.write_all(labels.as_bytes())?;
        for (idx, &val) in ds.features.row(i).iter().enumerate() {
            if val != S::ZERO {
                write!(out, " {idx}:{val}")?;
            }
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes an `N x d` feature matrix as an XFEA blob: magic, version, N as
/// u64, d as u32, then the payload row-major as little-endian f32.
pub fn write_feature_blob<S: Scalar>(features: &DenseMatrix<S>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(FEATURE_BLOB_MAGIC)?;
    wire::write_u32(&mut out, FEATURE_BLOB_VERSION)?;
    wire::write_u64(&mut out, features.rows() as u64)?;
    wire::write_u32(&mut out, features.cols() as u32)?;
    for &x in features.data() {
        wire::write_f32(&mut out, x.to_f64() as f32)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an XFEA blob. Truncated or oversized files error; no partial data
/// is ever returned.
pub fn load_feature_blob<S: Scalar>(path: &Path) -> Result<DenseMatrix<S>> {
    let mut input = BufReader::new(fs::File::open(path)?);
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FEATURE_BLOB_MAGIC {
        return Err(fail(format!("bad magic {magic:?}, expected XFEA")));
    }
    let version = wire::read_u32(&mut input)?;
    if version != FEATURE_BLOB_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let n = wire::read_u64(&mut input)? as usize;
    let d = wire::read_u32(&mut input)? as usize;
    let count = n
        .checked_mul(d)
        .ok_or_else(|| fail("element count overflows".to_string()))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(S::from_f64(wire::read_f32(&mut input)? as f64));
    }
    wire::expect_eof(&mut input)?;
    DenseMatrix::from_vec(n, d, data)
}

/// Parameters of the clustered synthetic task.
///
/// `clusters` centroids are drawn from a standard Gaussian in `R^d`.
/// Instance `i` belongs to cluster `i % clusters` and its features are the
/// centroid plus `noise`-scaled Gaussian jitter. Cluster `c` owns the label
/// block `[c*k, c*k + k)` where `k = positives_per_instance`; each block
/// label is kept with probability `1 - noise`, otherwise flipped to a
/// uniformly random label outside the block. Labels beyond `clusters * k`
/// appear only through flips, giving the label space a long noise tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_instances: usize,
    pub feature_dim: usize,
    pub num_labels: usize,
    pub positives_per_instance: usize,
    pub clusters: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 || self.feature_dim == 0 || self.num_labels == 0 {
            return Err(Error::config("synthetic sizes must be positive"));
        }
        if self.positives_per_instance == 0 {
            return Err(Error::config("positives_per_instance must be at least 1"));
        }
        if self.clusters == 0 || self.clusters > self.num_labels {
            return Err(Error::config(format!(
                "clusters {} outside 1..={}",
                self.clusters, self.num_labels
            )));
        }
        if self.clusters * self.positives_per_instance > self.num_labels {
            return Err(Error::config(format!(
                "{} clusters x {} positives exceed {} labels",
                self.clusters, self.positives_per_instance, self.num_labels
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise {} outside [0, 1)", self.noise)));
        }
        Ok(())
    }
}

/// One standard Gaussian draw (Box-Muller on two uniforms).
fn gauss(rng: &mut SplitRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates the clustered task described on [`SyntheticSpec`]. Identical
/// spec -> identical dataset; all randomness comes from `spec.seed`.
pub fn make_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<S>> {
    spec.validate()?;
    let k = spec.positives_per_instance;
    let (n, d, l, c) = (spec.n_instances, spec.feature_dim, spec.num_labels, spec.clusters);
    let mut rng = SplitRng::new(spec.seed);

    let mut centroids = DenseMatrix::<f64>::zeros(c, d);
    for x in centroids.data_mut() {
        *x = gauss(&mut rng);
    }

    let mut features = DenseMatrix::<S>::zeros(n, d);
    let mut label_rows = Vec::with_capacity(n);
    for i in 0..n {
        let cluster = i % c;
        let centroid = centroids.row(cluster);
        for (x, &mu) in features.row_mut(i).iter_mut().zip(centroid) {
            *x = S::from_f64(mu + spec.noise * gauss(&mut rng));
        }
        let block = (cluster * k) as u32..(cluster * k + k) as u32;
        let mut row = Vec::with_capacity(k);
        for label in block.clone() {
            let flip = spec.noise > 0.0 && rng.gen_range(0.0..1.0) < spec.noise;
            if flip && l > k {
                // Uniform over labels outside this cluster's block.
                loop {
                    let candidate = rng.gen_range(0..l as u32);
                    if !block.contains(&candidate) {
                        row.push(candidate);
                        break;
                    }
                }
            } else {
                row.push(label);
            }
        }
        label_rows.push(row);
    }
    let labels = LabelMatrix::new(l, label_rows)?;
    let name = format!(
        "synthetic-n{n}-d{d}-l{l}-c{c}-k{k}-noise{}-seed{}",
        spec.noise, spec.seed
    );
    Dataset::new(features, labels, name)
}

/// Splits off `fraction` of the instances (at least 1, at most N-1) as a
/// validation set, shuffling with `rng` first.
pub fn split_train_val<S: Scalar>(
    ds: &Dataset<S>,
    fraction: f64,
    rng: &mut SplitRng,
) -> Result<(Dataset<S>, Dataset<S>)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::config(format!("validation fraction {fraction} outside (0, 1)")));
    }
    if ds.len() < 2 {
        return Err(Error::config("need at least 2 instances to split"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let val_n = ((ds.len() as f64 * fraction).round() as usize).clamp(1, ds.len() - 1);
    let (val_ids, train_ids) = order.split_at(val_n);
    Ok((ds.gather(train_ids), ds.gather(val_ids)))
}

/// One minibatch: a copy of the batch's features and labels plus the
/// original instance ids.
pub struct Batch<S> {
    pub features: DenseMatrix<S>,
    pub labels: LabelMatrix,
    pub instance_ids: Vec<usize>,
}

/// Iterator over one epoch of minibatches. Every instance appears exactly
/// once; the final batch may be short. With `shuffle`, the visit order is a
/// permutation drawn from `rng` up front.
pub struct Batches<'a, S> {
    ds: &'a Dataset<S>,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

pub fn batches<'a, S: Scalar>(
    ds: &'a Dataset<S>,
    batch_size: usize,
    shuffle: bool,
    rng: &mut SplitRng,
) -> Result<Batches<'a, S>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        cursor: 0,
    })
}

impl<S: Scalar> Iterator for Batches<'_, S> {
    type Item = Batch<S>;

    fn next(&mut self) -> Option<Batch<S>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let ids = &self.order[self.cursor..end];
        self.cursor = end;
        Some(Batch {
            features: self.ds.features.gather_rows(ids),
            labels: self.ds.labels.gather(ids),
            instance_ids: ids.to_vec(),
        })
    }
}
