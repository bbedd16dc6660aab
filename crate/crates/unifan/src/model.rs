//! The classifier pipeline: features -> dropout -> optional dense
//! intermediate layer (with activation) -> output head.
//!
//! The head is either a plain dense matrix or a uniform fixed-fan-in sparse
//! matrix. Parameters are addressed through [`ParamBlock`] so the optimizer,
//! the redistribution pass, and the gradient checker all see the same flat
//! views in the same fixed order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::sparse::{
    sparse_backward_input, sparse_backward_weights, sparse_forward, SkipStats, UniformSparseMatrix,
};
use crate::tensor::{
    dense_backward_bias, dense_backward_input, dense_backward_weights, dense_forward, dropout,
    relu, relu_backward, DenseMatrix, Scalar,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Dense,
    UniformSparse { fan_in: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_labels: usize,
    /// Width of the dense layer between features and head; `None` puts the
    /// head directly on the (dropped-out) features.
    pub intermediate_dim: Option<usize>,
    pub head: HeadKind,
    pub activation: Activation,
    /// Input dropout rate, applied to the raw features during training.
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Width of whatever feeds the head.
    pub fn head_input_dim(&self) -> usize {
        self.intermediate_dim.unwrap_or(self.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if self.num_labels == 0 {
            return Err(Error::config("num_labels must be positive"));
        }
        if self.intermediate_dim == Some(0) {
            return Err(Error::config("intermediate_dim must be positive when present"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let HeadKind::UniformSparse { fan_in } = self.head {
            // fan_in == width is the degenerate fully-connected case; it is
            // allowed here (it must reproduce a dense head exactly) but
            // redistribution refuses it since no structural zeros exist.
            let width = self.head_input_dim();
            if fan_in < 2 || fan_in > width {
                return Err(Error::config(format!(
                    "fan_in {fan_in} must be in 2..={width} (head input width)"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<S> {
    pub weights: DenseMatrix<S>,
    pub bias: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<S> {
    Dense(DenseMatrix<S>),
    Sparse(UniformSparseMatrix<S>),
}

/// Addresses one flat parameter array of the model. Block order is fixed:
/// intermediate weights, intermediate bias, head weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    IntermediateWeights,
    IntermediateBias,
    HeadWeights,
}

impl ParamBlock {
    pub fn name(&self) -> &'static str {
        match self {
            ParamBlock::IntermediateWeights => "intermediate_weights",
            ParamBlock::IntermediateBias => "intermediate_bias",
            ParamBlock::HeadWeights => "head_weights",
        }
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    /// Features after input dropout (identity in eval mode), `b x d`.
    pub dropped: DenseMatrix<S>,
    /// Intermediate pre-activation, `b x m`, when the layer exists.
    pub pre_activation: Option<DenseMatrix<S>>,
    /// Intermediate post-activation, `b x m`, when the layer exists.
    pub hidden: Option<DenseMatrix<S>>,
    /// Head outputs, `b x L`.
    pub scores: DenseMatrix<S>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn head_input(&self) -> &DenseMatrix<S> {
        self.hidden.as_ref().unwrap_or(&self.dropped)
    }
}

/// Gradients congruent to the model's parameter blocks, plus how often the
/// head backward pass skipped a zero upstream entry.
#[derive(Debug, Clone)]
pub struct GradientSet<S> {
    pub intermediate_weights: Option<Vec<S>>,
    pub intermediate_bias: Option<Vec<S>>,
    pub head_weights: Vec<S>,
    pub skip: SkipStats,
}

impl<S: Scalar> GradientSet<S> {
    pub fn block(&self, block: ParamBlock) -> Option<&[S]> {
        match block {
            ParamBlock::IntermediateWeights => self.intermediate_weights.as_deref(),
            ParamBlock::IntermediateBias => self.intermediate_bias.as_deref(),
            ParamBlock::HeadWeights => Some(&self.head_weights),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    pub intermediate: Option<DenseLayer<S>>,
    pub head: Head<S>,
}

impl<S: Scalar> Model<S> {
    /// Initializes parameters from the config seed alone. Dense blocks draw
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` where fan-in is the layer input
    /// width; sparse head weights draw `U(-1/sqrt(s), 1/sqrt(s))`. Draws
    /// happen in a fixed order (intermediate, then head), so two models with
    /// the same config are identical.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitRng::new(config.seed);
        let intermediate = match config.intermediate_dim {
            Some(m) => {
                let scale = 1.0 / (config.feature_dim as f64).sqrt();
                let mut weights = DenseMatrix::zeros(config.feature_dim, m);
                for w in weights.data_mut() {
                    *w = S::from_f64(rng.gen_range(-scale..scale));
                }
                Some(DenseLayer {
                    weights,
                    bias: vec![S::ZERO; m],
                })
            }
            None => None,
        };
        let head_in = config.head_input_dim();
        let head = match config.head {
            HeadKind::Dense => {
                let scale = 1.0 / (head_in as f64).sqrt();
                let mut weights = DenseMatrix::zeros(head_in, config.num_labels);
                for w in weights.data_mut() {
                    *w = S::from_f64(rng.gen_range(-scale..scale));
                }
                Head::Dense(weights)
            }
            HeadKind::UniformSparse { fan_in } => {
                let scale = 1.0 / (fan_in as f64).sqrt();
                Head::Sparse(UniformSparseMatrix::random(
                    head_in,
                    config.num_labels,
                    fan_in,
                    scale,
                    &mut rng,
                )?)
            }
        };
        Ok(Model {
            config,
            intermediate,
            head,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        intermediate: Option<DenseLayer<S>>,
        head: Head<S>,
    ) -> Result<Self> {
        config.validate()?;
        let model = Model {
            config,
            intermediate,
            head,
        };
        model.check_consistent()?;
        Ok(model)
    }

    fn check_consistent(&self) -> Result<()> {
        let c = &self.config;
        match (&self.intermediate, c.intermediate_dim) {
            (Some(layer), Some(m)) => {
                if layer.weights.rows() != c.feature_dim
                    || layer.weights.cols() != m
                    || layer.bias.len() != m
                {
                    return Err(Error::shape(
                        "model",
                        format!(
                            "intermediate layer is {}x{} (+{} bias), config wants {}x{m}",
                            layer.weights.rows(),
                            layer.weights.cols(),
                            layer.bias.len(),
                            c.feature_dim
                        ),
                    ));
                }
            }
            (None, None) => {}
            _ => return Err(Error::shape("model", "intermediate layer presence disagrees with config")),
        }
        match (&self.head, c.head) {
            (Head::Dense(w), HeadKind::Dense) => {
                if w.rows() != c.head_input_dim() || w.cols() != c.num_labels {
                    return Err(Error::shape(
                        "model",
                        format!(
                            "dense head is {}x{}, config wants {}x{}",
                            w.rows(),
                            w.cols(),
                            c.head_input_dim(),
                            c.num_labels
                        ),
                    ));
                }
            }
            (Head::Sparse(w), HeadKind::UniformSparse { fan_in }) => {
                if w.in_dim() != c.head_input_dim()
                    || w.num_labels() != c.num_labels
                    || w.fan_in() != fan_in
                {
                    return Err(Error::shape(
                        "model",
                        format!(
                            "sparse head is {}x{} fan-in {}, config wants {}x{} fan-in {fan_in}",
                            w.in_dim(),
                            w.num_labels(),
                            w.fan_in(),
                            c.head_input_dim(),
                            c.num_labels
                        ),
                    ));
                }
            }
            _ => return Err(Error::shape("model", "head kind disagrees with config")),
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter blocks present on this model, in update order.
    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::with_capacity(3);
        if self.intermediate.is_some() {
            blocks.push(ParamBlock::IntermediateWeights);
            blocks.push(ParamBlock::IntermediateBias);
        }
        blocks.push(ParamBlock::HeadWeights);
        blocks
    }

    pub fn block_values(&self, block: ParamBlock) -> Option<&[S]> {
        match block {
            ParamBlock::IntermediateWeights => {
                self.intermediate.as_ref().map(|l| l.weights.data())
            }
            ParamBlock::IntermediateBias => self.intermediate.as_ref().map(|l| l.bias.as_slice()),
            ParamBlock::HeadWeights => Some(match &self.head {
                Head::Dense(w) => w.data(),
                Head::Sparse(w) => w.weights(),
            }),
        }
    }

    pub fn block_values_mut(&mut self, block: ParamBlock) -> Option<&mut [S]> {
        match block {
            ParamBlock::IntermediateWeights => {
                self.intermediate.as_mut().map(|l| l.weights.data_mut())
            }
            ParamBlock::IntermediateBias => {
                self.intermediate.as_mut().map(|l| l.bias.as_mut_slice())
            }
            ParamBlock::HeadWeights => Some(match &mut self.head {
                Head::Dense(w) => w.data_mut(),
                Head::Sparse(w) => w.weights_mut(),
            }),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks()
            .iter()
            .map(|&b| self.block_values(b).map_or(0, <[S]>::len))
            .sum()
    }

    /// Runs the pipeline. In training mode the dropout mask is drawn
    /// sequentially from `rng`; in eval mode `rng` is untouched and dropout
    /// is the identity.
    pub fn forward(
        &self,
        features: &DenseMatrix<S>,
        training: bool,
        rng: &mut SplitRng,
    ) -> Result<ForwardTrace<S>> {
        if features.cols() != self.config.feature_dim {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "features are {}x{}, model wants width {}",
                    features.rows(),
                    features.cols(),
                    self.config.feature_dim
                ),
            ));
        }
        let (dropped, _mask) = dropout(features, self.config.dropout, training, rng)?;
        let (pre_activation, hidden) = match &self.intermediate {
            Some(layer) => {
                let z = dense_forward(&dropped, &layer.weights, Some(&layer.bias))?;
                let a = match self.config.activation {
                    Activation::Relu => relu(&z),
                    Activation::Identity => z.clone(),
                };
                (Some(z), Some(a))
            }
            None => (None, None),
        };
        let head_input = hidden.as_ref().unwrap_or(&dropped);
        let scores = match &self.head {
            Head::Dense(w) => dense_forward(head_input, w, None)?,
            Head::Sparse(w) => sparse_forward(w, head_input)?,
        };
        Ok(ForwardTrace {
            dropped,
            pre_activation,
            hidden,
            scores,
        })
    }

    /// Backpropagates `grad_scores` through head and intermediate layer.
    /// The trace must come from this model's `forward` on the same batch;
    /// mismatched shapes are rejected.
    pub fn backward(
        &self,
        trace: &ForwardTrace<S>,
        grad_scores: &DenseMatrix<S>,
    ) -> Result<GradientSet<S>> {
        if grad_scores.rows() != trace.scores.rows() || grad_scores.cols() != trace.scores.cols() {
            return Err(Error::shape(
                "model_backward",
                format!(
                    "grad_scores are {}x{}, trace scores are {}x{}",
                    grad_scores.rows(),
                    grad_scores.cols(),
                    trace.scores.rows(),
                    trace.scores.cols()
                ),
            ));
        }
        if trace.scores.cols() != self.config.num_labels
            || trace.head_input().cols() != self.config.head_input_dim()
            || trace.head_input().rows() != trace.scores.rows()
            || trace.dropped.cols() != self.config.feature_dim
        {
            return Err(Error::shape(
                "model_backward",
                "trace does not match this model (stale or foreign trace)".to_string(),
            ));
        }
        let head_input = trace.head_input();
        let need_input_grad = self.intermediate.is_some();
        let (head_weights, grad_hidden, skip) = match &self.head {
            Head::Sparse(w) => {
                let (gw, stats) = sparse_backward_weights(w, head_input, grad_scores)?;
                let grad_hidden = if need_input_grad {
                    let (gi, _) = sparse_backward_input(w, grad_scores)?;
                    Some(gi)
                } else {
                    None
                };
                (gw, grad_hidden, stats)
            }
            Head::Dense(w) => {
                let gw = dense_backward_weights(head_input, grad_scores)?;
                let grad_hidden = if need_input_grad {
                    Some(dense_backward_input(grad_scores, w)?)
                } else {
                    None
                };
                // A dense head reads every pair regardless; report the zero
                // fraction of the upstream anyway so runs stay comparable.
                let zeros = grad_scores.data().iter().filter(|&&g| g == S::ZERO).count();
                let stats = SkipStats {
                    skipped: zeros as u64,
                    total: grad_scores.data().len() as u64,
                };
                (gw.into_data(), grad_hidden, stats)
            }
        };
        let (intermediate_weights, intermediate_bias) = match (&self.intermediate, grad_hidden) {
            (Some(_layer), Some(gh)) => {
                let up = match self.config.activation {
                    Activation::Relu => {
                        relu_backward(trace.pre_activation.as_ref().expect("trace has pre-activation"), &gh)?
                    }
                    Activation::Identity => gh,
                };
                let gw = dense_backward_weights(&trace.dropped, &up)?;
                let gb = dense_backward_bias(&up);
                (Some(gw.into_data()), Some(gb))
            }
            _ => (None, None),
        };
        Ok(GradientSet {
            intermediate_weights,
            intermediate_bias,
            head_weights,
            skip,
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(layer) = &self.intermediate {
            layer.weights.check_finite("intermediate_weights")?;
            for (j, b) in layer.bias.iter().enumerate() {
                if !b.is_finite() {
                    return Err(Error::NonFinite(format!("intermediate_bias at {j}: {b}")));
                }
            }
        }
        match &self.head {
            Head::Dense(w) => w.check_finite("head_weights"),
            Head::Sparse(w) => w.check_finite("head_weights"),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            intermediate: self.intermediate.as_ref().map(|l| DenseLayer {
                weights: l.weights.cast(),
                bias: l.bias.iter().map(|&b| T::from_f64(b.to_f64())).collect(),
            }),
            head: match &self.head {
                Head::Dense(w) => Head::Dense(w.cast()),
                Head::Sparse(w) => Head::Sparse(w.cast()),
            },
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FORMAT: &str = "unifan-checkpoint-v1";

/// Writes the model under `dir`: a `manifest.txt` of `key=value` lines plus
/// one blob per parameter block. `extra` entries are appended to the
/// manifest verbatim, in the given order, so identical runs produce
/// byte-identical checkpoints.
pub fn save_checkpoint<S: Scalar>(
    model: &Model<S>,
    dir: &Path,
    extra: &[(String, String)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = model.config();
    let mut manifest = String::new();
    manifest.push_str(&format!("format={CHECKPOINT_FORMAT}\n"));
    manifest.push_str(&format!("feature_dim={}\n", c.feature_dim));
    manifest.push_str(&format!("num_labels={}\n", c.num_labels));
    match c.intermediate_dim {
        Some(m) => manifest.push_str(&format!("intermediate_dim={m}\n")),
        None => manifest.push_str("intermediate_dim=none\n"),
    }
    match c.head {
        HeadKind::Dense => manifest.push_str("head=dense\n"),
        HeadKind::UniformSparse { fan_in } => {
            manifest.push_str("head=uniform_sparse\n");
            manifest.push_str(&format!("fan_in={fan_in}\n"));
        }
    }
    manifest.push_str(&format!("activation={}\n", c.activation.name()));
    manifest.push_str(&format!("dropout={}\n", c.dropout));
    manifest.push_str(&format!("seed={}\n", c.seed));
    if c.intermediate_dim.is_some() {
        manifest.push_str("intermediate_file=intermediate.ufdn\n");
        manifest.push_str("intermediate_bias_file=intermediate_bias.ufdn\n");
    }
    match c.head {
        HeadKind::Dense => manifest.push_str("head_file=head.ufdn\n"),
        HeadKind::UniformSparse { .. } => manifest.push_str("head_file=head.ufsm\n"),
    }
    for (k, v) in extra {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;

    if let Some(layer) = &model.intermediate {
        let mut w = BufWriter::new(fs::File::create(dir.join("intermediate.ufdn"))?);
        layer.weights.write_blob(&mut w)?;
        w.flush()?;
        let bias = DenseMatrix::from_vec(1, layer.bias.len(), layer.bias.clone())?;
        let mut w = BufWriter::new(fs::File::create(dir.join("intermediate_bias.ufdn"))?);
        bias.write_blob(&mut w)?;
        w.flush()?;
    }
    match &model.head {
        Head::Dense(weights) => {
            let mut w = BufWriter::new(fs::File::create(dir.join("head.ufdn"))?);
            weights.write_blob(&mut w)?;
            w.flush()?;
        }
        Head::Sparse(weights) => {
            let mut w = BufWriter::new(fs::File::create(dir.join("head.ufsm"))?);
            weights.write_blob(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

/// Parses a checkpoint manifest into its key/value pairs.
pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: lineno + 1,
            msg: "expected key=value".to_string(),
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

/// Loads a checkpoint written by [`save_checkpoint`]. Storage is f32; the
/// result is widened to `S`.
pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<Model<S>> {
    let manifest = read_manifest(dir)?;
    let get = |key: &str| -> Result<&str> {
        manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format {
                path: dir.join(MANIFEST_FILE),
                msg: format!("missing key {key}"),
            })
    };
    let bad = |key: &str, val: &str| Error::Format {
        path: dir.join(MANIFEST_FILE),
        msg: format!("bad value {val:?} for {key}"),
    };
    if get("format")? != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: dir.join(MANIFEST_FILE),
            msg: format!("unsupported format {:?}", get("format")?),
        });
    }
    let parse_usize = |key: &str| -> Result<usize> {
        let v = get(key)?;
        v.parse().map_err(|_| bad(key, v))
    };
    let feature_dim = parse_usize("feature_dim")?;
    let num_labels = parse_usize("num_labels")?;
    let intermediate_dim = match get("intermediate_dim")? {
        "none" => None,
        v => Some(v.parse().map_err(|_| bad("intermediate_dim", v))?),
    };
    let head = match get("head")? {
        "dense" => HeadKind::Dense,
        "uniform_sparse" => HeadKind::UniformSparse {
            fan_in: parse_usize("fan_in")?,
        },
        v => return Err(bad("head", v)),
    };
    let activation = match get("activation")? {
        "relu" => Activation::Relu,
        "identity" => Activation::Identity,
        v => return Err(bad("activation", v)),
    };
    let dropout: f64 = {
        let v = get("dropout")?;
        v.parse().map_err(|_| bad("dropout", v))?
    };
    let seed: u64 = {
        let v = get("seed")?;
        v.parse().map_err(|_| bad("seed", v))?
    };
    let config = ModelConfig {
        feature_dim,
        num_labels,
        intermediate_dim,
        head,
        activation,
        dropout,
        seed,
    };

    let file_of = |key: &str, default: &str| -> String {
        manifest.get(key).cloned().unwrap_or_else(|| default.to_string())
    };
    let intermediate = if intermediate_dim.is_some() {
        let name = file_of("intermediate_file", "intermediate.ufdn");
        let mut r = BufReader::new(fs::File::open(dir.join(&name))?);
        let weights = DenseMatrix::<S>::read_blob(&mut r, &name)?;
        let name = file_of("intermediate_bias_file", "intermediate_bias.ufdn");
        let mut r = BufReader::new(fs::File::open(dir.join(&name))?);
        let bias = DenseMatrix::<S>::read_blob(&mut r, &name)?;
        Some(DenseLayer {
            weights,
            bias: bias.into_data(),
        })
    } else {
        None
    };
    let head = match head {
        HeadKind::Dense => {
            let name = file_of("head_file", "head.ufdn");
            let mut r = BufReader::new(fs::File::open(dir.join(&name))?);
            Head::Dense(DenseMatrix::<S>::read_blob(&mut r, &name)?)
        }
        HeadKind::UniformSparse { .. } => {
            let name = file_of("head_file", "head.ufsm");
            let mut r = BufReader::new(fs::File::open(dir.join(&name))?);
            Head::Sparse(UniformSparseMatrix::<S>::read_blob(&mut r, &name)?)
        }
    };
    Model::from_parts(config, intermediate, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sparse_config(seed: u64) -> ModelConfig {
        ModelConfig {
            feature_dim: 12,
            num_labels: 30,
            intermediate_dim: Some(9),
            head: HeadKind::UniformSparse { fan_in: 4 },
            activation: Activation::Relu,
            dropout: 0.0,
            seed,
        }
    }

    fn random_features(b: usize, d: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = SplitRng::new(seed);
        let mut m = DenseMatrix::zeros(b, d);
        for x in m.data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn init_is_seed_deterministic_and_validates() {
        let a: Model<f32> = Model::init(sparse_config(3)).unwrap();
        let b: Model<f32> = Model::init(sparse_config(3)).unwrap();
        assert_eq!(a, b);
        let c: Model<f32> = Model::init(sparse_config(4)).unwrap();
        assert_ne!(a, c);

        let mut bad = sparse_config(3);
        bad.head = HeadKind::UniformSparse { fan_in: 10 }; // > intermediate 9
        assert!(Model::<f32>::init(bad).is_err());
        let mut bad = sparse_config(3);
        bad.dropout = 1.0;
        assert!(Model::<f32>::init(bad).is_err());
    }

    #[test]
    fn dense_head_without_intermediate_is_plain_matmul() {
        let config = ModelConfig {
            feature_dim: 6,
            num_labels: 4,
            intermediate_dim: None,
            head: HeadKind::Dense,
            activation: Activation::Identity,
            dropout: 0.0,
            seed: 9,
        };
        let model: Model<f64> = Model::init(config).unwrap();
        let x = random_features(3, 6, 1);
        let mut rng = SplitRng::new(0);
        let trace = model.forward(&x, false, &mut rng).unwrap();
        let w = match &model.head {
            Head::Dense(w) => w,
            _ => unreachable!(),
        };
        let want = dense_forward(&x, w, None).unwrap();
        assert_eq!(trace.scores.data(), want.data());
    }

    #[test]
    fn full_fan_in_sparse_head_equals_dense_head() {
        // A sparse head whose columns connect to every input is the same
        // linear map as a dense head with the scattered weights.
        let d = 7;
        let l = 5;
        let mut rng = SplitRng::new(17);
        let sparse = UniformSparseMatrix::<f64>::random(d, l, d, 0.5, &mut rng).unwrap();
        let dense = sparse.to_dense().unwrap();
        let config = |head| ModelConfig {
            feature_dim: d,
            num_labels: l,
            intermediate_dim: None,
            head,
            activation: Activation::Identity,
            dropout: 0.0,
            seed: 0,
        };
        let m_sparse = Model::from_parts(
            config(HeadKind::UniformSparse { fan_in: d }),
            None,
            Head::Sparse(sparse),
        )
        .unwrap();
        let m_dense = Model::from_parts(config(HeadKind::Dense), None, Head::Dense(dense)).unwrap();
        let x = random_features(4, d, 2);
        let mut r = SplitRng::new(0);
        let a = m_sparse.forward(&x, false, &mut r).unwrap();
        let b = m_dense.forward(&x, false, &mut r).unwrap();
        for (s, t) in a.scores.data().iter().zip(b.scores.data()) {
            assert_eq!(s.to_bits(), t.to_bits());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients_everywhere() {
        let model: Model<f64> = Model::init(sparse_config(5)).unwrap();
        let x = random_features(3, 12, 4);
        let mut rng = SplitRng::new(0);
        let trace = model.forward(&x, false, &mut rng).unwrap();
        let zeros = DenseMatrix::zeros(3, 30);
        let grads = model.backward(&trace, &zeros).unwrap();
        assert!(grads.head_weights.iter().all(|&g| g == 0.0));
        assert!(grads.intermediate_weights.unwrap().iter().all(|&g| g == 0.0));
        assert!(grads.intermediate_bias.unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(grads.skip.fraction(), 1.0);
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let model: Model<f64> = Model::init(sparse_config(6)).unwrap();
        let x = random_features(3, 12, 4);
        let mut rng = SplitRng::new(0);
        let trace = model.forward(&x, false, &mut rng).unwrap();
        let wrong = DenseMatrix::zeros(2, 30);
        assert!(model.backward(&trace, &wrong).is_err());
        let wrong_l = DenseMatrix::zeros(3, 29);
        assert!(model.backward(&trace, &wrong_l).is_err());
    }

    /// End-to-end finite-difference check: perturb every parameter, compare
    /// the change in a scalar functional of the scores against the analytic
    /// gradient routed through `backward`.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        for head in [HeadKind::UniformSparse { fan_in: 3 }, HeadKind::Dense] {
            let config = ModelConfig {
                feature_dim: 5,
                num_labels: 11,
                intermediate_dim: Some(7),
                head,
                activation: Activation::Relu,
                dropout: 0.0,
                seed: 12,
            };
            let mut model: Model<f64> = Model::init(config).unwrap();
            let x = random_features(2, 5, 8);
            // Fixed co-vector c makes the functional f = sum_ij c_ij * score_ij,
            // whose upstream gradient is just c.
            let c = random_features(2, 11, 9);
            let mut rng = SplitRng::new(0);
            let trace = model.forward(&x, false, &mut rng).unwrap();
            let grads = model.backward(&trace, &c).unwrap();

            let f = |m: &Model<f64>| -> f64 {
                let mut r = SplitRng::new(0);
                let t = m.forward(&x, false, &mut r).unwrap();
                t.scores
                    .data()
                    .iter()
                    .zip(c.data())
                    .map(|(s, w)| s * w)
                    .sum()
            };
            let h = 1e-6;
            for block in model.blocks() {
                let n = model.block_values(block).unwrap().len();
                for p in 0..n {
                    let orig = model.block_values(block).unwrap()[p];
                    model.block_values_mut(block).unwrap()[p] = orig + h;
                    let f_plus = f(&model);
                    model.block_values_mut(block).unwrap()[p] = orig - h;
                    let f_minus = f(&model);
                    model.block_values_mut(block).unwrap()[p] = orig;
                    let numeric = (f_plus - f_minus) / (2.0 * h);
                    let analytic = grads.block(block).unwrap()[p];
                    let rel =
                        (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
                    assert!(
                        rel < 1e-4,
                        "{head:?} {} param {p}: numeric {numeric} vs analytic {analytic}",
                        block.name()
                    );
                }
            }
        }
    }

    #[test]
    fn sparse_head_sources_are_close_to_uniform() {
        // Chi-square sanity on the connection histogram: d cells, expected
        // count s*L/d each. Accept within ~6 sigma of the chi-square mean.
        let (d, l, s) = (128usize, 10_000usize, 8usize);
        let config = ModelConfig {
            feature_dim: d,
            num_labels: l,
            intermediate_dim: None,
            head: HeadKind::UniformSparse { fan_in: s },
            activation: Activation::Identity,
            dropout: 0.0,
            seed: 2024,
        };
        let model: Model<f32> = Model::init(config).unwrap();
        let head = match &model.head {
            Head::Sparse(w) => w,
            _ => unreachable!(),
        };
        let mut counts = vec![0u64; d];
        for &i in head.indices() {
            counts[i as usize] += 1;
        }
        let expected = (s * l) as f64 / d as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let diff = c as f64 - expected;
                diff * diff / expected
            })
            .sum();
        let dof = (d - 1) as f64;
        let bound = dof + 6.0 * (2.0 * dof).sqrt();
        assert!(chi2 < bound, "chi2 {chi2} vs bound {bound}");
    }

    #[test]
    fn checkpoint_round_trips_and_is_byte_stable() {
        let model: Model<f32> = Model::init(sparse_config(33)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let extra = vec![("best_epoch".to_string(), "4".to_string())];
        save_checkpoint(&model, dir.path(), &extra).unwrap();
        let back: Model<f32> = load_checkpoint(dir.path()).unwrap();
        assert_eq!(model, back);
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.get("best_epoch").map(String::as_str), Some("4"));

        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir2.path(), &extra).unwrap();
        for file in ["manifest.txt", "intermediate.ufdn", "intermediate_bias.ufdn", "head.ufsm"] {
            let a = std::fs::read(dir.path().join(file)).unwrap();
            let b = std::fs::read(dir2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical saves");
        }
    }

    #[test]
    fn checkpoint_rejects_missing_or_bad_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
        std::fs::write(dir.path().join(MANIFEST_FILE), "format=unknown-v9\n").unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }
}
