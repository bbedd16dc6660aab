//! The six subcommands. Everything here is plumbing: read config keys,
//! validate fully, then drive the library and write artifacts (metrics CSV,
//! redistribution CSV, checkpoints, reports).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use unifan::data::{
    load_feature_blob, make_synthetic, parse_xmc_text, split_train_val, write_feature_blob,
    write_xmc_text, Dataset, SyntheticSpec,
};
use unifan::dst::{DstConfig, RegrowInit};
use unifan::loss::{compute_loss, sigmoid, LossKind};
use unifan::mach::{build_indicators, mach_decode, meta_targets, IndicatorMatrix, MachEnsembleSpec};
use unifan::memory::{gib, MatrixShape, SparseFormat};
use unifan::metrics::{
    parameter_memory_report, precision_at_k, redistribution_csv_row, EvalReport, MetricsRow,
    METRICS_CSV_HEADER, REDISTRIBUTION_CSV_HEADER,
};
use unifan::model::{
    load_checkpoint, save_checkpoint, Activation, Head, HeadKind, Model, ModelConfig,
};
use unifan::optim::{AdamHyper, ScheduleDecision};
use unifan::sparse::{sparse_backward_input, sparse_backward_weights, sparse_forward};
use unifan::train::{eval_model, train, EpochRecord, NoObserver, TrainObserver, TrainSettings};
use unifan::{DenseMatrix, Error, Result, Scalar, SplitRng};

use crate::config::Config;

fn out_dir(cfg: &Config) -> PathBuf {
    PathBuf::from(cfg.get("out").unwrap_or("unifan-out"))
}

fn read_loss(cfg: &Config) -> Result<LossKind> {
    cfg.get("loss")
        .map(str::parse)
        .transpose()
        .map(|l| l.unwrap_or(LossKind::SquaredHinge))
}

fn read_settings(cfg: &Config, record_wall_time: bool) -> Result<TrainSettings> {
    let dst_section = DstConfig {
        prune_fraction: cfg.parse_or("dst.prune_fraction", 0.1)?,
        interval_steps: cfg.parse_or("dst.interval_steps", 1000)?,
        per_epoch: cfg.flag_or("dst.per_epoch", false)?,
        regrow_init: match cfg.get("dst.regrow_init") {
            None | Some("zero") => RegrowInit::Zero,
            Some("uniform") => RegrowInit::Uniform,
            Some(other) => {
                return Err(Error::config(format!(
                    "bad value for dst.regrow_init: {other:?} (expected zero or uniform)"
                )))
            }
        },
    };
    Ok(TrainSettings {
        loss: read_loss(cfg)?,
        batch_size: cfg.parse_or("batch_size", 32)?,
        max_epochs: cfg.parse_or("opt.max_epochs", 200)?,
        initial_lr: cfg.parse_or("opt.lr", 1e-3)?,
        lr_floor: cfg.parse_or("opt.lr_floor", 1e-4)?,
        patience: cfg.parse_or("opt.patience", 2)?,
        min_delta: cfg.parse_or("opt.min_delta", 1e-4)?,
        adam: AdamHyper::default(),
        dst: if cfg.flag_or("dst.enabled", false)? {
            Some(dst_section)
        } else {
            None
        },
        eval_ks: cfg.usize_list_or("eval_ks", &[1, 3, 5])?,
        seed: cfg.parse_or("seed", 0)?,
        record_wall_time,
    })
}

/// Builds the model section. Width and label count come from the dataset;
/// `model.feature_dim` / `model.num_labels`, if configured, must agree.
fn read_model_config(
    cfg: &Config,
    feature_dim: usize,
    num_labels: usize,
    default_seed: u64,
) -> Result<ModelConfig> {
    for (key, want) in [
        ("model.feature_dim", feature_dim),
        ("model.num_labels", num_labels),
    ] {
        if let Some(have) = cfg.parse_opt::<usize>(key)? {
            if have != want {
                return Err(Error::config(format!(
                    "{key}={have} disagrees with the dataset ({want})"
                )));
            }
        }
    }
    let head = match cfg.get("model.head") {
        None | Some("sparse") => HeadKind::UniformSparse {
            fan_in: cfg.parse_or("model.fan_in", 32)?,
        },
        Some("dense") => {
            if cfg.get("model.fan_in").is_some() {
                return Err(Error::config("model.fan_in has no effect with model.head=dense"));
            }
            HeadKind::Dense
        }
        Some(other) => {
            return Err(Error::config(format!(
                "bad value for model.head: {other:?} (expected sparse or dense)"
            )))
        }
    };
    let activation = match cfg.get("model.activation") {
        None | Some("relu") => Activation::Relu,
        Some("identity") => Activation::Identity,
        Some(other) => {
            return Err(Error::config(format!(
                "bad value for model.activation: {other:?} (expected relu or identity)"
            )))
        }
    };
    let intermediate_dim = match cfg.get("model.intermediate_dim") {
        None | Some("none") => None,
        Some(raw) => Some(raw.parse::<usize>().map_err(|_| {
            Error::config(format!(
                "bad value for model.intermediate_dim: {raw:?} (expected a width or none)"
            ))
        })?),
    };
    let config = ModelConfig {
        feature_dim,
        num_labels,
        intermediate_dim,
        head,
        activation,
        dropout: cfg.parse_or("model.dropout", 0.0)?,
        seed: cfg.parse_or("model.seed", default_seed)?,
    };
    config.validate()?;
    Ok(config)
}

/// Loads the `role` split: either `data.<role>` (text format) or
/// `data.<role>_features` (feature blob) + `data.<role>_labels` (text format
/// supplying the label lists; its feature pairs, if any, are replaced by the
/// blob).
fn load_split<S: Scalar>(cfg: &Config, role: &str) -> Result<Option<Dataset<S>>> {
    let text = cfg.path_opt(&format!("data.{role}"));
    let blob = cfg.path_opt(&format!("data.{role}_features"));
    let labels = cfg.path_opt(&format!("data.{role}_labels"));
    match (text, blob, labels) {
        (Some(path), None, None) => Ok(Some(parse_xmc_text(&path)?)),
        (None, Some(blob_path), Some(labels_path)) => {
            let with_labels: Dataset<S> = parse_xmc_text(&labels_path)?;
            let features = load_feature_blob(&blob_path)?;
            if features.rows() != with_labels.len() {
                return Err(Error::shape(
                    "load_split",
                    format!(
                        "feature blob holds {} rows, label file {}",
                        features.rows(),
                        with_labels.len()
                    ),
                ));
            }
            let name = blob_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| role.to_string());
            Ok(Some(Dataset::new(features, with_labels.labels, name)?))
        }
        (None, None, None) => Ok(None),
        _ => Err(Error::config(format!(
            "set either data.{role} or both data.{role}_features and data.{role}_labels"
        ))),
    }
}

fn preflight_eval_ks(ks: &[usize], num_labels: usize) -> Result<()> {
    if let Some(&k) = ks.iter().max() {
        if k > num_labels {
            return Err(Error::config(format!(
                "eval_ks includes {k} but the label space has only {num_labels} labels"
            )));
        }
    }
    if ks.contains(&0) {
        return Err(Error::config("eval_ks must be positive"));
    }
    Ok(())
}

fn print_report(tag: &str, report: &EvalReport) {
    let ps: Vec<String> = report
        .p_at
        .iter()
        .map(|(k, v)| format!("p@{k}={v:.4}"))
        .collect();
    println!(
        "{tag}: n={} loss={:.6} {}",
        report.n_instances,
        report.loss,
        ps.join(" ")
    );
}

/// Appends live metrics rows and checkpoints the best validation epoch.
struct CsvObserver {
    metrics: BufWriter<File>,
    redistribution: Option<BufWriter<File>>,
    out_dir: PathBuf,
    head_bytes_uniform: u64,
    head_bytes_dense: u64,
}

impl CsvObserver {
    fn new<S: Scalar>(dir: &Path, model: &Model<S>) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "{METRICS_CSV_HEADER}")?;
        metrics.flush()?;
        let report = parameter_memory_report(model);
        Ok(CsvObserver {
            metrics,
            redistribution: None,
            out_dir: dir.to_path_buf(),
            head_bytes_uniform: report.head_bytes(SparseFormat::Uniform),
            head_bytes_dense: report.head_bytes(SparseFormat::Dense),
        })
    }

    fn row(&self, epoch: usize, split: &str, report: &EvalReport, lr: f64, skip: Option<f64>, seconds: Option<f64>) -> MetricsRow {
        MetricsRow {
            epoch,
            split: split.to_string(),
            loss: report.loss,
            p_at_1: report.p(1),
            p_at_3: report.p(3),
            p_at_5: report.p(5),
            lr,
            skip_fraction: skip,
            epoch_seconds: seconds,
            head_bytes_uniform: self.head_bytes_uniform,
            head_bytes_dense: self.head_bytes_dense,
        }
    }

    fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.to_csv())?;
        self.metrics.flush()?;
        Ok(())
    }
}

impl<S: Scalar> TrainObserver<S> for CsvObserver {
    fn on_epoch(&mut self, record: &EpochRecord, model: &Model<S>) -> Result<()> {
        let row = self.row(
            record.epoch,
            "val",
            &record.val,
            record.lr,
            Some(record.skip_fraction),
            Some(record.epoch_seconds),
        );
        self.append(&row)?;
        if record.decision == ScheduleDecision::Improved {
            save_checkpoint(
                model,
                &self.out_dir.join("best"),
                &[
                    ("epoch".to_string(), record.epoch.to_string()),
                    (
                        "val_p_at_3".to_string(),
                        format!("{:.6}", record.val.p(3).unwrap_or(0.0)),
                    ),
                ],
            )?;
        }
        Ok(())
    }

    fn on_redistribution(&mut self, step: u64, report: &unifan::dst::RedistributionReport) -> Result<()> {
        if self.redistribution.is_none() {
            let mut file = BufWriter::new(File::create(self.out_dir.join("redistribution.csv"))?);
            writeln!(file, "{REDISTRIBUTION_CSV_HEADER}")?;
            self.redistribution = Some(file);
        }
        let file = self.redistribution.as_mut().expect("created above");
        writeln!(
            file,
            "{}",
            redistribution_csv_row(
                step,
                report.mean_pruned_magnitude(),
                report.max_pruned_magnitude()
            )
        )?;
        file.flush()?;
        Ok(())
    }
}

pub fn cmd_train<S: Scalar>(cfg: &Config, record_wall_time: bool) -> Result<()> {
    let settings = read_settings(cfg, record_wall_time)?;
    let dir = out_dir(cfg);
    let full: Dataset<S> =
        load_split(cfg, "train")?.ok_or_else(|| Error::config("data.train is required"))?;
    let (train_set, val_set) = match load_split(cfg, "val")? {
        Some(val) => (full, val),
        None => {
            let fraction = cfg.parse_or("data.val_fraction", 0.05)?;
            split_train_val(&full, fraction, &mut SplitRng::new(settings.seed).split(9))?
        }
    };
    let test_set: Option<Dataset<S>> = load_split(cfg, "test")?;
    let model_config = read_model_config(
        cfg,
        train_set.feature_dim(),
        train_set.num_labels(),
        settings.seed,
    )?;
    preflight_eval_ks(&settings.eval_ks, train_set.num_labels())?;
    if let Some(dst) = &settings.dst {
        match model_config.head {
            HeadKind::UniformSparse { fan_in } => {
                dst.validate(model_config.head_input_dim(), fan_in)?
            }
            HeadKind::Dense => {
                return Err(Error::config("dst.enabled requires model.head=sparse"))
            }
        }
    }
    cfg.finish()?;

    let model: Model<S> = Model::init(model_config)?;
    println!(
        "train: {} instances (d={}, L={}), {} validation, {} parameters, loss={}",
        train_set.len(),
        train_set.feature_dim(),
        train_set.num_labels(),
        val_set.len(),
        model.num_parameters(),
        settings.loss.name(),
    );
    let mut observer = CsvObserver::new(&dir, &model)?;

    if settings.max_epochs == 0 {
        let report = eval_model(&model, &val_set, settings.loss, &settings.eval_ks, record_wall_time)?;
        print_report("initial validation", &report);
        save_checkpoint(&model, &dir.join("final"), &[])?;
        return Ok(());
    }

    let outcome = train(model, &train_set, &val_set, &settings, &mut observer)?;
    let last = outcome.records.last().expect("max_epochs > 0");
    save_checkpoint(
        &outcome.model,
        &dir.join("final"),
        &[("epoch".to_string(), last.epoch.to_string())],
    )?;
    match &outcome.best {
        Some((epoch, _)) => println!(
            "done: {} epochs, {} steps; best val p@3 {:.4} at epoch {epoch}",
            outcome.records.len(),
            outcome.steps,
            outcome.records[*epoch].val.p(3).unwrap_or(0.0),
        ),
        None => println!(
            "done: {} epochs, {} steps; validation never improved",
            outcome.records.len(),
            outcome.steps
        ),
    }

    if let Some(test_set) = test_set {
        let chosen = outcome
            .best
            .as_ref()
            .map(|(_, m)| m)
            .unwrap_or(&outcome.model);
        let report = eval_model(chosen, &test_set, settings.loss, &settings.eval_ks, record_wall_time)?;
        let row = observer.row(last.epoch, "test", &report, last.lr, None, None);
        observer.append(&row)?;
        print_report("test (best checkpoint)", &report);
    }
    Ok(())
}

pub fn cmd_eval<S: Scalar>(cfg: &Config, record_wall_time: bool) -> Result<()> {
    let checkpoint = PathBuf::from(cfg.require("eval.checkpoint")?);
    let loss = read_loss(cfg)?;
    let ks = cfg.usize_list_or("eval_ks", &[1, 3, 5])?;
    let ds: Dataset<S> = match load_split(cfg, "test")? {
        Some(ds) => ds,
        None => load_split(cfg, "train")?
            .ok_or_else(|| Error::config("eval needs data.test or data.train"))?,
    };
    let write_csv = cfg.get("out").is_some();
    let dir = out_dir(cfg);
    cfg.finish()?;

    let model: Model<S> = load_checkpoint(&checkpoint)?;
    preflight_eval_ks(&ks, model.config().num_labels)?;
    let report = eval_model(&model, &ds, loss, &ks, record_wall_time)?;
    print_report(&format!("eval {}", ds.name), &report);
    if write_csv {
        fs::create_dir_all(&dir)?;
        let memory = parameter_memory_report(&model);
        let row = MetricsRow {
            epoch: 0,
            split: "eval".to_string(),
            loss: report.loss,
            p_at_1: report.p(1),
            p_at_3: report.p(3),
            p_at_5: report.p(5),
            lr: 0.0,
            skip_fraction: None,
            epoch_seconds: None,
            head_bytes_uniform: memory.head_bytes(SparseFormat::Uniform),
            head_bytes_dense: memory.head_bytes(SparseFormat::Dense),
        };
        let mut file = BufWriter::new(File::create(dir.join("eval.csv"))?);
        writeln!(file, "{METRICS_CSV_HEADER}")?;
        writeln!(file, "{}", row.to_csv())?;
        file.flush()?;
    }
    Ok(())
}

fn time_mean(mut op: impl FnMut() -> Result<()>, warmup: usize, iters: usize) -> Result<f64> {
    for _ in 0..warmup {
        op()?;
    }
    let started = Instant::now();
    for _ in 0..iters.max(1) {
        op()?;
    }
    Ok(started.elapsed().as_secs_f64() / iters.max(1) as f64)
}

/// Times the three head kernels on one fixed batch, for both losses, at
/// identical parameters (a model trained briefly with the configured loss).
/// Reports means with warmup excluded; asserts nothing.
pub fn cmd_bench<S: Scalar>(cfg: &Config, record_wall_time: bool) -> Result<()> {
    let mut settings = read_settings(cfg, record_wall_time)?;
    settings.max_epochs = cfg.parse_or("bench.train_epochs", 2)?;
    settings.dst = None;
    let warmup = cfg.parse_or("bench.warmup", 2usize)?;
    let iters = cfg.parse_or("bench.iters", 10usize)?;
    let bench_rows = cfg.parse_or("bench.batch_size", 256usize)?;
    let full: Dataset<S> =
        load_split(cfg, "train")?.ok_or_else(|| Error::config("data.train is required"))?;
    let (train_set, val_set) =
        split_train_val(&full, 0.05, &mut SplitRng::new(settings.seed).split(9))?;
    let model_config = read_model_config(
        cfg,
        train_set.feature_dim(),
        train_set.num_labels(),
        settings.seed,
    )?;
    if !matches!(model_config.head, HeadKind::UniformSparse { .. }) {
        return Err(Error::config("bench times the sparse head; set model.head=sparse"));
    }
    cfg.finish()?;

    let model: Model<S> = Model::init(model_config)?;
    let outcome = train(model, &train_set, &val_set, &settings, &mut NoObserver)?;
    let model = outcome.model;

    let ids: Vec<usize> = (0..bench_rows.min(train_set.len())).collect();
    let batch = train_set.gather(&ids);
    let mut rng = SplitRng::new(0);
    let trace = model.forward(&batch.features, false, &mut rng)?;
    let head_input = trace.head_input();
    let Head::Sparse(weights) = &model.head else {
        unreachable!("head kind checked above");
    };

    println!(
        "bench: {} rows, d={}, L={}, fan_in={}, trained {} epochs with {}; warmup={warmup} iters={iters}",
        batch.features.rows(),
        head_input.cols(),
        trace.scores.cols(),
        weights.fan_in(),
        settings.max_epochs,
        settings.loss.name(),
    );
    println!("loss op seconds skip_fraction");
    for kind in [LossKind::SquaredHinge, LossKind::Bce] {
        let (_, upstream) = compute_loss(kind, &trace.scores, &batch.labels)?;
        let (_, skip) = sparse_backward_input(weights, &upstream)?;
        let forward = time_mean(
            || sparse_forward(weights, head_input).map(drop),
            warmup,
            iters,
        )?;
        let backward_input = time_mean(
            || sparse_backward_input(weights, &upstream).map(drop),
            warmup,
            iters,
        )?;
        let backward_weights = time_mean(
            || sparse_backward_weights(weights, head_input, &upstream).map(drop),
            warmup,
            iters,
        )?;
        for (op, seconds) in [
            ("forward", forward),
            ("backward_input", backward_input),
            ("backward_weights", backward_weights),
        ] {
            println!("{} {op} {seconds:.6} {:.6}", kind.name(), skip.fraction());
        }
    }
    Ok(())
}

/// Trains the label-hashing ensemble (one Bce dense meta-head per hash),
/// decodes per-label scores, and compares against an end-to-end run with
/// the configured (sparse) head on the same data.
pub fn cmd_mach<S: Scalar>(cfg: &Config, record_wall_time: bool) -> Result<()> {
    let settings = read_settings(cfg, record_wall_time)?;
    let num_hashes = cfg.parse_or("mach.num_hashes", 4usize)?;
    let num_buckets = cfg.parse_or("mach.num_buckets", 32usize)?;
    let dir = out_dir(cfg);
    let full: Dataset<S> =
        load_split(cfg, "train")?.ok_or_else(|| Error::config("data.train is required"))?;
    let (train_set, val_set) = match load_split(cfg, "val")? {
        Some(val) => (full, val),
        None => {
            let fraction = cfg.parse_or("data.val_fraction", 0.05)?;
            split_train_val(&full, fraction, &mut SplitRng::new(settings.seed).split(9))?
        }
    };
    let eval_set: Dataset<S> = match load_split(cfg, "test")? {
        Some(test) => test,
        None => val_set.clone(),
    };
    let model_config = read_model_config(
        cfg,
        train_set.feature_dim(),
        train_set.num_labels(),
        settings.seed,
    )?;
    preflight_eval_ks(&settings.eval_ks, train_set.num_labels())?;
    cfg.finish()?;

    let num_labels = train_set.num_labels();
    let spec = MachEnsembleSpec {
        num_labels,
        num_hashes,
        num_buckets,
        seed: settings.seed,
    };
    let indicators = build_indicators(&spec)?;
    println!(
        "mach: {} hashes x {} buckets over {} labels ({} meta-labels total)",
        num_hashes,
        num_buckets,
        num_labels,
        indicators.stacked_dim()
    );

    // One dense meta-head per hash, trained with Bce on bucket targets; its
    // sigmoid outputs estimate the bucket posteriors the decode consumes.
    let mut meta_settings = settings.clone();
    meta_settings.loss = LossKind::Bce;
    meta_settings.eval_ks = vec![1];
    let mut meta_scores = DenseMatrix::<S>::zeros(eval_set.len(), indicators.stacked_dim());
    for r in 0..num_hashes {
        let assignment: Vec<u32> = (0..num_labels)
            .map(|l| indicators.bucket(r, l))
            .collect();
        let single = IndicatorMatrix::from_assignments(num_buckets, vec![assignment])?;
        let meta_train = Dataset::new(
            train_set.features.clone(),
            meta_targets(&train_set.labels, &single)?,
            format!("meta-{r}-train"),
        )?;
        let meta_val = Dataset::new(
            val_set.features.clone(),
            meta_targets(&val_set.labels, &single)?,
            format!("meta-{r}-val"),
        )?;
        let meta_config = ModelConfig {
            feature_dim: train_set.feature_dim(),
            num_labels: num_buckets,
            intermediate_dim: model_config.intermediate_dim,
            head: HeadKind::Dense,
            activation: model_config.activation,
            dropout: model_config.dropout,
            seed: model_config.seed.wrapping_add(r as u64 + 1),
        };
        let outcome = train(
            Model::<S>::init(meta_config)?,
            &meta_train,
            &meta_val,
            &meta_settings,
            &mut NoObserver,
        )?;
        let chosen = outcome.best.as_ref().map(|(_, m)| m).unwrap_or(&outcome.model);
        let mut rng = SplitRng::new(0);
        let trace = chosen.forward(&eval_set.features, false, &mut rng)?;
        for i in 0..eval_set.len() {
            let scores = trace.scores.row(i);
            let target = &mut meta_scores.row_mut(i)[r * num_buckets..(r + 1) * num_buckets];
            for (out, &z) in target.iter_mut().zip(scores) {
                *out = sigmoid(z);
            }
        }
        println!("meta-head {r}: trained {} epochs", outcome.records.len());
    }

    let decoded = mach_decode(&meta_scores, &indicators)?;
    let p_mach = precision_at_k(&decoded, &eval_set.labels, &settings.eval_ks)?;

    let outcome = train(
        Model::<S>::init(model_config)?,
        &train_set,
        &val_set,
        &settings,
        &mut NoObserver,
    )?;
    let chosen = outcome.best.as_ref().map(|(_, m)| m).unwrap_or(&outcome.model);
    let sparse_report = eval_model(
        chosen,
        &eval_set,
        settings.loss,
        &settings.eval_ks,
        record_wall_time,
    )?;

    fs::create_dir_all(&dir)?;
    let mut csv = BufWriter::new(File::create(dir.join("mach.csv"))?);
    writeln!(csv, "system,{}", settings.eval_ks.iter().map(|k| format!("p_at_{k}")).collect::<Vec<_>>().join(","))?;
    let mach_cells: Vec<String> = settings.eval_ks.iter().map(|k| format!("{:.6}", p_mach[k])).collect();
    writeln!(csv, "mach_r{num_hashes}_b{num_buckets},{}", mach_cells.join(","))?;
    let sparse_cells: Vec<String> = settings
        .eval_ks
        .iter()
        .map(|k| format!("{:.6}", sparse_report.p(*k).unwrap_or(0.0)))
        .collect();
    writeln!(csv, "sparse_head,{}", sparse_cells.join(","))?;
    csv.flush()?;

    for k in &settings.eval_ks {
        println!(
            "p@{k}: mach {:.4} vs sparse head {:.4}",
            p_mach[k],
            sparse_report.p(*k).unwrap_or(0.0)
        );
    }
    println!("wrote {}", dir.join("mach.csv").display());
    Ok(())
}

/// Prints byte costs for the configured head under every format, then the
/// fixed reference shapes. Pure arithmetic; nothing is allocated at the
/// reported sizes.
pub fn cmd_memreport(cfg: &Config) -> Result<()> {
    let configured = match (
        cfg.parse_opt::<u64>("model.feature_dim")?,
        cfg.parse_opt::<u64>("model.num_labels")?,
    ) {
        (Some(d), Some(l)) => {
            let head_rows = cfg.parse_opt::<u64>("model.intermediate_dim")?.unwrap_or(d);
            let shape = match cfg.get("model.head") {
                Some("dense") => MatrixShape::dense(head_rows, l),
                None | Some("sparse") => {
                    MatrixShape::uniform(head_rows, l, cfg.parse_or("model.fan_in", 32)?)
                }
                Some(other) => {
                    return Err(Error::config(format!(
                        "bad value for model.head: {other:?} (expected sparse or dense)"
                    )))
                }
            };
            Some(shape)
        }
        (None, None) => None,
        _ => {
            return Err(Error::config(
                "memreport needs both model.feature_dim and model.num_labels (or neither)",
            ))
        }
    };
    cfg.finish()?;

    if let Some(shape) = configured {
        println!(
            "configured head: rows={} cols={} nnz={}",
            shape.rows, shape.cols, shape.nnz
        );
        println!("format storage_bytes storage_gib training_bytes training_gib");
        for format in [
            SparseFormat::Uniform,
            SparseFormat::Csc32,
            SparseFormat::Coo32,
            SparseFormat::Coo64,
            SparseFormat::Dense,
        ] {
            let storage = shape.bytes(format);
            let training = shape.adam_training_bytes(format);
            println!(
                "{} {storage} {:.3} {training} {:.3}",
                format.name(),
                gib(storage),
                gib(training)
            );
        }
        println!();
    }

    let reference = MatrixShape::dense(1024, 2_812_281);
    let storage = reference.bytes(SparseFormat::Dense);
    let training = reference.adam_training_bytes(SparseFormat::Dense);
    println!("reference dense head rows=1024 cols=2812281:");
    println!("  storage {storage} bytes = {:.3} GiB", gib(storage));
    println!("  adam training {training} bytes = {:.3} GiB", gib(training));
    let uniform = MatrixShape::uniform(1024, 670_091, 32);
    let storage = uniform.bytes(SparseFormat::Uniform);
    println!("reference uniform head fan_in=32 cols=670091:");
    println!("  storage {storage} bytes = {:.3} GiB", gib(storage));
    Ok(())
}

/// Writes a synthetic clustered dataset as text (and optionally the feature
/// blob next to it).
pub fn cmd_synth(cfg: &Config) -> Result<()> {
    let spec = SyntheticSpec {
        n_instances: cfg.parse_or("synth.n", 5000)?,
        feature_dim: cfg.parse_or("synth.d", 64)?,
        num_labels: cfg.parse_or("synth.l", 1000)?,
        positives_per_instance: cfg.parse_or("synth.k", 3)?,
        clusters: cfg.parse_or("synth.clusters", 100)?,
        noise: cfg.parse_or("synth.noise", 0.1)?,
        seed: cfg.parse_or("seed", 0)?,
    };
    spec.validate()?;
    let write_blob = cfg.flag_or("synth.blob", false)?;
    let dir = out_dir(cfg);
    cfg.finish()?;

    let ds: Dataset<f32> = make_synthetic(&spec)?;
    fs::create_dir_all(&dir)?;
    let text_path = dir.join("synthetic.txt");
    write_xmc_text(&ds, &text_path)?;
    println!(
        "wrote {} ({} instances, d={}, L={}, {} positives total)",
        text_path.display(),
        ds.len(),
        ds.feature_dim(),
        ds.num_labels(),
        ds.labels.total_positives()
    );
    if write_blob {
        let blob_path = dir.join("synthetic.xfea");
        write_feature_blob(&ds.features, &blob_path)?;
        println!("wrote {}", blob_path.display());
    }
    Ok(())
}
