//! Training, evaluation and sweep orchestration plus run records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackConfig};
use crate::autodiff::{Tape, Tensor};
use crate::data::{gen_blobs, load_idx, shuffled_batches, stratified_batches, BlobSpec, Dataset, Provenance, Split};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_loss, gccs_loss, LossBreakdown, TargetModel, DEFAULT_LAMBDA, DEFAULT_SHRINKAGE};
use crate::model::{predict, Checkpoint, LossKind, MlpClassifier, Mode, DEFAULT_KEEP_PROB};

/// Rows per forward pass when evaluating or attacking large sets.
const EVAL_CHUNK: usize = 500;

/// Default ceiling on the gradient's global L2 norm.
pub const DEFAULT_GRAD_CLIP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataConfig {
    /// IDX image/label files. `dir` names a directory holding the standard
    /// `train-images-idx3-ubyte` style files (optionally `.gz`).
    Idx {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Blobs {
        classes: usize,
        dim: usize,
        std: f64,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Blobs {
            classes: 3,
            dim: 8,
            std: 0.1,
            train_per_class: 200,
            test_per_class: 100,
            seed: 0,
        }
    }
}

fn idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz"), stem.replacen("-idx", ".idx", 1)] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("no {stem}[.gz] in {}", dir.display())))
}

impl DataConfig {
    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self {
            Self::Idx { dir, train_limit, test_limit } => {
                let (prefix, limit) = match split {
                    Split::Train => ("train", train_limit),
                    Split::Test => ("t10k", test_limit),
                };
                let d = load_idx(
                    &idx_file(dir, &format!("{prefix}-images-idx3-ubyte"))?,
                    &idx_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?,
                    split,
                )?;
                Ok(match limit {
                    Some(n) => d.take(*n),
                    None => d,
                })
            }
            Self::Blobs { classes, dim, std, train_per_class, test_per_class, seed } => {
                let (per_class, seed) = match split {
                    Split::Train => (*train_per_class, *seed),
                    Split::Test => (*test_per_class, seed.wrapping_add(1)),
                };
                gen_blobs(&BlobSpec::separated(*classes, *dim, *std, per_class, seed), split)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TrainMode {
    #[default]
    Scratch,
    FineTune { checkpoint: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataConfig,
    /// Hidden layer widths; input and latent widths come from the data.
    pub hidden: Vec<usize>,
    pub loss: LossKind,
    pub lambda: f64,
    pub mu: f64,
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate, cosine-decayed per step to 0.
    pub lr: f64,
    pub momentum: f64,
    /// Decoupled weight decay on weights (not biases).
    pub weight_decay: f64,
    pub keep_prob: f64,
    pub shrinkage: f64,
    /// Stratified batches; `None` means stratified for GCCS, shuffled for
    /// cross-entropy.
    pub stratified: Option<bool>,
    /// Rescale the full gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            hidden: vec![512, 256],
            loss: LossKind::Gccs,
            lambda: DEFAULT_LAMBDA,
            mu: 70.0,
            sigma: 1.0,
            epochs: 200,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            keep_prob: DEFAULT_KEEP_PROB,
            shrinkage: DEFAULT_SHRINKAGE,
            stratified: None,
            grad_clip: Some(DEFAULT_GRAD_CLIP),
            seed: 0,
            mode: TrainMode::Scratch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("sigma", self.sigma),
            ("mu", self.mu),
            ("keep_prob", self.keep_prob),
            ("shrinkage", self.shrinkage),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("weight_decay", self.weight_decay), ("momentum", self.momentum)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config("momentum must be < 1"));
        }
        if self.keep_prob > 1.0 {
            return Err(Error::config("keep_prob must be <= 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be > 0"));
            }
        }
        Ok(())
    }

    pub fn is_stratified(&self) -> bool {
        self.stratified.unwrap_or(self.loss == LossKind::Gccs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_end: f64,
    pub mean_loss: f64,
    /// Per-class terms of the epoch's final GCCS batch.
    pub last_batch: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub accuracy: f64,
    pub target_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub config: AttackConfig,
    pub samples: usize,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuRow {
    pub mu: f64,
    pub sigma: f64,
    pub ratio: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timing {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildInfo {
    pub package_version: String,
    pub git_revision: Option<String>,
}

impl Default for BuildInfo {
    fn default() -> Self {
        Self {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            git_revision: option_env!("GCCS_GIT_REVISION").map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: Option<TrainConfig>,
    pub train_provenance: Option<Provenance>,
    pub epochs: Vec<EpochRecord>,
    pub clean_accuracy: Option<f64>,
    pub attacks: Vec<AttackRecord>,
    pub mu_sweep: Vec<MuRow>,
    pub timing: Timing,
    pub build: BuildInfo,
}

impl RunRecord {
    pub fn new(config: Option<TrainConfig>) -> Self {
        Self {
            config,
            train_provenance: None,
            epochs: Vec::new(),
            clean_accuracy: None,
            attacks: Vec::new(),
            mu_sweep: Vec::new(),
            timing: Timing::default(),
            build: BuildInfo::default(),
        }
    }

    /// The record with wall-clock fields zeroed, for reproducibility checks.
    pub fn metrics(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("cannot serialize run record: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Loads data per `cfg.data` and trains; returns the final checkpoint and
/// a record with the clean test accuracy.
pub fn train(cfg: &TrainConfig) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    let train_set = cfg.data.load(Split::Train)?;
    let test_set = cfg.data.load(Split::Test)?;
    let (ckpt, mut record) = train_on(cfg, &train_set)?;
    let t = Instant::now();
    record.clean_accuracy = Some(evaluate(&ckpt, &test_set)?.accuracy);
    record.timing.eval_seconds = t.elapsed().as_secs_f64();
    Ok((ckpt, record))
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

fn initial_model(cfg: &TrainConfig, widths: &[usize]) -> Result<MlpClassifier> {
    match &cfg.mode {
        TrainMode::Scratch => MlpClassifier::new(widths, cfg.keep_prob, cfg.seed),
        TrainMode::FineTune { checkpoint } => {
            if !checkpoint.is_file() {
                return Err(Error::config(format!(
                    "fine-tune checkpoint {} does not exist",
                    checkpoint.display()
                )));
            }
            let ck = Checkpoint::load(checkpoint)?;
            if ck.model.widths() != widths {
                return Err(Error::config(format!(
                    "fine-tune checkpoint widths {:?} do not match {widths:?}",
                    ck.model.widths()
                )));
            }
            let layers = ck.model.layers().to_vec();
            MlpClassifier::from_layers(layers, cfg.keep_prob)
        }
    }
}

/// Trains on an already loaded dataset.
pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    data.validate()?;
    let started = Instant::now();
    let classes = data.classes;
    let target = TargetModel::new(classes, cfg.mu, cfg.sigma)?;
    let mut widths = vec![data.input_dim()];
    widths.extend(&cfg.hidden);
    widths.push(classes);
    let mut model = initial_model(cfg, &widths)?;
    model.set_mode(Mode::Train);

    let batches_per_epoch = if cfg.is_stratified() {
        stratified_batches(data, cfg.batch_size, cfg.seed, 0)?.len()
    } else {
        data.len().div_ceil(cfg.batch_size)
    };
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut velocity: Vec<(Tensor, Tensor)> = model
        .layers()
        .iter()
        .map(|l| (Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())))
        .collect();
    let mut record = RunRecord::new(Some(cfg.clone()));
    record.train_provenance = Some(data.provenance.clone());
    let mut last_finite: Option<usize> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let batches = if cfg.is_stratified() {
            stratified_batches(data, cfg.batch_size, cfg.seed, epoch)?
        } else {
            shuffled_batches(data, cfg.batch_size, cfg.seed, epoch)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f);
        rng.set_stream(epoch as u64);
        let mut loss_sum = 0.0;
        let mut last_batch = None;
        let mut lr = cfg.lr;
        for idx in &batches {
            let xb = data.images.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let xv = tape.constant(xb);
            let z = model.forward(&mut tape, &params, xv, Some(&mut rng))?;
            let (loss, value) = match cfg.loss {
                LossKind::Gccs => {
                    let v = gccs_loss(&mut tape, z, &yb, &target, cfg.lambda, cfg.shrinkage)
                        .map_err(|e| diverged(e, epoch, last_finite))?;
                    last_batch = Some(v.breakdown());
                    (v.total, v.value)
                }
                LossKind::CrossEntropy => {
                    let l = cross_entropy_loss(&mut tape, z, &yb)?;
                    (l, tape.value(l).item())
                }
            };
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, last_finite_epoch: last_finite });
            }
            loss_sum += value;
            let mut grads = tape.backward(loss)?;
            let mut g: Vec<(Tensor, Tensor)> = params
                .layers
                .iter()
                .map(|&(w, b)| {
                    let gw = grads.take(w).unwrap_or_else(|| Tensor::zeros(tape.value(w).shape()));
                    let gb = grads.take(b).unwrap_or_else(|| Tensor::zeros(tape.value(b).shape()));
                    (gw, gb)
                })
                .collect();
            if let Some(max_norm) = cfg.grad_clip {
                let norm = g
                    .iter()
                    .flat_map(|(w, b)| w.data().iter().chain(b.data()))
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    let s = max_norm / norm;
                    for (w, b) in &mut g {
                        w.data_mut().iter_mut().chain(b.data_mut()).for_each(|v| *v *= s);
                    }
                }
            }
            lr = cosine_lr(cfg.lr, step, total_steps);
            for ((layer, (vw, vb)), (gw, gb)) in model.layers_mut().iter_mut().zip(&mut velocity).zip(&g) {
                sgd_update(layer.weight.data_mut(), vw.data_mut(), gw.data(), lr, cfg.momentum, cfg.weight_decay);
                sgd_update(layer.bias.data_mut(), vb.data_mut(), gb.data(), lr, cfg.momentum, 0.0);
            }
            step += 1;
        }
        let finite = model
            .layers()
            .iter()
            .all(|l| l.weight.data().iter().chain(l.bias.data()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Diverged { epoch, last_finite_epoch: last_finite });
        }
        let mean_loss = loss_sum / batches.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean_loss:.6e}, lr {lr:.3e}");
        record.epochs.push(EpochRecord {
            epoch,
            lr_end: lr,
            mean_loss,
            last_batch,
        });
        last_finite = Some(epoch);
    }
    model.set_mode(Mode::Eval);
    record.timing.train_seconds = started.elapsed().as_secs_f64();
    let ckpt = Checkpoint {
        model,
        target,
        epoch: cfg.epochs,
        loss: cfg.loss,
    };
    Ok((ckpt, record))
}

fn diverged(e: Error, epoch: usize, last_finite_epoch: Option<usize>) -> Error {
    match e {
        Error::Numeric(msg) => {
            log::error!("numeric failure in epoch {epoch}: {msg}");
            Error::Diverged { epoch, last_finite_epoch }
        }
        other => other,
    }
}

fn sgd_update(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, wd: f64) {
    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + g;
        *w -= lr * (*v + wd * *w);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Percent of samples classified correctly.
    pub accuracy: f64,
    pub latent: Tensor,
    pub predictions: Vec<usize>,
}

pub fn evaluate(ckpt: &Checkpoint, data: &Dataset) -> Result<Evaluation> {
    if data.input_dim() != ckpt.model.input_dim() {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: data.images.shape().to_vec(),
            rhs: vec![ckpt.model.input_dim()],
        });
    }
    let latent = ckpt.model.latent(&data.images, EVAL_CHUNK)?;
    let predictions = predict(&latent);
    Ok(Evaluation {
        accuracy: percent(&predictions, &data.labels),
        latent,
        predictions,
    })
}

fn percent(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / truth.len() as f64
}

/// Attacks `data` at every ε of the ascending `grid`, in parallel across ε.
pub fn attack_sweep(ckpt: &Checkpoint, data: &Dataset, base: &AttackConfig, grid: &[f64]) -> Result<AttackRecord> {
    if grid.is_empty() {
        return Err(Error::config("epsilon grid is empty"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config(format!("epsilon grid must be strictly ascending: {grid:?}")));
    }
    let rows = grid
        .par_iter()
        .map(|&eps| attack_point(ckpt, data, base, eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackRecord {
        config: base.clone(),
        samples: data.len(),
        rows,
    })
}

fn attack_point(ckpt: &Checkpoint, data: &Dataset, base: &AttackConfig, eps: f64) -> Result<SweepRow> {
    let mut cfg = base.clone();
    cfg.epsilon = eps;
    let mut pred = Vec::with_capacity(data.len());
    let mut targets = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let chunk = data.select(&idx);
        let adv = attack(&ckpt.model, &ckpt.target, &chunk.images, &chunk.labels, &cfg)?;
        pred.extend(predict(&ckpt.model.latent(&adv.perturbed, EVAL_CHUNK)?));
        if let Some(t) = adv.targets {
            targets.extend(t);
        }
        start = end;
    }
    Ok(SweepRow {
        epsilon: eps,
        accuracy: percent(&pred, &data.labels),
        target_success: cfg.kind.is_targeted().then(|| percent(&pred, &targets)),
    })
}

/// One training run per `μ_T` in `grid` (σ_T from `cfg`), test accuracy each.
pub fn sweep_mu(cfg: &TrainConfig, grid: &[f64]) -> Result<Vec<MuRow>> {
    if grid.is_empty() {
        return Err(Error::config("mu grid is empty"));
    }
    if let Some(m) = grid.iter().find(|m| !(0.5..=300.0).contains(*m)) {
        return Err(Error::config(format!("mu {m} outside [0.5, 300]")));
    }
    let train_set = cfg.data.load(Split::Train)?;
    let test_set = cfg.data.load(Split::Test)?;
    grid.iter()
        .map(|&mu| {
            let run = TrainConfig { mu, ..cfg.clone() };
            let (ckpt, _) = train_on(&run, &train_set)?;
            Ok(MuRow {
                mu,
                sigma: cfg.sigma,
                ratio: mu / cfg.sigma,
                accuracy: evaluate(&ckpt, &test_set)?.accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub z: Vec<f64>,
    pub label: usize,
    pub predicted: usize,
}

/// Latent vectors of the samples whose label is in `classes` (all when empty).
pub fn export_latent(ckpt: &Checkpoint, data: &Dataset, classes: &[usize]) -> Result<Vec<LatentRow>> {
    let subset = data.filter_classes(classes);
    let ev = evaluate(ckpt, &subset)?;
    Ok((0..subset.len())
        .map(|i| LatentRow {
            z: ev.latent.row(i).to_vec(),
            label: subset.labels[i],
            predicted: ev.predictions[i],
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let targeted = rows.iter().any(|r| r.target_success.is_some());
    let mut out = String::from(if targeted { "epsilon,accuracy,target_success\n" } else { "epsilon,accuracy\n" });
    for r in rows {
        let _ = write!(out, "{},{}", r.epsilon, r.accuracy);
        if targeted {
            let _ = write!(out, ",{}", r.target_success.unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

pub fn mu_csv(rows: &[MuRow]) -> String {
    let mut out = String::from("mu,sigma,ratio,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.mu, r.sigma, r.ratio, r.accuracy);
    }
    out
}

pub fn latent_csv(rows: &[LatentRow], dim: usize) -> String {
    let mut out = (0..dim).map(|j| format!("z_{j}")).collect::<Vec<_>>().join(",");
    out.push_str(",label,predicted\n");
    for r in rows {
        for v in &r.z {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", r.label, r.predicted);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackKind;

    fn blob_cfg(loss: LossKind) -> TrainConfig {
        TrainConfig {
            data: DataConfig::Blobs {
                classes: 3,
                dim: 8,
                std: 0.1,
                train_per_class: 120,
                test_per_class: 60,
                seed: 11,
            },
            hidden: vec![16],
            loss,
            epochs: 40,
            batch_size: 36,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-15);
        assert!(cosine_lr(0.01, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_spares_biases() {
        let mut w = [1.0];
        let mut v = [0.0];
        sgd_update(&mut w, &mut v, &[0.0], 0.1, 0.9, 0.5);
        assert!((w[0] - 0.95).abs() < 1e-15);
        let mut b = [1.0];
        let mut vb = [0.0];
        sgd_update(&mut b, &mut vb, &[0.0], 0.1, 0.9, 0.0);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn record_breakdowns_resum_to_totals() {
        let (_, rec) = train(&TrainConfig { epochs: 3, ..blob_cfg(LossKind::Gccs) }).unwrap();
        assert_eq!(rec.epochs.len(), 3);
        for e in &rec.epochs {
            let b = e.last_batch.as_ref().unwrap();
            assert!((b.resum() - b.total).abs() <= 1e-9);
        }
        let acc = rec.clean_accuracy.unwrap();
        assert!((0.0..=100.0).contains(&acc));
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = TrainConfig { epochs: 4, ..blob_cfg(LossKind::Gccs) };
        let (a, ra) = train(&cfg).unwrap();
        let (b, rb) = train(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.metrics(), rb.metrics());
    }

    #[test]
    fn random_model_is_near_chance() {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 5000;
        let images = Tensor::new(vec![n, 16], (0..n * 16).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        labels.shuffle(&mut rng);
        let data = Dataset::new(images, labels, 10, Split::Test).unwrap();
        let ck = Checkpoint {
            model: MlpClassifier::new(&[16, 32, 10], 1.0, 9).unwrap(),
            target: TargetModel::new(10, 70.0, 1.0).unwrap(),
            epoch: 0,
            loss: LossKind::Gccs,
        };
        let acc = evaluate(&ck, &data).unwrap().accuracy;
        assert!((acc - 10.0).abs() <= 2.0, "{acc}");
        assert_eq!(acc, evaluate(&ck, &data).unwrap().accuracy);
    }

    #[test]
    fn sweep_grid_validation() {
        let data = gen_blobs(&BlobSpec::separated(3, 4, 0.1, 5, 3), Split::Test).unwrap();
        let ck = Checkpoint {
            model: MlpClassifier::new(&[4, 3], 1.0, 1).unwrap(),
            target: TargetModel::new(3, 70.0, 1.0).unwrap(),
            epoch: 0,
            loss: LossKind::Gccs,
        };
        let cfg = AttackConfig::new(AttackKind::Pgd, 0.0);
        assert!(attack_sweep(&ck, &data, &cfg, &[]).is_err());
        assert!(attack_sweep(&ck, &data, &cfg, &[0.1, 0.05]).is_err());
        let rec = attack_sweep(&ck, &data, &cfg, &[0.0]).unwrap();
        assert_eq!(rec.rows[0].accuracy, evaluate(&ck, &data).unwrap().accuracy);
        assert!(sweep_mu(&blob_cfg(LossKind::Gccs), &[0.1]).is_err());
    }

    #[test]
    fn csv_headers() {
        let rows = vec![SweepRow { epsilon: 0.0, accuracy: 50.0, target_success: Some(0.0) }];
        assert!(sweep_csv(&rows).starts_with("epsilon,accuracy,target_success\n"));
        let rows = vec![SweepRow { epsilon: 0.0, accuracy: 50.0, target_success: None }];
        assert_eq!(sweep_csv(&rows), "epsilon,accuracy\n0,50\n");
        let lat = vec![LatentRow { z: vec![1.0, 2.0], label: 1, predicted: 1 }];
        assert_eq!(latent_csv(&lat, 2), "z_0,z_1,label,predicted\n1,2,1,1\n");
    }

    #[test]
    fn fine_tune_requires_existing_matching_checkpoint() {
        let mut cfg = blob_cfg(LossKind::Gccs);
        cfg.mode = TrainMode::FineTune { checkpoint: PathBuf::from("/nonexistent/ckpt") };
        assert!(matches!(train(&cfg), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wrong.ckpt");
        Checkpoint {
            model: MlpClassifier::new(&[8, 5, 3], 1.0, 0).unwrap(),
            target: TargetModel::new(3, 70.0, 1.0).unwrap(),
            epoch: 0,
            loss: LossKind::CrossEntropy,
        }
        .save(&path)
        .unwrap();
        cfg.mode = TrainMode::FineTune { checkpoint: path };
        assert!(matches!(train(&cfg), Err(Error::Config(_))));
    }
}
