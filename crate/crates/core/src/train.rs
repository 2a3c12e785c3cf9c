//! Training loop and its parts: Adam with decoupled weight decay, global
//! gradient-norm clipping, reduce-on-plateau learning-rate scheduling, early
//! stopping, stochastic weight averaging, and per-dimension label
//! standardization. The same loop drives full-precision and
//! quantization-aware runs; the 1-bit teacher-matching scheme additionally
//! requires a frozen full-precision teacher whose predictions replace the
//! ground-truth targets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{WindowConfig, DEFAULT_CLIP};
use crate::synth::read_manifest;
use crate::model::{Modality, Model, ModelConfig};
use crate::quant::{qat_wrap, QatModel, QuantKind, QuantScheme};
use crate::seed::derive_seed;
use crate::synth::{PreparedRecording, Split};
use crate::tensor::graph::{Graph, Mode};
use crate::tensor::Tensor;

/// Relative-improvement threshold shared by the scheduler and early stopping:
/// a loss counts as an improvement only when it beats the best seen by more
/// than this.
pub const IMPROVEMENT_THRESHOLD: f32 = 1e-6;

/// One parameter's view for an optimizer step.
pub struct AdamParam<'a> {
    pub name: &'a str,
    pub values: &'a mut [f32],
    pub grad: &'a [f32],
    /// Whether decoupled weight decay applies (off for quantizer parameters).
    pub decay: bool,
}

/// Adam with decoupled weight decay (`w -= lr * wd * w` after the adaptive
/// step). Moment buffers are allocated lazily on the first step.
pub struct Adam {
    pub lr: f32,
    pub weight_decay: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, weight_decay: f32) -> Adam {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter. Errors on a non-finite
    /// gradient, naming the parameter that produced it.
    pub fn step(&mut self, params: &mut [AdamParam]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(
                "adam",
                format!("optimizer built for {} parameters, got {}", self.m.len(), params.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, p) in params.iter_mut().enumerate() {
            if p.grad.len() != p.values.len() {
                return Err(Error::shape(
                    "adam",
                    format!("parameter {} has {} values but {} gradients", p.name, p.values.len(), p.grad.len()),
                ));
            }
            if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::Other(format!("non-finite gradient {bad} in parameter {}", p.name)));
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                if p.decay {
                    p.values[i] -= self.lr * self.weight_decay * p.values[i];
                }
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|&g| g as f64 * g as f64).sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Reduce-on-plateau: after `patience` consecutive epochs without an
/// improvement the learning rate is multiplied by `factor`. The best loss is
/// kept across reductions.
pub struct PlateauScheduler {
    lr: f32,
    factor: f32,
    patience: usize,
    best: Option<f32>,
    bad: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f32, factor: f32, patience: usize) -> PlateauScheduler {
        PlateauScheduler { lr: lr0, factor, patience, best: None, bad: 0, reductions: 0 }
    }

    /// Feeds one epoch's validation loss; returns the learning rate to use
    /// from now on.
    pub fn observe(&mut self, loss: f32) -> f32 {
        match self.best {
            None => self.best = Some(loss),
            Some(best) if loss < best - IMPROVEMENT_THRESHOLD => {
                self.best = Some(loss);
                self.bad = 0;
            }
            Some(_) => {
                self.bad += 1;
                if self.bad >= self.patience {
                    self.lr *= self.factor;
                    self.reductions += 1;
                    self.bad = 0;
                }
            }
        }
        self.lr
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }
}

/// What early stopping decided about the epoch just observed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopSignal {
    pub improved: bool,
    pub stop: bool,
}

/// Stops training after `patience` consecutive epochs without improvement;
/// remembers which epoch held the best loss so its checkpoint is retained.
pub struct EarlyStopping {
    patience: usize,
    best: Option<f32>,
    best_epoch: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping { patience, best: None, best_epoch: 0, bad: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f32) -> StopSignal {
        let improved = match self.best {
            None => true,
            Some(best) => loss < best - IMPROVEMENT_THRESHOLD,
        };
        if improved {
            self.best = Some(loss);
            self.best_epoch = epoch;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        StopSignal { improved, stop: self.bad >= self.patience }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> Option<f32> {
        self.best
    }
}

/// Running equal-weight average of parameter snapshots:
/// `avg <- (avg * n + cur) / (n + 1)`.
pub struct SwaAverage {
    count: usize,
    avg: Vec<Vec<f32>>,
}

impl SwaAverage {
    pub fn new() -> SwaAverage {
        SwaAverage { count: 0, avg: Vec::new() }
    }

    pub fn update(&mut self, snapshot: &[&[f32]]) -> Result<()> {
        if self.count == 0 {
            self.avg = snapshot.iter().map(|s| s.to_vec()).collect();
            self.count = 1;
            return Ok(());
        }
        if self.avg.len() != snapshot.len() {
            return Err(Error::invalid(
                "swa",
                format!("average holds {} tensors, snapshot has {}", self.avg.len(), snapshot.len()),
            ));
        }
        let n = self.count as f32;
        for (a, s) in self.avg.iter_mut().zip(snapshot) {
            if a.len() != s.len() {
                return Err(Error::shape("swa", "snapshot tensor size changed between updates"));
            }
            for (av, &sv) in a.iter_mut().zip(s.iter()) {
                *av = (*av * n + sv) / (n + 1.0);
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn tensors(&self) -> &[Vec<f32>] {
        &self.avg
    }
}

impl Default for SwaAverage {
    fn default() -> Self {
        SwaAverage::new()
    }
}

/// Per-dimension z-score statistics for the three-component target
/// (impact x in mm, impact y in mm, time to collision in ms), fitted on the
/// training split. Constant dimensions standardize with a unit scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl LabelStats {
    pub fn identity() -> LabelStats {
        LabelStats { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Fits mean and population standard deviation per dimension.
    pub fn fit(targets: &[[f32; 3]]) -> Result<LabelStats> {
        if targets.is_empty() {
            return Err(Error::invalid("label_stats", "cannot standardize an empty target set"));
        }
        let n = targets.len() as f64;
        let mut mean = [0.0f64; 3];
        for t in targets {
            for d in 0..3 {
                mean[d] += t[d] as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = [0.0f64; 3];
        for t in targets {
            for d in 0..3 {
                let diff = t[d] as f64 - mean[d];
                var[d] += diff * diff;
            }
        }
        let mut stats = LabelStats::identity();
        for d in 0..3 {
            stats.mean[d] = mean[d] as f32;
            let sd = (var[d] / n).sqrt() as f32;
            stats.std[d] = if sd < 1e-6 { 1.0 } else { sd };
        }
        Ok(stats)
    }

    pub fn apply(&self, t: [f32; 3]) -> [f32; 3] {
        [
            (t[0] - self.mean[0]) / self.std[0],
            (t[1] - self.mean[1]) / self.std[1],
            (t[2] - self.mean[2]) / self.std[2],
        ]
    }

    pub fn invert(&self, z: [f32; 3]) -> [f32; 3] {
        [
            z[0] * self.std[0] + self.mean[0],
            z[1] * self.std[1] + self.mean[1],
            z[2] * self.std[2] + self.mean[2],
        ]
    }
}

/// Training and validation recordings.
#[derive(Debug)]
pub struct TrainData {
    pub train: Vec<PreparedRecording>,
    pub val: Vec<PreparedRecording>,
}

impl TrainData {
    /// Partitions prepared recordings by split; test recordings are ignored.
    /// Errors when either the training or the validation split is empty.
    pub fn from_recordings(recordings: Vec<PreparedRecording>) -> Result<TrainData> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for rec in recordings {
            match rec.split {
                Split::Train => train.push(rec),
                Split::Val => val.push(rec),
                Split::Test1 | Split::Test2 => {}
            }
        }
        if train.is_empty() {
            return Err(Error::invalid("train_data", "manifest has no training recordings"));
        }
        if val.is_empty() {
            return Err(Error::invalid("train_data", "manifest has no validation recordings"));
        }
        Ok(TrainData { train, val })
    }

    /// Loads every train/val recording named by a manifest.
    pub fn from_manifest(manifest: &Path) -> Result<TrainData> {
        let entries = read_manifest(manifest)?;
        let mut recordings = Vec::new();
        for (path, split) in entries {
            if matches!(split, Split::Train | Split::Val) {
                recordings.push(PreparedRecording::load(&path)?);
            }
        }
        TrainData::from_recordings(recordings)
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub window: WindowConfig,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub plateau_patience: usize,
    pub plateau_factor: f32,
    pub early_stop_patience: usize,
    /// Fraction of `max_epochs` after which weight averaging begins.
    pub swa_start: f32,
    pub max_epochs: usize,
    /// Windows sampled per recording per epoch (without replacement).
    pub windows_per_recording: usize,
    pub event_clip: i32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            window: WindowConfig::default(),
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            plateau_patience: 5,
            plateau_factor: 0.1,
            early_stop_patience: 10,
            swa_start: 0.75,
            max_epochs: 100,
            windows_per_recording: 6,
            event_clip: DEFAULT_CLIP,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("train_config", "batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("train_config", "max_epochs must be positive"));
        }
        if self.windows_per_recording == 0 {
            return Err(Error::invalid("train_config", "windows_per_recording must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("train_config", format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("train_config", "weight decay must be non-negative"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::invalid("train_config", "clip_norm must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid("train_config", "plateau_factor must lie in (0, 1)"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("train_config", "patience values must be positive"));
        }
        if !(0.0..=1.0).contains(&self.swa_start) {
            return Err(Error::invalid("train_config", "swa_start must lie in [0, 1]"));
        }
        Ok(())
    }

    /// First epoch (1-based) included in the weight average.
    pub fn swa_start_epoch(&self) -> usize {
        ((self.swa_start * self.max_epochs as f32).ceil() as usize).max(1)
    }
}

/// One epoch's log record. Losses are mean squared errors in standardized
/// target space; position and time errors are in raw millimetres and
/// milliseconds on the validation windows.
#[derive(Clone, Copy, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f32,
    pub train_mse: f32,
    pub val_mse: f32,
    pub val_pos_err_mm: f32,
    pub val_time_err_ms: f32,
    pub steps: usize,
}

/// Which final weights a run kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectedWeights {
    BestVal,
    Swa,
}

impl SelectedWeights {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectedWeights::BestVal => "best_val",
            SelectedWeights::Swa => "swa",
        }
    }
}

/// Validation metrics of one candidate set of final weights.
#[derive(Clone, Copy, Debug)]
pub struct FinalEval {
    pub val_mse: f32,
    pub val_pos_err_mm: f32,
    pub val_time_err_ms: f32,
}

/// Full log of a training run.
#[derive(Debug)]
pub struct TrainLog {
    pub epochs: Vec<EpochRow>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f32>,
    pub total_steps: usize,
    pub best_epoch: usize,
    pub best_val: FinalEval,
    /// Present when at least one epoch fell inside the averaging window.
    pub swa: Option<FinalEval>,
    pub selected: SelectedWeights,
}

impl TrainLog {
    /// Renders the per-epoch table plus the final best-checkpoint and
    /// weight-average evaluations as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_mse,val_mse,val_pos_err_mm,val_time_err_ms,steps\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.lr, r.train_mse, r.val_mse, r.val_pos_err_mm, r.val_time_err_ms, r.steps
            );
        }
        let _ = writeln!(
            out,
            "final_best_val,,,{},{},{},",
            self.best_val.val_mse, self.best_val.val_pos_err_mm, self.best_val.val_time_err_ms
        );
        if let Some(swa) = &self.swa {
            let _ = writeln!(out, "final_swa,,,{},{},{},", swa.val_mse, swa.val_pos_err_mm, swa.val_time_err_ms);
        }
        let _ = writeln!(out, "selected,{},,,,,", self.selected.as_str());
        out
    }
}

/// A frozen full-precision model whose predictions act as training targets
/// for the teacher-matching 1-bit scheme.
pub struct Teacher {
    pub qat: QatModel,
    pub stats: LabelStats,
}

/// A finished training run: model with the selected weights loaded, the
/// label statistics needed to interpret its outputs, and the full log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub qat: QatModel,
    pub stats: LabelStats,
    pub log: TrainLog,
}

/// One training or validation item: recording index and window end time.
type Item = (usize, u64);

fn snapshot_params(qat: &QatModel) -> Vec<Vec<f32>> {
    qat.model
        .params
        .iter()
        .chain(qat.qparams.iter())
        .map(|p| p.tensor.data.clone())
        .collect()
}

fn load_params(qat: &mut QatModel, snapshot: &[Vec<f32>]) {
    let slots = qat.model.params.iter_mut().chain(qat.qparams.iter_mut());
    for (p, s) in slots.zip(snapshot) {
        p.tensor.data.copy_from_slice(s);
    }
}

/// Chooses up to `take` distinct indices of `n` via a partial Fisher-Yates
/// shuffle, preserving deterministic order of draws.
fn sample_indices(n: usize, take: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let take = take.min(n);
    for i in 0..take {
        let j = i + rng.random_range(0..n - i);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

fn standardized_target(
    rec: &PreparedRecording,
    t_end: u64,
    cfg: &TrainConfig,
    stats: &LabelStats,
    teacher: Option<&mut Teacher>,
    cache: &mut HashMap<(usize, u64), [f32; 3]>,
    rec_idx: usize,
    modality: Modality,
) -> Result<[f32; 3]> {
    match teacher {
        None => Ok(stats.apply(rec.target(t_end))),
        Some(t) => {
            if let Some(raw) = cache.get(&(rec_idx, t_end)) {
                return Ok(stats.apply(*raw));
            }
            let (evs, rgb) = rec.model_inputs(t_end, &cfg.window, cfg.event_clip, modality)?;
            let pred = t.qat.predict(evs.as_ref(), rgb.as_ref(), Mode::Eval)?;
            let raw = t.stats.invert([pred.x_mm, pred.y_mm, pred.t_ms]);
            cache.insert((rec_idx, t_end), raw);
            Ok(stats.apply(raw))
        }
    }
}

/// Runs validation: mean squared error in standardized space plus mean
/// position error (mm) and mean absolute time error (ms) in raw units.
fn validate_on(
    qat: &mut QatModel,
    recs: &[PreparedRecording],
    items: &[Item],
    cfg: &TrainConfig,
    stats: &LabelStats,
) -> Result<FinalEval> {
    let modality = qat.model.cfg.modality;
    let mut mse = 0.0f64;
    let mut pos = 0.0f64;
    let mut time = 0.0f64;
    for &(rec_idx, t_end) in items {
        let rec = &recs[rec_idx];
        let (evs, rgb) = rec.model_inputs(t_end, &cfg.window, cfg.event_clip, modality)?;
        let pred = qat.predict(evs.as_ref(), rgb.as_ref(), Mode::Eval)?;
        let z_pred = [pred.x_mm, pred.y_mm, pred.t_ms];
        let z_tgt = stats.apply(rec.target(t_end));
        mse += z_pred
            .iter()
            .zip(z_tgt.iter())
            .map(|(p, t)| ((p - t) as f64).powi(2))
            .sum::<f64>()
            / 3.0;
        let raw_pred = stats.invert(z_pred);
        let raw_tgt = rec.target(t_end);
        pos += (((raw_pred[0] - raw_tgt[0]) as f64).powi(2) + ((raw_pred[1] - raw_tgt[1]) as f64).powi(2)).sqrt();
        time += ((raw_pred[2] - raw_tgt[2]) as f64).abs();
    }
    let n = items.len().max(1) as f64;
    Ok(FinalEval {
        val_mse: (mse / n) as f32,
        val_pos_err_mm: (pos / n) as f32,
        val_time_err_ms: (time / n) as f32,
    })
}

/// Trains a model under `scheme` on the given data. The quantization-aware
/// path runs the identical loop; the teacher-matching 1-bit scheme requires
/// `teacher` and minimizes the mean squared error against the teacher's
/// (raw-unit) predictions instead of the ground-truth labels.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: ModelConfig,
    scheme: QuantScheme,
    data: &TrainData,
    mut teacher: Option<&mut Teacher>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    scheme.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("train", "training split is empty"));
    }
    if data.val.is_empty() {
        return Err(Error::invalid("train", "validation split is empty"));
    }
    if scheme.kind == QuantKind::Reactnet && teacher.is_none() {
        return Err(Error::invalid("train", "the teacher-matching 1-bit scheme requires a full-precision teacher"));
    }
    if let Some(t) = teacher.as_deref() {
        if t.qat.model.cfg.modality != model_cfg.modality {
            return Err(Error::invalid(
                "train",
                format!(
                    "teacher modality {:?} does not match student modality {:?}",
                    t.qat.model.cfg.modality, model_cfg.modality
                ),
            ));
        }
    }

    let modality = model_cfg.modality;
    let mut qat = qat_wrap(Model::new(model_cfg)?, scheme)?;

    // Window ends eligible for supervision (ending before the collision).
    let train_ends: Vec<Vec<u64>> = data.train.iter().map(|r| r.eligible_window_ends(&cfg.window)).collect();
    if train_ends.iter().all(|e| e.is_empty()) {
        return Err(Error::invalid("train", "no training recording has an eligible window"));
    }

    // Label statistics come from every eligible training window, not just
    // the per-epoch samples, so they are independent of the epoch count.
    let mut all_targets = Vec::new();
    for (rec, ends) in data.train.iter().zip(&train_ends) {
        for &t_end in ends {
            all_targets.push(rec.target(t_end));
        }
    }
    let stats = LabelStats::fit(&all_targets)?;

    // Fixed validation windows, sampled once.
    let mut val_items: Vec<Item> = Vec::new();
    for (rec_idx, rec) in data.val.iter().enumerate() {
        let ends = rec.eligible_window_ends(&cfg.window);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, rec_idx as u64, 0x5641));
        for i in sample_indices(ends.len(), cfg.windows_per_recording, &mut rng) {
            val_items.push((rec_idx, ends[i]));
        }
    }
    if val_items.is_empty() {
        return Err(Error::invalid("train", "no validation recording has an eligible window"));
    }

    let n_model = qat.model.params.len();
    let n_q = qat.qparams.len();
    let sizes: Vec<usize> = qat
        .model
        .params
        .iter()
        .chain(qat.qparams.iter())
        .map(|p| p.tensor.data.len())
        .collect();

    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut early = EarlyStopping::new(cfg.early_stop_patience);
    let mut swa = SwaAverage::new();
    let mut teacher_cache: HashMap<(usize, u64), [f32; 3]> = HashMap::new();

    let mut rows: Vec<EpochRow> = Vec::new();
    let mut step_losses: Vec<f32> = Vec::new();
    let mut best_snapshot = snapshot_params(&qat);
    let mut best_row: Option<EpochRow> = None;
    let swa_from = cfg.swa_start_epoch();

    for epoch in 1..=cfg.max_epochs {
        // Progressive-sharpness schedules read the training fraction.
        qat.set_progress((epoch - 1) as f32 / cfg.max_epochs as f32);

        // Per-epoch window sample: up to `windows_per_recording` ends per
        // recording without replacement, then a global shuffle.
        let mut items: Vec<Item> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0x7A));
        for (rec_idx, ends) in train_ends.iter().enumerate() {
            for i in sample_indices(ends.len(), cfg.windows_per_recording, &mut rng) {
                items.push((rec_idx, ends[i]));
            }
        }
        for i in (1..items.len()).rev() {
            let j = rng.random_range(0..i + 1);
            items.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        let mut epoch_items = 0usize;
        let mut steps_this_epoch = 0usize;

        for (batch_idx, batch) in items.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let inv_bs = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f32;

            for (item_idx, &(rec_idx, t_end)) in batch.iter().enumerate() {
                let rec = &data.train[rec_idx];
                let target = standardized_target(
                    rec,
                    t_end,
                    cfg,
                    &stats,
                    teacher.as_deref_mut(),
                    &mut teacher_cache,
                    rec_idx,
                    modality,
                )?;
                let (evs, rgb) = rec.model_inputs(t_end, &cfg.window, cfg.event_clip, modality)?;
                let mut g = Graph::new();
                let dropout_seed =
                    derive_seed(cfg.seed, epoch as u64, ((batch_idx as u64) << 20) | item_idx as u64);
                let fwd = qat.forward_pass(&mut g, evs.as_ref(), rgb.as_ref(), Mode::Train, dropout_seed)?;
                let target_node = g.constant(Tensor::from_vec(&[3], target.to_vec())?);
                let loss = g.mse(fwd.out, target_node)?;
                g.backward(loss)?;
                batch_loss += g.data(loss)[0] * inv_bs;

                for (slot, &node) in fwd.param_nodes.iter().enumerate() {
                    if let Some(grad) = g.grad(node) {
                        for (a, &gv) in grads[slot].iter_mut().zip(grad) {
                            *a += gv * inv_bs;
                        }
                    }
                }
                for (qi, node) in fwd.qparam_nodes.iter().enumerate() {
                    if let Some(node) = node {
                        if let Some(grad) = g.grad(*node) {
                            for (a, &gv) in grads[n_model + qi].iter_mut().zip(grad) {
                                *a += gv * inv_bs;
                            }
                        }
                    }
                }
            }

            clip_gradients(&mut grads, cfg.clip_norm);
            adam.lr = scheduler.lr();
            {
                let (model_params, qparams) = (&mut qat.model.params, &mut qat.qparams);
                let mut slots: Vec<AdamParam> = Vec::with_capacity(n_model + n_q);
                for (p, g) in model_params.iter_mut().zip(&grads[..n_model]) {
                    slots.push(AdamParam { name: &p.name, values: &mut p.tensor.data, grad: g, decay: true });
                }
                for (p, g) in qparams.iter_mut().zip(&grads[n_model..]) {
                    slots.push(AdamParam { name: &p.name, values: &mut p.tensor.data, grad: g, decay: false });
                }
                adam.step(&mut slots)?;
            }
            step_losses.push(batch_loss);
            steps_this_epoch += 1;
            epoch_loss += batch_loss as f64 * batch.len() as f64;
            epoch_items += batch.len();
        }

        let val = validate_on(&mut qat, &data.val, &val_items, cfg, &stats)?;
        let lr_after = scheduler.observe(val.val_mse);
        let signal = early.observe(epoch, val.val_mse);
        let row = EpochRow {
            epoch,
            lr: lr_after,
            train_mse: (epoch_loss / epoch_items.max(1) as f64) as f32,
            val_mse: val.val_mse,
            val_pos_err_mm: val.val_pos_err_mm,
            val_time_err_ms: val.val_time_err_ms,
            steps: steps_this_epoch,
        };
        rows.push(row);
        if signal.improved {
            best_snapshot = snapshot_params(&qat);
            best_row = Some(row);
        }
        if epoch >= swa_from {
            let views: Vec<&[f32]> = qat
                .model
                .params
                .iter()
                .chain(qat.qparams.iter())
                .map(|p| p.tensor.data.as_slice())
                .collect();
            swa.update(&views)?;
        }
        if signal.stop {
            break;
        }
    }

    // Final evaluation of both candidates: the best-validation checkpoint
    // and the weight average. The lower validation loss wins; ties keep the
    // best-validation weights.
    load_params(&mut qat, &best_snapshot);
    let best_eval = match best_row {
        Some(r) => FinalEval { val_mse: r.val_mse, val_pos_err_mm: r.val_pos_err_mm, val_time_err_ms: r.val_time_err_ms },
        None => validate_on(&mut qat, &data.val, &val_items, cfg, &stats)?,
    };
    let mut swa_eval = None;
    let mut selected = SelectedWeights::BestVal;
    if swa.count() > 0 {
        let swa_params: Vec<Vec<f32>> = swa.tensors().to_vec();
        load_params(&mut qat, &swa_params);
        let eval = validate_on(&mut qat, &data.val, &val_items, cfg, &stats)?;
        if eval.val_mse < best_eval.val_mse {
            selected = SelectedWeights::Swa;
        } else {
            load_params(&mut qat, &best_snapshot);
        }
        swa_eval = Some(eval);
    }

    let total_steps = step_losses.len();
    Ok(TrainOutcome {
        qat,
        stats,
        log: TrainLog {
            epochs: rows,
            step_losses,
            total_steps,
            best_epoch: early.best_epoch(),
            best_val: best_eval,
            swa: swa_eval,
            selected,
        },
    })
}
