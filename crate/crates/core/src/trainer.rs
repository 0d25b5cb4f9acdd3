//! Training loop: student/teacher forward passes, loss assembly, AdamW with
//! decoupled weight decay, warmup + cosine schedule, EMA teacher updates,
//! checkpoints and JSON-lines metrics.
//!
//! Everything random is derived from `(seed, epoch, sample index)`, so a run
//! resumed from `last.ckpt` replays exactly what an uninterrupted run does.
//! Parameters and optimizer moments are rounded to `f32` after every update
//! so that the `f32` checkpoint payload stores them exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::boxgeom::{anchor_permutation, AnchorPermutation, FlipKind};
use crate::checkpoint::{tensor_text, text_tensor, CheckpointError, RawCheckpoint};
use crate::data::{initial_augment, load_dataset, make_pair, mix_seed, DataError, LabeledSample};
use crate::eval::{evaluate, EvalConfig, EvalError, MetricsReport};
use crate::losses::{
    cls_consistency_var, confidence_mask, loc_consistency_var, match_targets, supervised_loss_var, total_loss,
    LossBreakdown, LossError,
};
use crate::model::{
    ema_update, forward_vars, init_params, load_params, Arch, DetectorParams, ModelError, StudentTeacher,
    PARAM_NAMES,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples {ids})")]
    NonFiniteLoss { epoch: usize, batch: usize, ids: String },
    #[error("optimizer state does not match the parameters: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The four ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Supervised loss only, no flips in the initial augmentation.
    Vanilla,
    /// Supervised loss only, flips enabled in the initial augmentation.
    Flipaug,
    /// Supervised plus consistency loss, no flips in the initial augmentation.
    Consis,
    /// Supervised plus consistency loss with flips in the initial augmentation.
    ConsisFlipaug,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Vanilla, Mode::Flipaug, Mode::Consis, Mode::ConsisFlipaug];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Flipaug => "flipaug",
            Mode::Consis => "consis",
            Mode::ConsisFlipaug => "consis_flipaug",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_consistency(self) -> bool {
        matches!(self, Mode::Consis | Mode::ConsisFlipaug)
    }

    pub fn initial_flip(self) -> bool {
        matches!(self, Mode::Flipaug | Mode::ConsisFlipaug)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub mode: Mode,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub consistency_weight: f64,
    /// Linear ramp of the consistency weight over this many epochs; 0 = off.
    pub consistency_rampup_epochs: usize,
    /// Teacher foreground probability an anchor needs to enter the
    /// consistency terms; 0 keeps every anchor.
    pub confidence_mask_threshold: f64,
    pub seed: u64,
    /// Seed of the shared initialization; defaults to `seed`.
    pub init_seed: Option<u64>,
    pub eval_every: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Stop after this many completed epochs (0 = run to the end). Used to
    /// exercise resuming.
    pub halt_after_epochs: usize,
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            mode: Mode::ConsisFlipaug,
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 16,
            max_lr: 1e-4,
            weight_decay: 0.01,
            tau: 0.01,
            consistency_weight: 1.0,
            consistency_rampup_epochs: 0,
            confidence_mask_threshold: 0.0,
            seed: 0,
            init_seed: None,
            eval_every: 5,
            num_classes: 1,
            image_size: 64,
            pos_threshold: crate::losses::DEFAULT_POS_THRESHOLD,
            neg_threshold: crate::losses::DEFAULT_NEG_THRESHOLD,
            conf_threshold: crate::eval::DEFAULT_CONF_THRESHOLD,
            nms_iou: crate::eval::DEFAULT_NMS_IOU,
            halt_after_epochs: 0,
            resume: false,
        }
    }
}

/// Keys that do not influence the trajectory of a run.
const CONTROL_KEYS: [&str; 2] = ["halt_after_epochs", "resume"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        for (k, v) in [
            ("max_lr", self.max_lr),
            ("weight_decay", self.weight_decay),
            ("consistency_weight", self.consistency_weight),
            ("confidence_mask_threshold", self.confidence_mask_threshold),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{k} must be a finite non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]".into());
        }
        if !(0.0 <= self.neg_threshold && self.neg_threshold <= self.pos_threshold && self.pos_threshold <= 1.0) {
            return bad("need 0 <= neg_threshold <= pos_threshold <= 1".into());
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad("conf_threshold must lie in [0, 1] and nms_iou in (0, 1]".into());
        }
        Arch::new(self.num_classes, self.image_size)?;
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            conf_threshold: self.conf_threshold,
            nms_iou: self.nms_iou,
        }
    }

    /// Every setting as `(key, value)` text pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("mode", self.mode.name().to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_lr", self.max_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("tau", self.tau.to_string()),
            ("consistency_weight", self.consistency_weight.to_string()),
            ("consistency_rampup_epochs", self.consistency_rampup_epochs.to_string()),
            ("confidence_mask_threshold", self.confidence_mask_threshold.to_string()),
            ("seed", self.seed.to_string()),
            ("init_seed", self.init_seed().to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("image_size", self.image_size.to_string()),
            ("pos_threshold", self.pos_threshold.to_string()),
            ("neg_threshold", self.neg_threshold.to_string()),
            ("conf_threshold", self.conf_threshold.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("halt_after_epochs", self.halt_after_epochs.to_string()),
            ("resume", self.resume.to_string()),
        ]
    }

    /// `key = value` lines; [`TrainConfig::apply`] reads them back.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// The snapshot minus the output location and the keys that only
    /// control the process. Stored in checkpoints, so runs that differ only
    /// in where they write produce identical files.
    pub fn trajectory_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs().into_iter().filter(|(k, _)| !CONTROL_KEYS.contains(k) && *k != "out_dir") {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| TrainError::InvalidConfig(format!("bad value {v:?} for {key}")))
        }
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "mode" => {
                self.mode = Mode::parse(value)
                    .ok_or_else(|| TrainError::InvalidConfig(format!("unknown mode {value:?}")))?
            }
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_lr" => self.max_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "consistency_weight" => self.consistency_weight = num(key, value)?,
            "consistency_rampup_epochs" => self.consistency_rampup_epochs = num(key, value)?,
            "confidence_mask_threshold" => self.confidence_mask_threshold = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "init_seed" => self.init_seed = Some(num(key, value)?),
            "eval_every" => self.eval_every = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "pos_threshold" => self.pos_threshold = num(key, value)?,
            "neg_threshold" => self.neg_threshold = num(key, value)?,
            "conf_threshold" => self.conf_threshold = num(key, value)?,
            "nms_iou" => self.nms_iou = num(key, value)?,
            "halt_after_epochs" => self.halt_after_epochs = num(key, value)?,
            "resume" => self.resume = num(key, value)?,
            _ => return Err(TrainError::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::InvalidConfig(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `max_lr`, then half-cosine decay to 0.
pub fn lr_at(step: u64, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let warm = (cfg.warmup_epochs * steps_per_epoch) as f64;
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let s = step as f64;
    if s < warm {
        return cfg.max_lr * s / warm;
    }
    let t = if total > warm { ((s - warm) / (total - warm)).min(1.0) } else { 1.0 };
    cfg.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &DetectorParams, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            weight_decay,
            t: 0,
        }
    }
}

/// One AdamW update:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`, with the
/// decay applied to the pre-update weights.
pub fn optimizer_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TrainError::ShapeMismatch(format!("{:?} vs {:?} vs {:?}", p.shape(), g.shape(), m.shape())));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let wd = state.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *w);
        }
    }
    Ok(())
}

fn snap_f32(tensors: &mut [Tensor]) {
    for t in tensors {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Where a batch sits in the run; seeds every random choice it makes.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub consistency_weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Mean over the batch.
    pub loss: LossBreakdown,
    /// Sum of `|dL/d theta_t|` over every teacher tensor and sample.
    pub teacher_grad_abs_sum: f64,
}

/// Precomputed anchor pairings for the three flips.
pub struct FlipTables {
    perms: Vec<(FlipKind, AnchorPermutation)>,
}

impl FlipTables {
    pub fn new(arch: &Arch) -> Self {
        let grid = arch.grid();
        Self {
            perms: FlipKind::ALL.iter().map(|&k| (k, anchor_permutation(&grid, k))).collect(),
        }
    }

    pub fn get(&self, kind: FlipKind) -> &AnchorPermutation {
        &self.perms.iter().find(|(k, _)| *k == kind).expect("all kinds present").1
    }
}

fn sample_seed(cfg: &TrainConfig, epoch: usize, index: usize, stream: u64) -> u64 {
    mix_seed(cfg.seed, &[epoch as u64, index as u64, stream])
}

/// One optimizer step on `batch` (`(dataset index, sample)` pairs).
///
/// Per sample: initial augmentation, student forward on `I`, supervised
/// loss; in the consistency modes also the flip pair, teacher forward on
/// `flip(I)` and both consistency terms. The teacher's parameters are tape
/// leaves so their gradient can be inspected, but its outputs only reach
/// the loss as constants. Gradients are averaged over the batch, then one
/// AdamW step and one EMA update follow.
pub fn train_step(
    batch: &[(usize, &LabeledSample)],
    st: &mut StudentTeacher,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    flips: &FlipTables,
    ctx: StepContext,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let arch = st.student.arch.clone();
    let grid = arch.grid();
    let n = batch.len() as f64;
    let mut grads: Vec<Tensor> = st.student.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut sums = LossBreakdown::default();
    let mut teacher_grad_abs_sum = 0.0;

    for &(index, sample) in batch {
        let (aug, _) = initial_augment(sample, sample_seed(cfg, ctx.epoch, index, 1), cfg.mode.initial_flip());
        let tape = Tape::new();
        let student_vars = load_params(&tape, &st.student, true);
        let teacher_vars = load_params(&tape, &st.teacher, true);
        let out = forward_vars(&arch, &student_vars, tape.constant(aug.image.clone()))?;
        let targets = match_targets(&grid, &aug.boxes, cfg.pos_threshold, cfg.neg_threshold)?;
        let sup = supervised_loss_var(out.log_probs, out.loc, &targets)?;

        let (objective, breakdown) = if cfg.mode.uses_consistency() {
            let pair = make_pair(&aug, sample_seed(cfg, ctx.epoch, index, 2));
            let teacher_out =
                forward_vars(&arch, &teacher_vars, tape.constant(pair.teacher.image.clone()))?.to_output();
            let perm = flips.get(pair.kind);
            let mask = confidence_mask(&teacher_out, perm, cfg.confidence_mask_threshold);
            let con_loc = loc_consistency_var(out.loc, &teacher_out, perm, pair.kind, &mask)?;
            let con_cls = cls_consistency_var(out.log_probs, &teacher_out, perm, &mask)?;
            let breakdown = total_loss(sup.item(), con_loc.item(), con_cls.item(), ctx.consistency_weight);
            let objective = sup.add(con_loc.add(con_cls)?.scale(ctx.consistency_weight)?)?;
            (objective, breakdown)
        } else {
            (sup, total_loss(sup.item(), 0.0, 0.0, ctx.consistency_weight))
        };

        if !objective.item().is_finite() {
            let ids: Vec<&str> = batch.iter().map(|(_, s)| s.id.as_str()).collect();
            return Err(TrainError::NonFiniteLoss {
                epoch: ctx.epoch,
                batch: ctx.batch,
                ids: ids.join(","),
            });
        }
        tape.backward(objective)?;
        for (acc, v) in grads.iter_mut().zip(&student_vars) {
            let g = tape.grad(*v).expect("student params are tracked");
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b / n;
            }
        }
        for v in &teacher_vars {
            let g = tape.grad(*v).expect("teacher params are tape leaves");
            teacher_grad_abs_sum += g.data().iter().map(|x| x.abs()).sum::<f64>();
        }
        sums.sup += breakdown.sup;
        sums.con_loc += breakdown.con_loc;
        sums.con_cls += breakdown.con_cls;
    }

    optimizer_step(&mut st.student.tensors, &grads, opt, ctx.lr)?;
    snap_f32(&mut st.student.tensors);
    snap_f32(&mut opt.m);
    snap_f32(&mut opt.v);
    st.student.step += 1;
    ema_update(st)?;
    snap_f32(&mut st.teacher.tensors);

    let loss = total_loss(sums.sup / n, sums.con_loc / n, sums.con_cls / n, ctx.consistency_weight);
    Ok(StepReport {
        loss,
        teacher_grad_abs_sum,
    })
}

/// Full training state as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub st: StudentTeacher,
    pub opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Best validation mAP50 so far (rounded to `f32`) and its epoch.
    pub best: Option<(f64, usize)>,
    /// `key = value` snapshot of the settings that produced this state.
    pub config_text: String,
}

impl TrainState {
    pub fn to_raw(&self) -> RawCheckpoint {
        let arch = &self.st.student.arch;
        let mut tensors = Vec::new();
        for (prefix, list) in [
            ("student", &self.st.student.tensors),
            ("teacher", &self.st.teacher.tensors),
            ("adam.m", &self.opt.m),
            ("adam.v", &self.opt.v),
        ] {
            for (name, t) in PARAM_NAMES.iter().zip(list.iter()) {
                tensors.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        let mut arch_desc = vec![arch.num_classes as f64, arch.image_size as f64];
        arch_desc.extend(arch.anchor_shapes.iter().flat_map(|&(w, h)| [w, h]));
        tensors.push(("meta.arch".into(), Tensor::new(vec![arch_desc.len()], arch_desc).expect("rank-1")));
        let (best_map, best_epoch) = self.best.map_or((-1.0, 0.0), |(m, e)| (m, e as f64));
        tensors.push((
            "meta.progress".into(),
            Tensor::from_slice(&[4], &[self.epoch as f64, best_map, best_epoch, self.opt.t as f64])
                .expect("rank-1"),
        ));
        tensors.push(("meta.config".into(), text_tensor(&self.config_text)));
        RawCheckpoint {
            arch_hash: arch.hash(),
            step: self.st.student.step,
            tensors,
        }
    }

    pub fn from_raw(raw: &RawCheckpoint) -> std::result::Result<Self, CheckpointError> {
        let missing = |n: &str| CheckpointError::Malformed(format!("missing tensor {n}"));
        let desc = raw.get("meta.arch").ok_or_else(|| missing("meta.arch"))?.data();
        if desc.len() < 2 || desc.len() % 2 != 0 {
            return Err(CheckpointError::Malformed("bad architecture record".into()));
        }
        let arch = Arch {
            num_classes: desc[0] as usize,
            image_size: desc[1] as usize,
            anchor_shapes: desc[2..].chunks(2).map(|c| (c[0], c[1])).collect(),
        };
        if arch.hash() != raw.arch_hash {
            return Err(CheckpointError::ArchMismatch {
                expected: raw.arch_hash,
                found: arch.hash(),
            });
        }
        let shapes = arch.param_shapes();
        let group = |prefix: &str| -> std::result::Result<Vec<Tensor>, CheckpointError> {
            PARAM_NAMES
                .iter()
                .zip(&shapes)
                .map(|(name, shape)| {
                    let key = format!("{prefix}.{name}");
                    let t = raw.get(&key).ok_or_else(|| missing(&key))?;
                    if t.shape() != shape.as_slice() {
                        return Err(CheckpointError::Malformed(format!("{key} has shape {:?}", t.shape())));
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        let progress = raw.get("meta.progress").ok_or_else(|| missing("meta.progress"))?.data();
        if progress.len() != 4 {
            return Err(CheckpointError::Malformed("bad progress record".into()));
        }
        let config_text = tensor_text(raw.get("meta.config").ok_or_else(|| missing("meta.config"))?)?;
        let setting = |key: &str| {
            config_value(&config_text, key)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| CheckpointError::Malformed(format!("config snapshot lacks {key}")))
        };
        let weight_decay = setting("weight_decay")?;
        let tau = setting("tau")?;
        let student = DetectorParams {
            arch: arch.clone(),
            tensors: group("student")?,
            step: raw.step,
        };
        let teacher = DetectorParams {
            arch,
            tensors: group("teacher")?,
            step: raw.step,
        };
        Ok(Self {
            st: StudentTeacher {
                student,
                teacher,
                tau,
            },
            opt: OptimizerState {
                m: group("adam.m")?,
                v: group("adam.v")?,
                weight_decay,
                t: progress[3] as u64,
            },
            epoch: progress[0] as usize,
            best: (progress[1] >= 0.0).then_some((progress[1], progress[2] as usize)),
            config_text,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_raw().save(path)?)
    }

    pub fn load(path: &Path, expected: Option<&Arch>) -> Result<Self> {
        let raw = RawCheckpoint::load(path, expected.map(Arch::hash))?;
        Ok(Self::from_raw(&raw)?)
    }
}

fn config_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub split: String,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub f1: f64,
    pub f2: f64,
    pub loss_sup: f64,
    pub loss_con_loc: f64,
    pub loss_con_cls: f64,
    pub lr: f64,
    pub mode: Mode,
    pub seed: u64,
    pub model: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Epoch means of the training objective terms.
    pub train_loss_sup: f64,
    pub train_loss_con_loc: f64,
    pub train_loss_con_cls: f64,
    pub train_loss_total: f64,
}

impl MetricsLine {
    pub fn from_report(
        report: &MetricsReport,
        epoch: usize,
        split: &str,
        lr: f64,
        mode: Mode,
        seed: u64,
        model: &str,
        train: LossBreakdown,
    ) -> Self {
        Self {
            epoch,
            split: split.into(),
            precision: report.precision,
            recall: report.recall,
            map50: report.map50,
            f1: report.f1,
            f2: report.f2,
            loss_sup: report.loss_sup,
            loss_con_loc: report.loss_con_loc,
            loss_con_cls: report.loss_con_cls,
            lr,
            mode,
            seed,
            model: model.into(),
            tp: report.tp,
            fp: report.fp,
            fn_: report.fn_,
            conf_threshold: report.conf_threshold,
            nms_iou: report.nms_iou,
            train_loss_sup: train.sup,
            train_loss_con_loc: train.con_loc,
            train_loss_con_cls: train.con_cls,
            train_loss_total: train.total,
        }
    }
}

/// What [`train`] hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Per-step batch-mean losses of the steps run by this call.
    pub step_losses: Vec<LossBreakdown>,
    pub metrics: Vec<MetricsLine>,
    /// Total `|dL/d theta_t|` observed over all steps of this call.
    pub teacher_grad_abs_sum: f64,
    /// Whether the run stopped early because of `halt_after_epochs`.
    pub halted: bool,
}

pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

fn consistency_weight_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.consistency_rampup_epochs == 0 {
        cfg.consistency_weight
    } else {
        cfg.consistency_weight * ((epoch + 1) as f64 / cfg.consistency_rampup_epochs as f64).min(1.0)
    }
}

/// Batch order of one epoch: a seeded shuffle of the dataset indices.
pub fn epoch_order(cfg: &TrainConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[epoch as u64, u64::MAX])));
    order
}

/// Trains on in-memory splits. `out_dir` receives `config.txt`,
/// `metrics.jsonl`, `last.ckpt` and `best.ckpt`.
pub fn train_on(cfg: &TrainConfig, train_set: &[LabeledSample], val_set: &[LabeledSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::InvalidConfig(format!("no training samples under {}", cfg.data_dir.display())));
    }
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let snapshot = out.join(CONFIG_SNAPSHOT);
    fs::write(&snapshot, cfg.to_kv_text()).map_err(io_err(&snapshot))?;

    let arch = Arch::new(cfg.num_classes, cfg.image_size)?;
    let metrics_path = out.join(METRICS_FILE);
    let last_path = out.join(LAST_CKPT);
    let mut state = if cfg.resume && last_path.exists() {
        let state = TrainState::load(&last_path, Some(&arch))?;
        let stored = TrainConfig::from_snapshot(&state.config_text)?;
        if stored.trajectory_text() != cfg.trajectory_text() {
            return Err(TrainError::InvalidConfig(
                "resume requested but last.ckpt was written with a different config".into(),
            ));
        }
        info!("resuming from {} at epoch {}", last_path.display(), state.epoch);
        state
    } else {
        let mut st = init_params(cfg.init_seed(), cfg.num_classes, cfg.image_size)?;
        st.tau = cfg.tau;
        TrainState {
            opt: OptimizerState::new(&st.student, cfg.weight_decay),
            st,
            epoch: 0,
            best: None,
            config_text: cfg.trajectory_text(),
        }
    };
    state.config_text = cfg.trajectory_text();

    // Keep only the metric lines that precede the restored epoch.
    // The retained lines are copied verbatim, not re-serialized.
    let mut metrics: Vec<MetricsLine> = Vec::new();
    let mut kept_text = String::new();
    if state.epoch > 0 && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
        for raw in text.lines() {
            if let Ok(line) = serde_json::from_str::<MetricsLine>(raw) {
                if line.epoch <= state.epoch {
                    kept_text.push_str(raw);
                    kept_text.push('\n');
                    metrics.push(line);
                }
            }
        }
    }
    fs::write(&metrics_path, kept_text).map_err(io_err(&metrics_path))?;

    let flips = FlipTables::new(&arch);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let eval_cfg = cfg.eval_config();
    let mut step_losses = Vec::new();
    let mut teacher_grad_abs_sum = 0.0;
    let mut halted = false;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let order = epoch_order(cfg, epoch, train_set.len());
        let mut epoch_sum = LossBreakdown::default();
        let mut lr = 0.0;
        let cw = consistency_weight_at(cfg, epoch);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = lr_at(state.st.student.step, cfg, steps_per_epoch);
            let batch: Vec<(usize, &LabeledSample)> = chunk.iter().map(|&i| (i, &train_set[i])).collect();
            let ctx = StepContext {
                epoch,
                batch: b,
                lr,
                consistency_weight: cw,
            };
            let report = train_step(&batch, &mut state.st, &mut state.opt, cfg, &flips, ctx)?;
            teacher_grad_abs_sum += report.teacher_grad_abs_sum;
            epoch_sum.sup += report.loss.sup;
            epoch_sum.con_loc += report.loss.con_loc;
            epoch_sum.con_cls += report.loss.con_cls;
            step_losses.push(report.loss);
        }
        state.epoch += 1;
        let k = steps_per_epoch as f64;
        let epoch_mean = total_loss(epoch_sum.sup / k, epoch_sum.con_loc / k, epoch_sum.con_cls / k, cw);

        let due = state.epoch % cfg.eval_every == 0 || state.epoch == cfg.epochs;
        if due && !val_set.is_empty() {
            let report = evaluate(&state.st.student, val_set, &eval_cfg)?;
            let line = MetricsLine::from_report(&report, state.epoch, "val", lr, cfg.mode, cfg.seed, "student", epoch_mean);
            append_metrics(&metrics_path, &line)?;
            metrics.push(line);
            let score = report.map50 as f32 as f64;
            if state.best.map_or(true, |(b, _)| score > b) {
                state.best = Some((score, state.epoch));
                state.save(&out.join(BEST_CKPT))?;
            }
        }
        state.save(&last_path)?;
        info!(
            "epoch {}/{} mode {} loss {:.4} (sup {:.4}, con {:.4})",
            state.epoch, cfg.epochs, cfg.mode, epoch_mean.total, epoch_mean.sup, epoch_mean.con
        );
        if cfg.halt_after_epochs > 0 && state.epoch >= cfg.halt_after_epochs && state.epoch < cfg.epochs {
            halted = true;
            break;
        }
    }
    if val_set.is_empty() {
        warn!("no validation samples; best.ckpt is the final state");
        state.save(&out.join(BEST_CKPT))?;
    }
    Ok(TrainOutcome {
        state,
        step_losses,
        metrics,
        teacher_grad_abs_sum,
        halted,
    })
}

/// Loads `data_dir/train` and `data_dir/val` and trains.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = load_dataset(&cfg.data_dir.join("train"))?;
    let val_dir = cfg.data_dir.join("val");
    let val_set = if val_dir.exists() { load_dataset(&val_dir)? } else { Vec::new() };
    train_on(cfg, &train_set, &val_set)
}

impl TrainConfig {
    /// Rebuilds a config from a `key = value` snapshot.
    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }
}

fn append_metrics(path: &Path, line: &MetricsLine) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{}", serde_json::to_string(line).expect("serializable")).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rgb8_to_tensor, render, DomainConfig};

    fn tiny_set(n: usize, size: usize, seed: u64) -> Vec<LabeledSample> {
        let dom = DomainConfig {
            polyp_radius: (3.0, 5.0),
            ..DomainConfig::domain_a(size)
        };
        (0..n)
            .map(|i| {
                let (rgb, boxes) = render(&dom, mix_seed(seed, &[i as u64]));
                LabeledSample {
                    id: format!("{i:05}"),
                    image: rgb8_to_tensor(&rgb, size, size),
                    boxes,
                }
            })
            .collect()
    }

    fn tiny_cfg(dir: &Path, mode: Mode) -> TrainConfig {
        TrainConfig {
            out_dir: dir.to_path_buf(),
            mode,
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 2,
            max_lr: 1e-3,
            image_size: 16,
            eval_every: 1,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_points() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            max_lr: 1e-3,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg, 5), 0.0);
        assert_eq!(lr_at(10, &cfg, 5), 1e-3);
        assert!((lr_at(5, &cfg, 5) - 0.5e-3).abs() < 1e-18);
        assert!((lr_at(30, &cfg, 5) - 0.5e-3).abs() < 1e-15);
        assert!(lr_at(49, &cfg, 5) < 1e-5);
        let mut prev = f64::INFINITY;
        for s in 10..50 {
            let lr = lr_at(s, &cfg, 5);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn scalar_state(wd: f64) -> OptimizerState {
        OptimizerState {
            m: vec![Tensor::scalar(0.0)],
            v: vec![Tensor::scalar(0.0)],
            weight_decay: wd,
            t: 0,
        }
    }

    #[test]
    fn adamw_scalar_trace() {
        // f(x) = x^2 at x = 1: g = 2, m = 0.2, v = 0.004, m_hat = 2, v_hat = 4.
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = scalar_state(0.0);
        optimizer_step(&mut p, &[Tensor::scalar(2.0)], &mut s, 0.1).unwrap();
        let expected = 1.0 - 0.1 * (2.0 / (2.0 + ADAM_EPS));
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert!(p[0].item() < 1.0);

        let mut p = vec![Tensor::scalar(3.0)];
        let mut s = scalar_state(0.0);
        optimizer_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1).unwrap();
        assert_eq!(p[0].item(), 3.0);

        let mut p = vec![Tensor::scalar(3.0)];
        let mut s = scalar_state(0.5);
        optimizer_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1).unwrap();
        assert!((p[0].item() - 3.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = TrainConfig {
            max_lr: 3.3e-4,
            mode: Mode::Consis,
            seed: 77,
            ..TrainConfig::default()
        };
        cfg.apply("# comment\nbatch_size = 4  # trailing\n\ntau = 0.25\n").unwrap();
        assert_eq!((cfg.batch_size, cfg.tau), (4, 0.25));
        let back = TrainConfig::from_snapshot(&cfg.to_kv_text()).unwrap();
        assert_eq!(back.to_kv_text(), cfg.to_kv_text());
        assert!(cfg.clone().apply("bogus = 1").is_err());
        assert!(cfg.clone().apply("epochs = many").is_err());
        assert!(cfg.clone().apply("no equals sign").is_err());
    }

    #[test]
    fn vanilla_has_zero_consistency_and_teacher_gets_no_gradient() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_set(4, 16, 1);
        for mode in Mode::ALL {
            let cfg = tiny_cfg(dir.path(), mode);
            let mut st = init_params(1, 1, 16).unwrap();
            let mut opt = OptimizerState::new(&st.student, cfg.weight_decay);
            let flips = FlipTables::new(&st.student.arch);
            let batch: Vec<_> = data.iter().enumerate().collect();
            let ctx = StepContext {
                epoch: 0,
                batch: 0,
                lr: 1e-3,
                consistency_weight: 1.0,
            };
            let r = train_step(&batch, &mut st, &mut opt, &cfg, &flips, ctx).unwrap();
            assert_eq!(r.teacher_grad_abs_sum, 0.0);
            if mode.uses_consistency() {
                assert!(r.loss.con > 0.0);
            } else {
                assert_eq!(r.loss.con, 0.0);
            }
            assert_eq!(r.loss.total, r.loss.sup + r.loss.con);
        }
    }

    #[test]
    fn zero_weight_consis_flipaug_matches_flipaug() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_set(4, 16, 2);
        let run = |mode: Mode, w: f64| {
            let cfg = TrainConfig {
                consistency_weight: w,
                ..tiny_cfg(dir.path(), mode)
            };
            train_on(&cfg, &data, &[]).unwrap()
        };
        let a = run(Mode::Flipaug, 0.0);
        let b = run(Mode::ConsisFlipaug, 0.0);
        let sups = |o: &TrainOutcome| o.step_losses.iter().map(|l| l.sup).collect::<Vec<_>>();
        assert_eq!(sups(&a), sups(&b));
        assert_eq!(a.state.st.student, b.state.st.student);
        assert!(b.step_losses.iter().all(|l| l.total == l.sup));
    }

    #[test]
    fn teacher_follows_closed_form_ema() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_set(2, 16, 3);
        let cfg = TrainConfig {
            tau: 0.25,
            ..tiny_cfg(dir.path(), Mode::Consis)
        };
        let mut st = init_params(1, 1, 16).unwrap();
        st.tau = cfg.tau;
        let mut opt = OptimizerState::new(&st.student, cfg.weight_decay);
        let flips = FlipTables::new(&st.student.arch);
        let probe = |p: &DetectorParams| p.tensors[0].data()[0];
        let mut expected = probe(&st.teacher);
        for step in 0..3 {
            let batch: Vec<_> = data.iter().enumerate().collect();
            let ctx = StepContext {
                epoch: step,
                batch: 0,
                lr: 1e-2,
                consistency_weight: 1.0,
            };
            train_step(&batch, &mut st, &mut opt, &cfg, &flips, ctx).unwrap();
            expected = (0.25 * probe(&st.student) + 0.75 * expected) as f32 as f64;
            assert_eq!(probe(&st.teacher), expected);
        }
    }

    #[test]
    fn nan_pixel_aborts_with_batch_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = tiny_set(4, 16, 4);
        data[2].image.data_mut()[7] = f64::NAN;
        let err = train_on(&tiny_cfg(dir.path(), Mode::Vanilla), &data, &[]).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { epoch, ids, .. } => {
                assert_eq!(epoch, 0);
                assert!(ids.contains("00002"), "{ids}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn metrics_lines_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_set(4, 16, 5);
        let val = tiny_set(2, 16, 6);
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            ..tiny_cfg(dir.path(), Mode::Consis)
        };
        let out = train_on(&cfg, &data, &val).unwrap();
        assert_eq!(out.step_losses.len(), 2);
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in [
            "epoch", "split", "precision", "recall", "map50", "f1", "f2", "loss_sup", "loss_con_loc", "loss_con_cls",
            "lr", "mode", "seed",
        ] {
            assert!(line.get(key).is_some(), "{key}");
        }
        let loaded = TrainState::load(&dir.path().join(LAST_CKPT), Some(&out.state.st.student.arch)).unwrap();
        assert_eq!(loaded, out.state);
        assert!(dir.path().join(BEST_CKPT).exists());
        let bytes = fs::read(dir.path().join(LAST_CKPT)).unwrap();
        assert_eq!(loaded.to_raw().to_bytes(), bytes);
        let other = Arch::new(2, 16).unwrap();
        assert!(matches!(
            TrainState::load(&dir.path().join(LAST_CKPT), Some(&other)),
            Err(TrainError::Checkpoint(CheckpointError::ArchMismatch { .. }))
        ));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = tiny_set(5, 16, 7);
        let val = tiny_set(2, 16, 8);
        let full_dir = tempfile::tempdir().unwrap();
        let full = train_on(&tiny_cfg(full_dir.path(), Mode::ConsisFlipaug), &data, &val).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let first = train_on(
            &TrainConfig {
                halt_after_epochs: 1,
                ..tiny_cfg(dir.path(), Mode::ConsisFlipaug)
            },
            &data,
            &val,
        )
        .unwrap();
        assert!(first.halted);
        let second = train_on(
            &TrainConfig {
                resume: true,
                ..tiny_cfg(dir.path(), Mode::ConsisFlipaug)
            },
            &data,
            &val,
        )
        .unwrap();
        let joined: Vec<_> = first.step_losses.iter().chain(&second.step_losses).copied().collect();
        assert_eq!(joined, full.step_losses);
        assert_eq!(second.state.st, full.state.st);
        assert_eq!(second.state.opt, full.state.opt);
        for f in [METRICS_FILE, LAST_CKPT, BEST_CKPT] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(full_dir.path().join(f)).unwrap(), "{f}");
        }
    }
}
