//! Dual-network cross pseudo supervision training and its single-network
//! supervised baseline.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_volume, DatasetManifest, Volume};
use crate::error::{Error, Result};
use crate::kv::{parse_value, KvDoc};
use crate::losses::{ds_dice_ce_grad, make_pseudo_label, total_loss, LambdaSchedule, LossReport};
use crate::network::{backward, default_ds_outputs, forward_train, init_params, Architecture, NetParams, Tensor};
use crate::planner::Plan;
use crate::preprocess::{augment, normalize, resample_to, resampled_dims, sample_patch, AugmentConfig, Interpolation, Patch};

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CONFIG_ECHO: &str = "config_echo.txt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,step,l_sup,l_cps_l,l_cps_u,lambda,total,lr";

const CHECKPOINT_MAGIC: &[u8; 8] = b"CPS3DCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Cps,
    Baseline,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Cps => "cps",
            TrainMode::Baseline => "baseline",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cps" => Ok(TrainMode::Cps),
            "baseline" => Ok(TrainMode::Baseline),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    /// Minimum absolute decrease that counts as an improvement.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 25,
            threshold: 1e-3,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlateauState {
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauState {
    /// Feed one epoch's monitored loss; returns the learning rate to use next.
    pub fn update(&mut self, metric: f64, lr: f64, cfg: &PlateauConfig) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => metric < best - cfg.threshold,
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= cfg.patience {
            self.bad_epochs = 0;
            return (lr * cfg.factor).max(cfg.min_lr);
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub lambda: LambdaSchedule,
    pub plateau: PlateauConfig,
    pub augment: AugmentConfig,
    /// Deep-supervision heads; `None` keeps the architecture default.
    pub ds_outputs: Option<usize>,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 40,
            iterations_per_epoch: 25,
            batch_labeled: 2,
            batch_unlabeled: 2,
            lr0: 0.01,
            weight_decay: 3e-5,
            momentum: 0.99,
            seed: 0,
            lambda: LambdaSchedule::for_epochs(40),
            plateau: PlateauConfig::default(),
            augment: AugmentConfig::default(),
            ds_outputs: None,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Defaults with batch sizes taken from the plan.
    pub fn for_plan(plan: &Plan) -> Self {
        Self {
            batch_labeled: plan.batch_labeled,
            batch_unlabeled: plan.batch_unlabeled,
            ..Self::default()
        }
    }

    /// Change the epoch count, moving the lambda ramp end to half of it.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.total_epochs = epochs;
        self.lambda.ramp_end_epoch = (epochs / 2).max(1);
        self
    }

    pub fn validate(&self, plan: &Plan) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_epochs == 0 || self.iterations_per_epoch == 0 || self.batch_labeled == 0 {
            return bad("epochs, iterations and labeled batch size must be positive".into());
        }
        if self.batch_labeled != plan.batch_labeled || self.batch_unlabeled != plan.batch_unlabeled {
            return bad(format!(
                "batch sizes {}+{} do not match the plan's {}+{}",
                self.batch_labeled, self.batch_unlabeled, plan.batch_labeled, plan.batch_unlabeled
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay >= 0".into());
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || p.patience == 0 || !(p.min_lr > 0.0) || !(p.threshold >= 0.0) {
            return bad(format!("invalid plateau settings {p:?}"));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        self.lambda.validate()
    }

    /// Append the `train.*`, `lambda.*` and `augment.*` keys.
    pub fn push_kv(&self, doc: &mut KvDoc) {
        doc.push("train.epochs", self.total_epochs);
        doc.push("train.iterations", self.iterations_per_epoch);
        doc.push("train.batch_labeled", self.batch_labeled);
        doc.push("train.batch_unlabeled", self.batch_unlabeled);
        doc.push("train.lr", self.lr0);
        doc.push("train.weight_decay", self.weight_decay);
        doc.push("train.momentum", self.momentum);
        doc.push("train.seed", self.seed);
        doc.push("train.plateau_factor", self.plateau.factor);
        doc.push("train.plateau_patience", self.plateau.patience);
        doc.push("train.plateau_threshold", self.plateau.threshold);
        doc.push("train.min_lr", self.plateau.min_lr);
        doc.push(
            "train.ds_outputs",
            self.ds_outputs.map_or_else(|| "auto".to_string(), |d| d.to_string()),
        );
        doc.push("train.workers", self.workers);
        doc.push("lambda.max", self.lambda.lambda_max);
        doc.push("lambda.ramp_end_epoch", self.lambda.ramp_end_epoch);
        let a = &self.augment;
        doc.push("augment.mirror_prob", a.mirror_prob);
        doc.push("augment.scale_prob", a.scale_prob);
        doc.push("augment.noise_prob", a.noise_prob);
        doc.push("augment.scale_min", a.scale_range.0);
        doc.push("augment.scale_max", a.scale_range.1);
        doc.push("augment.noise_sigma_max", a.noise_sigma_max);
        doc.push("augment.oversample_foreground", a.oversample_foreground);
    }

    /// Apply one key; `Ok(false)` when the key belongs to another section.
    pub fn apply_kv(&mut self, key: &str, raw: &str) -> Result<bool> {
        let v = raw;
        match key {
            "train.epochs" => self.total_epochs = parse_value(key, v)?,
            "train.iterations" => self.iterations_per_epoch = parse_value(key, v)?,
            "train.batch_labeled" => self.batch_labeled = parse_value(key, v)?,
            "train.batch_unlabeled" => self.batch_unlabeled = parse_value(key, v)?,
            "train.lr" => self.lr0 = parse_value(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_value(key, v)?,
            "train.momentum" => self.momentum = parse_value(key, v)?,
            "train.seed" => self.seed = parse_value(key, v)?,
            "train.plateau_factor" => self.plateau.factor = parse_value(key, v)?,
            "train.plateau_patience" => self.plateau.patience = parse_value(key, v)?,
            "train.plateau_threshold" => self.plateau.threshold = parse_value(key, v)?,
            "train.min_lr" => self.plateau.min_lr = parse_value(key, v)?,
            "train.ds_outputs" => {
                self.ds_outputs = match v.trim() {
                    "auto" => None,
                    other => Some(parse_value(key, other)?),
                }
            }
            "train.workers" => self.workers = parse_value(key, v)?,
            "lambda.max" => self.lambda.lambda_max = parse_value(key, v)?,
            "lambda.ramp_end_epoch" => self.lambda.ramp_end_epoch = parse_value(key, v)?,
            "augment.mirror_prob" => self.augment.mirror_prob = parse_value(key, v)?,
            "augment.scale_prob" => self.augment.scale_prob = parse_value(key, v)?,
            "augment.noise_prob" => self.augment.noise_prob = parse_value(key, v)?,
            "augment.scale_min" => self.augment.scale_range.0 = parse_value(key, v)?,
            "augment.scale_max" => self.augment.scale_range.1 = parse_value(key, v)?,
            "augment.noise_sigma_max" => self.augment.noise_sigma_max = parse_value(key, v)?,
            "augment.oversample_foreground" => self.augment.oversample_foreground = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        self.push_kv(&mut doc);
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in doc.entries() {
            if !cfg.apply_kv(k, v)? {
                return Err(Error::Config(format!("unknown key {k}")));
            }
        }
        Ok(cfg)
    }

    pub fn architecture(&self, plan: &Plan) -> Architecture {
        let mut arch = Architecture::from_plan(plan);
        arch.ds_outputs = self.ds_outputs.unwrap_or_else(|| default_ds_outputs(arch.levels()));
        arch
    }
}

/// Independent seed for component `stream` of a run.
pub fn derived_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_THETA1: u64 = 1;
const STREAM_THETA2: u64 = 2;
const STREAM_LABELED: u64 = 3;
const STREAM_UNLABELED: u64 = 4;

fn sampler(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .clone()
            .try_into()
            .map_err(|_| Error::MalformedCheckpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::MalformedCheckpoint("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct DualNetState {
    pub mode: TrainMode,
    pub params1: NetParams,
    /// Absent in baseline mode.
    pub params2: Option<NetParams>,
    pub opt1: NetParams,
    pub opt2: Option<NetParams>,
    /// Zero-based index of the epoch in progress.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub lr: f64,
    pub plateau: PlateauState,
    pub best_total: Option<f64>,
    pub labeled_rng: ChaCha8Rng,
    pub unlabeled_rng: ChaCha8Rng,
}

impl DualNetState {
    /// θ1 from seed stream 1 and θ2 from stream 2; the baseline's single
    /// network is initialized exactly like θ1.
    pub fn new(arch: &Architecture, config: &TrainConfig, mode: TrainMode) -> Self {
        let params1 = init_params(arch, derived_seed(config.seed, STREAM_THETA1));
        let opt1 = params1.zeros_like();
        let (params2, opt2) = match mode {
            TrainMode::Cps => {
                let p = init_params(arch, derived_seed(config.seed, STREAM_THETA2));
                let o = p.zeros_like();
                (Some(p), Some(o))
            }
            TrainMode::Baseline => (None, None),
        };
        Self {
            mode,
            params1,
            params2,
            opt1,
            opt2,
            epoch: 0,
            step: 0,
            lr: config.lr0,
            plateau: PlateauState::default(),
            best_total: None,
            labeled_rng: sampler(config.seed, STREAM_LABELED),
            unlabeled_rng: sampler(config.seed, STREAM_UNLABELED),
        }
    }

    /// Parameters used for inference (θ1 in both modes).
    pub fn inference_params(&self) -> &NetParams {
        &self.params1
    }
}

/// SGD with Nesterov momentum and L2 weight decay folded into the gradient:
/// `g += wd * p; buf = mu * buf + g; p -= lr * (g + mu * buf)`.
pub fn sgd_nesterov(params: &mut NetParams, buf: &mut NetParams, grad: &NetParams, lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, b), g) in params.tensors.iter_mut().zip(buf.tensors.iter_mut()).zip(&grad.tensors) {
        for ((pv, bv), gv) in p.data.iter_mut().zip(b.data.iter_mut()).zip(&g.data) {
            let g = gv + weight_decay * *pv;
            *bv = momentum * *bv + g;
            *pv -= lr * (g + momentum * *bv);
        }
    }
}

fn combine_heads(sup: Option<Vec<Vec<f64>>>, cps: Option<Vec<Vec<f64>>>, lambda: f64, scale: f64) -> Vec<Vec<f64>> {
    match (sup, cps) {
        (Some(mut s), Some(c)) if lambda != 0.0 => {
            for (sh, ch) in s.iter_mut().zip(&c) {
                sh.iter_mut().zip(ch).for_each(|(a, b)| *a = (*a + lambda * b) * scale);
            }
            s
        }
        (Some(mut s), _) => {
            s.iter_mut().for_each(|h| h.iter_mut().for_each(|a| *a *= scale));
            s
        }
        (None, Some(mut c)) => {
            let f = lambda * scale;
            c.iter_mut().for_each(|h| h.iter_mut().for_each(|a| *a *= f));
            c
        }
        (None, None) => Vec::new(),
    }
}

/// One sample's contribution to the step.
struct SampleResult {
    sup: f64,
    cps: f64,
    grad1: Option<NetParams>,
    grad2: Option<NetParams>,
}

fn patch_tensor(p: &Patch) -> Tensor {
    Tensor::from_vec(1, p.dims, p.image.clone())
}

fn run_sample(
    state: &DualNetState,
    arch: &Architecture,
    patch: &Patch,
    labeled: bool,
    lambda: f64,
    scale: f64,
) -> Result<SampleResult> {
    let x = patch_tensor(patch);
    let (out1, cache1) = forward_train(&state.params1, arch, &x)?;
    let gt = if labeled {
        Some(patch.labels.as_deref().ok_or(Error::MissingGroundTruth)?)
    } else {
        None
    };
    let Some(p2) = state.params2.as_ref() else {
        let (sup, g) = ds_dice_ce_grad(&out1, gt.ok_or(Error::MissingGroundTruth)?)?;
        let heads = combine_heads(Some(g), None, 0.0, scale);
        let grad1 = backward(&state.params1, arch, &cache1, &heads)?;
        return Ok(SampleResult {
            sup,
            cps: 0.0,
            grad1: Some(grad1),
            grad2: None,
        });
    };
    let (out2, cache2) = forward_train(p2, arch, &x)?;
    let y1 = make_pseudo_label(&out1[0]);
    let y2 = make_pseudo_label(&out2[0]);
    let (c1, gc1) = ds_dice_ce_grad(&out1, &y2.labels)?;
    let (c2, gc2) = ds_dice_ce_grad(&out2, &y1.labels)?;
    let (sup, gs1, gs2) = match gt {
        Some(gt) => {
            let (s1, g1) = ds_dice_ce_grad(&out1, gt)?;
            let (s2, g2) = ds_dice_ce_grad(&out2, gt)?;
            (s1 + s2, Some(g1), Some(g2))
        }
        None => (0.0, None, None),
    };
    let needs_backward = labeled || lambda != 0.0;
    let (grad1, grad2) = if needs_backward {
        let h1 = combine_heads(gs1, Some(gc1), lambda, scale);
        let h2 = combine_heads(gs2, Some(gc2), lambda, scale);
        (
            Some(backward(&state.params1, arch, &cache1, &h1)?),
            Some(backward(p2, arch, &cache2, &h2)?),
        )
    } else {
        (None, None)
    };
    Ok(SampleResult {
        sup,
        cps: c1 + c2,
        grad1,
        grad2,
    })
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub report: LossReport,
    /// Network forward passes over the batch (one per network).
    pub forward_passes: usize,
}

/// One joint update of both networks (or of the single baseline network).
///
/// Labeled samples contribute the supervised term and the labeled CPS term,
/// unlabeled samples the unlabeled CPS term; each is averaged over its batch.
/// When lambda is zero no CPS gradient is formed, so θ1 follows exactly the
/// baseline trajectory.
pub fn train_step(
    state: &mut DualNetState,
    arch: &Architecture,
    config: &TrainConfig,
    labeled: &[Patch],
    unlabeled: &[Patch],
) -> Result<StepReport> {
    let (report, grad1, grad2) = step_gradients(state, arch, config, labeled, unlabeled)?;
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            message: format!("step {} produced {report:?}", state.step),
            last_checkpoint: String::new(),
        });
    }
    let lr = state.lr;
    sgd_nesterov(&mut state.params1, &mut state.opt1, &grad1, lr, config.momentum, config.weight_decay);
    if let (Some(p2), Some(o2), Some(g2)) = (state.params2.as_mut(), state.opt2.as_mut(), grad2.as_ref()) {
        sgd_nesterov(p2, o2, g2, lr, config.momentum, config.weight_decay);
    }
    state.step += 1;
    Ok(StepReport {
        report,
        forward_passes: if state.params2.is_some() { 2 } else { 1 },
    })
}

/// Loss terms and parameter gradients of one step, without updating
/// anything. The second gradient is `None` in baseline mode.
pub fn step_gradients(
    state: &DualNetState,
    arch: &Architecture,
    config: &TrainConfig,
    labeled: &[Patch],
    unlabeled: &[Patch],
) -> Result<(LossReport, NetParams, Option<NetParams>)> {
    if labeled.is_empty() {
        return Err(Error::MissingGroundTruth);
    }
    let lambda_sched = config.lambda;
    let lambda = match state.mode {
        TrainMode::Cps => lambda_sched.value(state.epoch),
        TrainMode::Baseline => 0.0,
    };
    let inv_l = 1.0 / labeled.len() as f64;
    let inv_u = if unlabeled.is_empty() {
        0.0
    } else {
        1.0 / unlabeled.len() as f64
    };
    let unlabeled = if state.mode == TrainMode::Cps { unlabeled } else { &[] };
    let jobs: Vec<(&Patch, bool)> = labeled
        .iter()
        .map(|p| (p, true))
        .chain(unlabeled.iter().map(|p| (p, false)))
        .collect();
    let snapshot = state;
    let run = |&(p, is_labeled): &(&Patch, bool)| {
        let scale = if is_labeled { inv_l } else { inv_u };
        run_sample(snapshot, arch, p, is_labeled, lambda, scale)
    };
    let results: Vec<Result<SampleResult>> = if config.workers > 1 {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };

    let mut grad1 = state.params1.zeros_like();
    let mut grad2 = state.params2.as_ref().map(NetParams::zeros_like);
    let (mut sup, mut cps_l, mut cps_u) = (0.0, 0.0, 0.0);
    for ((_, is_labeled), r) in jobs.iter().zip(results) {
        let r = r?;
        if *is_labeled {
            sup += r.sup;
            cps_l += r.cps;
        } else {
            cps_u += r.cps;
        }
        if let Some(g) = &r.grad1 {
            grad1.axpy(1.0, g);
        }
        if let (Some(acc), Some(g)) = (grad2.as_mut(), &r.grad2) {
            acc.axpy(1.0, g);
        }
    }
    let report = total_loss(
        sup * inv_l,
        cps_l * inv_l,
        cps_u * inv_u,
        state.epoch,
        &match state.mode {
            TrainMode::Cps => lambda_sched,
            TrainMode::Baseline => LambdaSchedule {
                lambda_max: 0.0,
                ramp_end_epoch: 1,
            },
        },
    );
    Ok((report, grad1, grad2))
}

/// Resampled and normalized cases held in memory.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub labeled: Vec<(Volume, Volume)>,
    pub unlabeled: Vec<Volume>,
}

/// Bring one case onto the plan's grid and intensity scale.
pub fn prepare_case(image: &Volume, labels: Option<&Volume>, plan: &Plan) -> Result<(Volume, Option<Volume>)> {
    let dims = resampled_dims(image.dims(), image.spacing(), plan.target_spacing);
    let img = resample_to(image, dims, plan.target_spacing, Interpolation::Linear)?;
    let img = normalize(&img, &plan.fingerprint)?;
    let lab = match labels {
        Some(l) => {
            if l.dims() != image.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "image {:?} vs labels {:?}",
                    image.dims(),
                    l.dims()
                )));
            }
            Some(resample_to(l, dims, plan.target_spacing, Interpolation::Nearest)?)
        }
        None => None,
    };
    Ok((img, lab))
}

impl TrainingData {
    pub fn from_cases(labeled: &[(Volume, Volume)], unlabeled: &[Volume], plan: &Plan) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::EmptyLabeledSet(PathBuf::from("<memory>")));
        }
        let mut out = Self {
            labeled: Vec::with_capacity(labeled.len()),
            unlabeled: Vec::with_capacity(unlabeled.len()),
        };
        for (img, lab) in labeled {
            let (i, l) = prepare_case(img, Some(lab), plan)?;
            out.labeled.push((i, l.expect("labels were given")));
        }
        for img in unlabeled {
            out.unlabeled.push(prepare_case(img, None, plan)?.0);
        }
        Ok(out)
    }

    pub fn load(manifest: &DatasetManifest, plan: &Plan) -> Result<Self> {
        if manifest.labeled.is_empty() {
            return Err(Error::EmptyLabeledSet(PathBuf::from("<manifest>")));
        }
        let mut labeled = Vec::with_capacity(manifest.labeled.len());
        for case in &manifest.labeled {
            labeled.push((read_volume(&case.image)?, read_volume(&case.labels)?));
        }
        let unlabeled = manifest
            .unlabeled
            .iter()
            .map(read_volume)
            .collect::<Result<Vec<_>>>()?;
        Self::from_cases(&labeled, &unlabeled, plan)
    }
}

/// Draw `count` augmented labeled patches.
pub fn sample_labeled(data: &TrainingData, rng: &mut ChaCha8Rng, count: usize, plan: &Plan, aug: &AugmentConfig) -> Result<Vec<Patch>> {
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..data.labeled.len());
            let (img, lab) = &data.labeled[i];
            let p = sample_patch(img, Some(lab), plan.patch_size, rng, aug.oversample_foreground, i)?;
            Ok(augment(p, rng, aug))
        })
        .collect()
}

/// Draw `count` augmented unlabeled patches; empty when there is no
/// unlabeled data.
pub fn sample_unlabeled(data: &TrainingData, rng: &mut ChaCha8Rng, count: usize, plan: &Plan, aug: &AugmentConfig) -> Result<Vec<Patch>> {
    if data.unlabeled.is_empty() {
        return Ok(Vec::new());
    }
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..data.unlabeled.len());
            let p = sample_patch(&data.unlabeled[i], None, plan.patch_size, rng, 0.0, i)?;
            Ok(augment(p, rng, aug))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, r.l_sup, r.l_cps_labeled, r.l_cps_unlabeled, r.lambda, r.total, self.lr
        )
    }
}

/// Metadata block of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Architecture,
    pub arch_fingerprint: String,
    pub mode: TrainMode,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub plateau_best: Option<f64>,
    pub plateau_bad_epochs: usize,
    pub best_total: Option<f64>,
    pub labeled_rng: RngState,
    pub unlabeled_rng: RngState,
    /// Plan in its key-value text form.
    pub plan: String,
    /// Training configuration in its key-value text form.
    pub config: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params1: NetParams,
    pub params2: Option<NetParams>,
    pub opt1: NetParams,
    pub opt2: Option<NetParams>,
}

impl Checkpoint {
    pub fn capture(state: &DualNetState, arch: &Architecture, plan: &Plan, config: &TrainConfig) -> Self {
        Self {
            meta: CheckpointMeta {
                arch: arch.clone(),
                arch_fingerprint: arch.fingerprint(),
                mode: state.mode,
                epoch: state.epoch,
                step: state.step,
                lr: state.lr,
                plateau_best: state.plateau.best,
                plateau_bad_epochs: state.plateau.bad_epochs,
                best_total: state.best_total,
                labeled_rng: RngState::capture(&state.labeled_rng),
                unlabeled_rng: RngState::capture(&state.unlabeled_rng),
                plan: plan.to_kv().to_text(),
                config: config.to_kv().to_text(),
            },
            params1: state.params1.clone(),
            params2: state.params2.clone(),
            opt1: state.opt1.clone(),
            opt2: state.opt2.clone(),
        }
    }

    pub fn plan(&self) -> Result<Plan> {
        Plan::from_kv(&KvDoc::parse(&self.meta.plan)?)
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_kv(&KvDoc::parse(&self.meta.config)?)
    }

    /// Rebuild the training state, refusing a different architecture or mode.
    pub fn into_state(self, arch: &Architecture, mode: TrainMode) -> Result<DualNetState> {
        if self.meta.arch != *arch || self.meta.arch_fingerprint != arch.fingerprint() {
            return Err(Error::ResumeMismatch(format!(
                "checkpoint architecture {} differs from {}",
                self.meta.arch_fingerprint,
                arch.fingerprint()
            )));
        }
        if self.meta.mode != mode {
            return Err(Error::ResumeMismatch(format!(
                "checkpoint was trained in {} mode, requested {mode}",
                self.meta.mode
            )));
        }
        Ok(DualNetState {
            mode,
            params1: self.params1,
            params2: self.params2,
            opt1: self.opt1,
            opt2: self.opt2,
            epoch: self.meta.epoch,
            step: self.meta.step,
            lr: self.meta.lr,
            plateau: PlateauState {
                best: self.meta.plateau_best,
                bad_epochs: self.meta.plateau_bad_epochs,
            },
            best_total: self.meta.best_total,
            labeled_rng: self.meta.labeled_rng.restore()?,
            unlabeled_rng: self.meta.unlabeled_rng.restore()?,
        })
    }

    fn parameter_sets(&self) -> Vec<&NetParams> {
        let mut sets = vec![&self.params1, &self.opt1];
        if let (Some(p), Some(o)) = (&self.params2, &self.opt2) {
            sets.push(p);
            sets.push(o);
        }
        sets
    }

    /// Layout: magic, version (u32), metadata length (u64), JSON metadata,
    /// then θ1, its momentum, θ2 and its momentum as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        let mut bytes = Vec::with_capacity(20 + meta.len() + 8 * 4 * self.params1.num_scalars());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&meta);
        for set in self.parameter_sets() {
            for t in &set.tensors {
                for v in &t.data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::MalformedCheckpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta_end = 20usize.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..meta_end]).map_err(|e| bad(&e.to_string()))?;
        meta.arch.validate().map_err(|e| bad(&e.to_string()))?;
        let template = NetParams::zeros(&meta.arch);
        let sets = if meta.mode == TrainMode::Cps { 4 } else { 2 };
        let scalars = template.num_scalars();
        if bytes.len() != meta_end + sets * scalars * 8 {
            return Err(bad("parameter payload size does not match the architecture"));
        }
        let mut cursor = meta_end;
        let mut read_set = || {
            let mut p = template.clone();
            for t in &mut p.tensors {
                for v in &mut t.data {
                    *v = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
                    cursor += 8;
                }
            }
            p
        };
        let params1 = read_set();
        let opt1 = read_set();
        let (params2, opt2) = if sets == 4 {
            let p = read_set();
            let o = read_set();
            (Some(p), Some(o))
        } else {
            (None, None)
        };
        Ok(Self {
            meta,
            params1,
            params2,
            opt1,
            opt2,
        })
    }
}

/// Drives epochs of [`train_step`], logging and checkpointing.
pub struct Trainer<'a> {
    data: &'a TrainingData,
    plan: Plan,
    arch: Architecture,
    config: TrainConfig,
    pub state: DualNetState,
    out_dir: Option<PathBuf>,
    log: Vec<LogRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainingData, plan: &Plan, config: &TrainConfig, mode: TrainMode) -> Result<Self> {
        config.validate(plan)?;
        let arch = config.architecture(plan);
        arch.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::EmptyLabeledSet(PathBuf::from("<training data>")));
        }
        let state = DualNetState::new(&arch, config, mode);
        Ok(Self {
            data,
            plan: plan.clone(),
            arch,
            config: config.clone(),
            state,
            out_dir: None,
            log: Vec::new(),
        })
    }

    /// Write checkpoints, the log and the config echo into `dir`. With
    /// `resume`, continue from `dir/latest.ckpt` when it exists.
    pub fn with_output(mut self, dir: &Path, resume: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let latest = dir.join(LATEST_CHECKPOINT);
        let log_path = dir.join(TRAIN_LOG);
        if resume && latest.is_file() {
            let ckpt = Checkpoint::load(&latest)?;
            self.state = ckpt.into_state(&self.arch, self.state.mode)?;
            info!("resuming from {} at epoch {}", latest.display(), self.state.epoch);
            let kept = truncate_log(&log_path, self.state.epoch)?;
            fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
        } else {
            fs::write(&log_path, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
        }
        let mut echo = KvDoc::new();
        echo.push("mode", self.state.mode);
        self.config.push_kv(&mut echo);
        echo.write(dir.join(CONFIG_ECHO))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    /// Sample a batch and take one optimizer step.
    pub fn step(&mut self) -> Result<LogRow> {
        let aug = self.config.augment;
        let labeled = sample_labeled(self.data, &mut self.state.labeled_rng, self.config.batch_labeled, &self.plan, &aug)?;
        let unlabeled = match self.state.mode {
            TrainMode::Cps => sample_unlabeled(
                self.data,
                &mut self.state.unlabeled_rng,
                self.config.batch_unlabeled,
                &self.plan,
                &aug,
            )?,
            TrainMode::Baseline => Vec::new(),
        };
        let lr = self.state.lr;
        let out = train_step(&mut self.state, &self.arch, &self.config, &labeled, &unlabeled).map_err(|e| match e {
            Error::NonFiniteLoss { message, .. } => Error::NonFiniteLoss {
                message,
                last_checkpoint: self.last_checkpoint(),
            },
            other => other,
        })?;
        let row = LogRow {
            epoch: self.state.epoch,
            step: self.state.step,
            report: out.report,
            lr,
        };
        self.log.push(row);
        Ok(row)
    }

    fn last_checkpoint(&self) -> String {
        match &self.out_dir {
            Some(d) if d.join(LATEST_CHECKPOINT).is_file() => d.join(LATEST_CHECKPOINT).display().to_string(),
            _ => "none".to_string(),
        }
    }

    /// Run one full epoch; returns its mean total loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let start = self.log.len();
        for _ in 0..self.config.iterations_per_epoch {
            self.step()?;
        }
        let rows = &self.log[start..];
        let mean = rows.iter().map(|r| r.report.total).sum::<f64>() / rows.len() as f64;
        self.state.lr = self.state.plateau.update(mean, self.state.lr, &self.config.plateau);
        let improved = self.state.best_total.is_none_or(|b| mean < b);
        if improved {
            self.state.best_total = Some(mean);
        }
        debug!(
            "epoch {} mean total {mean:.6} lr {} lambda {}",
            self.state.epoch,
            self.state.lr,
            rows.last().map_or(0.0, |r| r.report.lambda)
        );
        self.state.epoch += 1;
        if let Some(dir) = self.out_dir.clone() {
            let log_path = dir.join(TRAIN_LOG);
            let mut text = String::new();
            for r in rows {
                text.push_str(&r.to_csv());
                text.push('\n');
            }
            fs::OpenOptions::new()
                .append(true)
                .open(&log_path)
                .and_then(|mut f| f.write_all(text.as_bytes()))
                .map_err(|e| Error::io(&log_path, e))?;
            let ckpt = Checkpoint::capture(&self.state, &self.arch, &self.plan, &self.config);
            ckpt.save(&dir.join(LATEST_CHECKPOINT))?;
            if improved {
                ckpt.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        Ok(mean)
    }

    /// Train until `total_epochs` have run; returns the latest checkpoint
    /// path when writing to disk.
    pub fn run(&mut self) -> Result<Option<PathBuf>> {
        while self.state.epoch < self.config.total_epochs {
            let mean = self.run_epoch()?;
            info!(
                "{} epoch {}/{}: mean loss {mean:.5}",
                self.state.mode, self.state.epoch, self.config.total_epochs
            );
        }
        Ok(self.out_dir.as_ref().map(|d| d.join(LATEST_CHECKPOINT)))
    }
}

/// Keep the header and the rows of epochs before `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(_) => return Ok(format!("{LOG_HEADER}\n")),
    };
    let mut out = format!("{LOG_HEADER}\n");
    for line in text.lines().skip(1) {
        let e: Option<usize> = line.split(',').next().and_then(|v| v.parse().ok());
        if e.is_some_and(|e| e < epoch) {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn train_mode(manifest: &DatasetManifest, plan: &Plan, config: &TrainConfig, out_dir: &Path, mode: TrainMode, resume: bool) -> Result<PathBuf> {
    if manifest.num_classes != plan.num_classes {
        return Err(Error::Config(format!(
            "manifest has {} classes, plan {}",
            manifest.num_classes, plan.num_classes
        )));
    }
    let data = TrainingData::load(manifest, plan)?;
    let mut trainer = Trainer::new(&data, plan, config, mode)?.with_output(out_dir, resume)?;
    Ok(trainer.run()?.expect("output directory set"))
}

/// Cross pseudo supervision training; returns the latest checkpoint path.
pub fn run_training(manifest: &DatasetManifest, plan: &Plan, config: &TrainConfig, out_dir: &Path, resume: bool) -> Result<PathBuf> {
    train_mode(manifest, plan, config, out_dir, TrainMode::Cps, resume)
}

/// Single-network supervised training with identical settings.
pub fn supervised_baseline(manifest: &DatasetManifest, plan: &Plan, config: &TrainConfig, out_dir: &Path, resume: bool) -> Result<PathBuf> {
    train_mode(manifest, plan, config, out_dir, TrainMode::Baseline, resume)
}
