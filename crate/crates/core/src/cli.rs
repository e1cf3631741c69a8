//! Command-line front end: `synth`, `fingerprint`, `plan`, `train`, `infer`,
//! `evaluate`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::ExperimentConfig;
use crate::data::{load_manifest, read_volume, write_volume, VolumeKind};
use crate::error::{Error, Result};
use crate::fingerprint::{compute_fingerprint_with, Fingerprint, FingerprintOptions};
use crate::inference::{predict_case, InferenceMode, InferenceOptions, NetPredictor, DEFAULT_STEP_FRACTION};
use crate::kv::KvDoc;
use crate::metrics::{evaluate, DEFAULT_TOLERANCE_MM};
use crate::planner::{make_plan, Dimensionality, Plan, PlanConstraints};
use crate::synthdata::generate_dataset;
use crate::trainer::{run_training, supervised_baseline, Checkpoint, CONFIG_ECHO};

/// Name of the echo file written next to file outputs: `<output>.echo.txt`.
pub const ECHO_SUFFIX: &str = "echo.txt";

#[derive(Debug, Parser)]
#[command(name = "cps3d", version, about = "Semi-supervised 3D segmentation with cross pseudo supervision")]
pub struct Cli {
    /// Flat `section.key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for training and inference.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantoms and a manifest.
    Synth(SynthArgs),
    /// Compute the dataset fingerprint of every image in a manifest.
    Fingerprint(FingerprintArgs),
    /// Derive a training plan from a fingerprint.
    Plan(PlanArgs),
    /// Train the dual network (or the supervised baseline).
    Train(TrainArgs),
    /// Segment a volume, or every image volume of a directory.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub labeled: usize,
    #[arg(long, default_value_t = 32)]
    pub unlabeled: usize,
    /// Cube edge length; overrides `phantom.dims`.
    #[arg(long)]
    pub dims: Option<usize>,
    /// Number of classes including background; overrides `phantom.num_organs`.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FingerprintArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Subsample at most this many voxels per case.
    #[arg(long)]
    pub max_voxels: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DimArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub fingerprint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = DimArg::ThreeD)]
    pub dim: DimArg,
    #[arg(long)]
    pub max_patch_voxels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Cps,
    Baseline,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Cps)]
    pub mode: ModeArg,
    #[arg(long)]
    pub seed: u64,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `train.iterations_per_epoch`.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/latest.ckpt` when it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InferModeArg {
    Normal,
    Fast,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image volume or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    /// Output volume, or output directory when `--input` is a directory.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = InferModeArg::Normal)]
    pub mode: InferModeArg,
    /// Apply the `spacing.*` rule instead of the plan's target spacing.
    #[arg(long)]
    pub force_spacing: bool,
    /// Keep only the largest connected component per class.
    #[arg(long)]
    pub postprocess_cc: bool,
    #[arg(long, default_value_t = DEFAULT_STEP_FRACTION)]
    pub step_fraction: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_MM)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// The configuration plus the keys the config file set explicitly.
fn load_config(cli: &Cli) -> Result<(ExperimentConfig, Vec<String>)> {
    let (mut cfg, keys) = match &cli.config {
        Some(path) => {
            let doc = KvDoc::read(path)?;
            let keys = doc.entries().iter().map(|(k, _)| k.clone()).collect();
            (ExperimentConfig::from_kv(&doc)?, keys)
        }
        None => (ExperimentConfig::default(), Vec::new()),
    };
    cfg.train.workers = cli.workers.max(1);
    Ok((cfg, keys))
}

fn echo_path_for_file(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(ECHO_SUFFIX);
    out.with_file_name(name)
}

fn write_echo(path: &Path, command: &str, args: &[(&str, String)], cfg: &ExperimentConfig) -> Result<()> {
    let mut doc = KvDoc::new();
    doc.push("command", command);
    for (k, v) in args {
        doc.push(format!("{command}.{k}"), v);
    }
    for (k, v) in cfg.to_kv().entries() {
        doc.push(k.as_str(), v);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    doc.write(path)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn synth(a: &SynthArgs, mut cfg: ExperimentConfig) -> Result<()> {
    if let Some(d) = a.dims {
        cfg.phantom.dims = [d; 3];
    }
    if let Some(c) = a.classes {
        if c < 2 {
            return Err(Error::Config(format!("--classes must be at least 2, got {c}")));
        }
        cfg.phantom.num_organs = c - 1;
        let defaults = crate::synthdata::PhantomConfig::default().organ_means;
        cfg.phantom.organ_means = (1..c).map(|k| defaults.get(k - 1).copied().unwrap_or(100.0 * k as f64)).collect();
    }
    cfg.validate()?;
    let manifest = generate_dataset(a.labeled, a.unlabeled, &cfg.phantom, a.seed, &a.out)?;
    write_echo(
        &a.out.join(CONFIG_ECHO),
        "synth",
        &[
            ("labeled", a.labeled.to_string()),
            ("unlabeled", a.unlabeled.to_string()),
            ("seed", a.seed.to_string()),
        ],
        &cfg,
    )?;
    info!("wrote {}", manifest.display());
    Ok(())
}

fn fingerprint(a: &FingerprintArgs, cfg: ExperimentConfig) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let mut paths: Vec<&PathBuf> = manifest.labeled.iter().map(|c| &c.image).collect();
    paths.extend(manifest.unlabeled.iter());
    let images = paths.iter().map(read_volume).collect::<Result<Vec<_>>>()?;
    let options = FingerprintOptions {
        max_voxels_per_case: a.max_voxels,
        seed: a.seed,
    };
    let fp = compute_fingerprint_with(&images, options)?;
    ensure_parent(&a.out)?;
    fp.write(&a.out)?;
    write_echo(
        &echo_path_for_file(&a.out),
        "fingerprint",
        &[
            ("manifest", a.manifest.display().to_string()),
            ("max_voxels", a.max_voxels.map_or("all".into(), |v| v.to_string())),
            ("seed", a.seed.to_string()),
        ],
        &cfg,
    )?;
    info!("fingerprint of {} cases written to {}", fp.num_cases, a.out.display());
    Ok(())
}

fn plan(a: &PlanArgs, cfg: ExperimentConfig) -> Result<()> {
    let fp = Fingerprint::read(&a.fingerprint)?;
    let mut constraints = PlanConstraints {
        num_classes: a.classes,
        ..PlanConstraints::default()
    };
    if let Some(v) = a.max_patch_voxels {
        constraints.max_patch_voxels = v;
    }
    if let Some(v) = a.base_channels {
        constraints.base_channels = v;
    }
    if let Some(v) = a.batch_size {
        constraints.batch_size = v;
    }
    let dim = match a.dim {
        DimArg::TwoD => Dimensionality::TwoD,
        DimArg::ThreeD => Dimensionality::ThreeD,
    };
    let plan = make_plan(&fp, dim, constraints)?;
    ensure_parent(&a.out)?;
    plan.write(&a.out)?;
    write_echo(
        &echo_path_for_file(&a.out),
        "plan",
        &[
            ("fingerprint", a.fingerprint.display().to_string()),
            ("classes", a.classes.to_string()),
            ("max_patch_voxels", constraints.max_patch_voxels.to_string()),
            ("base_channels", constraints.base_channels.to_string()),
            ("batch_size", constraints.batch_size.to_string()),
        ],
        &cfg,
    )?;
    info!("plan: patch {:?}, {} levels", plan.patch_size, plan.levels());
    Ok(())
}

fn train(a: &TrainArgs, mut cfg: ExperimentConfig, explicit: &[String]) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let plan = Plan::read(&a.plan)?;
    if !explicit.iter().any(|k| k == "train.batch_labeled") {
        cfg.train.batch_labeled = plan.batch_labeled;
    }
    if !explicit.iter().any(|k| k == "train.batch_unlabeled") {
        cfg.train.batch_unlabeled = plan.batch_unlabeled;
    }
    cfg.train.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.train.total_epochs = e;
    }
    if let Some(i) = a.iterations {
        cfg.train.iterations_per_epoch = i;
    }
    cfg.resolve();
    let ckpt = match a.mode {
        ModeArg::Cps => run_training(&manifest, &plan, &cfg.train, &a.out, a.resume)?,
        ModeArg::Baseline => supervised_baseline(&manifest, &plan, &cfg.train, &a.out, a.resume)?,
    };
    info!("training finished; latest checkpoint {}", ckpt.display());
    Ok(())
}

fn infer(a: &InferArgs, cfg: ExperimentConfig) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let plan = ckpt.plan()?;
    let net = NetPredictor {
        params: &ckpt.params1,
        arch: &ckpt.meta.arch,
    };
    let options = InferenceOptions {
        mode: match a.mode {
            InferModeArg::Normal => InferenceMode::normal(),
            InferModeArg::Fast => InferenceMode::fast(),
        },
        force_spacing: a.force_spacing.then_some(cfg.spacing),
        postprocess_cc: a.postprocess_cc,
        step_fraction: a.step_fraction,
        workers: cfg.train.workers,
    };
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        let mut entries = Vec::new();
        let rd = fs::read_dir(&a.input).map_err(|e| Error::io(&a.input, e))?;
        for entry in rd {
            let path = entry.map_err(|e| Error::io(&a.input, e))?.path();
            if path.extension().is_some_and(|x| x == "mvol") {
                entries.push(path);
            }
        }
        entries.sort();
        fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
        entries
            .into_iter()
            .map(|p| {
                let out = a.output.join(p.file_name().expect("file entry"));
                (p, out)
            })
            .collect()
    } else {
        ensure_parent(&a.output)?;
        vec![(a.input.clone(), a.output.clone())]
    };
    let mut written = 0;
    for (input, output) in &jobs {
        let raw = read_volume(input)?;
        if raw.kind() == VolumeKind::Labels {
            if a.input.is_dir() {
                continue;
            }
            return Err(Error::InvalidVolume(format!("{} is a label volume", input.display())));
        }
        let seg = predict_case(&net, &raw, &plan, &plan.fingerprint, &options)?;
        write_volume(&seg, output)?;
        written += 1;
    }
    let echo = if a.input.is_dir() {
        a.output.join(CONFIG_ECHO)
    } else {
        echo_path_for_file(&a.output)
    };
    write_echo(
        &echo,
        "infer",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("mode", format!("{:?}", a.mode).to_lowercase()),
            ("force_spacing", a.force_spacing.to_string()),
            ("postprocess_cc", a.postprocess_cc.to_string()),
            ("step_fraction", a.step_fraction.to_string()),
        ],
        &cfg,
    )?;
    info!("segmented {written} volume(s)");
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, cfg: ExperimentConfig) -> Result<()> {
    let report = evaluate(&a.pred, &a.gt, a.classes, a.tolerance)?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, report.to_csv()).map_err(|e| Error::io(&a.out, e))?;
    write_echo(
        &echo_path_for_file(&a.out),
        "evaluate",
        &[
            ("pred", a.pred.display().to_string()),
            ("gt", a.gt.display().to_string()),
            ("classes", a.classes.to_string()),
            ("tolerance", a.tolerance.to_string()),
        ],
        &cfg,
    )?;
    info!(
        "{} cases: mean DSC {:.4}, mean NSD {:.4}",
        report.cases.len(),
        report.mean_dsc(),
        report.mean_nsd()
    );
    Ok(())
}

/// Execute a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let (cfg, explicit) = load_config(cli)?;
    match &cli.command {
        Command::Synth(a) => synth(a, cfg),
        Command::Fingerprint(a) => fingerprint(a, cfg),
        Command::Plan(a) => plan(a, cfg),
        Command::Train(a) => train(a, cfg, &explicit),
        Command::Infer(a) => infer(a, cfg),
        Command::Evaluate(a) => evaluate_cmd(a, cfg),
    }
}
