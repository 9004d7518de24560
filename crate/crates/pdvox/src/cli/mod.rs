//! Command-line front end: synthesize data, split it, train, evaluate,
//! render occlusion heatmaps, and run hyperparameter searches. Every value
//! resolves flag > config file > built-in default, and all randomness
//! flows from explicit seeds.

mod config;

pub use config::{parse_extents, RunConfig};

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    augment, load_manifest, load_subject_volume, load_volume, stratified_split, synth_generate,
    DemoStats, Label, Sex, SplitRecord, Subject, SynthSpec,
};
use crate::error::{Error, Result};
use crate::interpret::{export_slice, occlusion_heatmap, ModelScorer, PdScorer, Plane};
use crate::model::{build_model, evaluate, load_checkpoint, save_checkpoint, train, ModelConfig};
use crate::optim::TrainConfig;
use crate::search::{
    grid_search, random_search, table3_grid, TrialEval, TrialOutcome, TrialResult,
};
use crate::seeds::derive_seed;

#[derive(Parser, Debug)]
#[command(
    name = "pdvox",
    version,
    about = "Volumetric Parkinson-vs-healthy classification on MVOL brain volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset (volumes + manifest).
    Synth(SynthArgs),
    /// Write a stratified train/dev/test split record for a manifest.
    Split(SplitArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a classification report.
    Eval(EvalArgs),
    /// Render an occlusion heatmap for one volume.
    Heatmap(HeatmapArgs),
    /// Random hyperparameter search or the fixed 12-experiment grid.
    Search(SearchArgs),
}

/// Architecture overrides shared by training-style commands.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Architecture variant (original|simplified).
    #[arg(long)]
    variant: Option<crate::model::Variant>,
    /// Normalization after each convolution (none|batch|group).
    #[arg(long)]
    norm: Option<crate::model::NormKind>,
    /// Fuse [age, sex] into the classifier head (true|false).
    #[arg(long)]
    use_demographics: Option<bool>,
    /// Leaky-ReLU slope.
    #[arg(long)]
    alpha: Option<f64>,
    /// L2 coefficient over convolutional parameters.
    #[arg(long)]
    rc: Option<f64>,
    /// Keep probability of the first FC dropout.
    #[arg(long)]
    kp1: Option<f64>,
    /// Keep probability of the second FC dropout.
    #[arg(long)]
    kp2: Option<f64>,
}

/// Optimization overrides shared by training-style commands.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Initial learning rate.
    #[arg(long)]
    lr0: Option<f64>,
    /// Exponential decay strength (0 disables).
    #[arg(long)]
    decay_k: Option<f64>,
    /// Adam steps per decay increment.
    #[arg(long)]
    decay_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Master seed for this command.
    #[arg(long)]
    seed: Option<u64>,
    /// Consecutive perfect-train-F2 epochs before stopping (0 disables).
    #[arg(long)]
    early_stop_patience: Option<usize>,
}

/// Search-space overrides; list-valued flags take comma-separated values.
#[derive(Args, Debug, Default)]
struct SpaceFlags {
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    lr0_min: Option<f64>,
    #[arg(long)]
    lr0_max: Option<f64>,
    /// Leaky-ReLU slope choices, e.g. "0,0.01,0.1".
    #[arg(long)]
    alpha_choices: Option<String>,
    #[arg(long)]
    rc_min: Option<f64>,
    #[arg(long)]
    rc_max: Option<f64>,
    /// Probability a trial disables L2 entirely.
    #[arg(long)]
    rc_zero_prob: Option<f64>,
    #[arg(long)]
    kp_min: Option<f64>,
    #[arg(long)]
    kp_max: Option<f64>,
    /// Variant choices, e.g. "original,simplified".
    #[arg(long)]
    variant_choices: Option<String>,
    /// Normalization choices, e.g. "none,batch,group".
    #[arg(long)]
    norm_choices: Option<String>,
    /// Demographics choices, e.g. "true,false".
    #[arg(long)]
    demographics_choices: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for volumes/ and manifest.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_per_class: Option<usize>,
    /// Volume extents as "X,Y,Z".
    #[arg(long)]
    extents: Option<String>,
    /// Peak depth of the PD intensity deficit.
    #[arg(long)]
    signal_strength: Option<f64>,
    /// Years added to PD ages.
    #[arg(long)]
    age_effect: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value config file applied under the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Manifest CSV to split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Where to write the split record (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    dev_frac: Option<f64>,
    #[arg(long)]
    test_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split record written by `pdvox split`.
    #[arg(long = "split")]
    split_file: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Double the training set with hemisphere-mirrored copies.
    #[arg(long)]
    augment: Option<bool>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long = "split")]
    split_file: Option<PathBuf>,
    /// Which split part to evaluate (train|dev|test); requires --split.
    #[arg(long)]
    part: Option<String>,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Volume to explain (MVOL).
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Output heatmap path (MVOL).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Subject age (required when the checkpoint fuses demographics).
    #[arg(long)]
    age: Option<u32>,
    /// Subject sex, M or F (required when the checkpoint fuses demographics).
    #[arg(long)]
    sex: Option<String>,
    /// Occlusion box edge length in voxels.
    #[arg(long = "box")]
    box_extent: Option<usize>,
    /// Occlusion box step in voxels.
    #[arg(long)]
    stride: Option<usize>,
    /// Slice export, e.g. "axial:12" (repeatable).
    #[arg(long = "slice")]
    slices: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long = "split")]
    split_file: Option<PathBuf>,
    /// "random" (default) or "table3" for the fixed 12-experiment grid.
    #[arg(long)]
    preset: Option<String>,
    /// Append-only JSONL trial log; enables crash-safe resume.
    #[arg(long)]
    trial_log: Option<PathBuf>,
    /// Optional rankings JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    augment: Option<bool>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    space: SpaceFlags,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code: 0 success, 1 usage or
/// configuration error, 2 data error, 3 numerical failure.
pub fn run(args: &[String]) -> u8 {
    let argv = std::iter::once("pdvox".to_string()).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as u8
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => run_synth(a),
        Command::Split(a) => run_split(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Heatmap(a) => run_heatmap(a),
        Command::Search(a) => run_search(a),
    }
}

fn load_cfg(config: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.load_file(path)?;
    }
    Ok(cfg)
}

fn require_path<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "missing required path: --{key} (or config key `{key}`)"
        ))
    })
}

/// Directory that relative manifest paths resolve against.
fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn merge_model(cfg: &mut RunConfig, f: &ModelFlags) {
    if let Some(v) = f.variant {
        cfg.model.variant = v;
    }
    if let Some(v) = f.norm {
        cfg.model.norm = v;
    }
    if let Some(v) = f.use_demographics {
        cfg.model.use_demographics = v;
    }
    if let Some(v) = f.alpha {
        cfg.model.alpha = v;
    }
    if let Some(v) = f.rc {
        cfg.model.rc = v;
    }
    if let Some(v) = f.kp1 {
        cfg.model.kp1 = v;
    }
    if let Some(v) = f.kp2 {
        cfg.model.kp2 = v;
    }
}

fn merge_train(cfg: &mut RunConfig, f: &TrainFlags) {
    if let Some(v) = f.lr0 {
        cfg.train.lr0 = v;
    }
    if let Some(v) = f.decay_k {
        cfg.train.decay_k = v;
    }
    if let Some(v) = f.decay_steps {
        cfg.train.decay_steps = v;
    }
    if let Some(v) = f.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = f.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = f.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = f.early_stop_patience {
        cfg.train.early_stop_patience = v;
    }
}

fn merge_space(cfg: &mut RunConfig, f: &SpaceFlags) -> Result<()> {
    if let Some(v) = f.budget {
        cfg.budget = v;
    }
    if let Some(v) = f.lr0_min {
        cfg.space.lr0.0 = v;
    }
    if let Some(v) = f.lr0_max {
        cfg.space.lr0.1 = v;
    }
    if let Some(v) = f.rc_min {
        cfg.space.rc.0 = v;
    }
    if let Some(v) = f.rc_max {
        cfg.space.rc.1 = v;
    }
    if let Some(v) = f.rc_zero_prob {
        cfg.space.rc_zero_prob = v;
    }
    if let Some(v) = f.kp_min {
        cfg.space.kp.0 = v;
    }
    if let Some(v) = f.kp_max {
        cfg.space.kp.1 = v;
    }
    // Comma-separated lists reuse the config-file parser.
    for (key, value) in [
        ("alpha_choices", &f.alpha_choices),
        ("variant_choices", &f.variant_choices),
        ("norm_choices", &f.norm_choices),
        ("demographics_choices", &f.demographics_choices),
    ] {
        if let Some(v) = value {
            cfg.apply(key, v)?;
        }
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = load_cfg(&a.config)?;
    if let Some(v) = a.n_per_class {
        cfg.n_per_class = v;
    }
    if let Some(s) = &a.extents {
        cfg.extents = parse_extents(s)?;
    }
    if let Some(v) = a.signal_strength {
        cfg.signal_strength = v;
    }
    if let Some(v) = a.age_effect {
        cfg.age_effect = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    let out = require_path(&cfg.out, "out")?;

    let spec = SynthSpec {
        n_per_class: cfg.n_per_class,
        extents: cfg.extents,
        signal_strength: cfg.signal_strength,
        age_effect: cfg.age_effect,
        seed: cfg.train.seed,
    };
    let manifest = synth_generate(&spec, out)?;
    println!(
        "wrote {} HC + {} PD volumes at {:?} under {}",
        cfg.n_per_class,
        cfg.n_per_class,
        cfg.extents,
        out.display()
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn run_split(a: SplitArgs) -> Result<()> {
    let mut cfg = load_cfg(&a.config)?;
    if a.manifest.is_some() {
        cfg.manifest = a.manifest;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if let Some(v) = a.train_frac {
        cfg.fractions.0 = v;
    }
    if let Some(v) = a.dev_frac {
        cfg.fractions.1 = v;
    }
    if let Some(v) = a.test_frac {
        cfg.fractions.2 = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    let manifest = require_path(&cfg.manifest, "manifest")?;
    let out = require_path(&cfg.out, "out")?;

    let subjects = load_manifest(manifest)?;
    let split = stratified_split(&subjects, cfg.fractions, cfg.train.seed)?;
    SplitRecord::from_split(&split).save(out)?;
    println!(
        "split {} subjects: train {} dev {} test {}",
        subjects.len(),
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );
    println!("split record: {}", out.display());
    Ok(())
}

/// Loads the manifest, applies the split record, and optionally augments
/// the training half — the shared preamble of `train` and `search`.
fn load_training_parts(
    cfg: &RunConfig,
) -> Result<(
    Vec<Subject>,
    Vec<Subject>,
    PathBuf,
    DemoStats,
    (usize, usize, usize),
)> {
    let manifest = require_path(&cfg.manifest, "manifest")?;
    let subjects = load_manifest(manifest)?;
    let record = SplitRecord::load(require_path(&cfg.split_file, "split")?)?;
    let split = record.apply(&subjects)?;
    let train_set = if cfg.augment {
        augment(&split.train)
    } else {
        split.train
    };
    if train_set.is_empty() {
        return Err(Error::Data("split leaves the training set empty".into()));
    }
    let root = manifest_root(manifest);
    let demo_stats = DemoStats::from_subjects(&train_set)?;
    let extents = load_subject_volume(&train_set[0], &root)?.extents();
    Ok((train_set, split.dev, root, demo_stats, extents))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_cfg(&a.config)?;
    if a.manifest.is_some() {
        cfg.manifest = a.manifest;
    }
    if a.split_file.is_some() {
        cfg.split_file = a.split_file;
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if let Some(v) = a.augment {
        cfg.augment = v;
    }
    merge_model(&mut cfg, &a.model);
    merge_train(&mut cfg, &a.train);
    let checkpoint = require_path(&cfg.checkpoint, "checkpoint")?;

    let (train_set, dev_set, root, demo_stats, extents) = load_training_parts(&cfg)?;
    let mut model = build_model::<f32>(
        &cfg.model,
        extents,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, 0)),
    )?;
    println!(
        "training {} / {} norm at {:?}: {} parameters, {} train + {} dev subjects, lr0 {:.3e}",
        cfg.model.variant,
        cfg.model.norm,
        extents,
        model.parameter_count(),
        train_set.len(),
        dev_set.len(),
        cfg.train.lr0
    );
    let history = train(
        &mut model,
        &train_set,
        &dev_set,
        &root,
        &demo_stats,
        &cfg.train,
        |e| {
            println!(
                "epoch {}/{} loss {:.6} train_f2 {:.4} dev_f2 {:.4} lr {:.3e}",
                e.epoch, cfg.train.max_epochs, e.train_loss, e.train_f2, e.dev_f2, e.lr
            );
        },
    )?;

    save_checkpoint(&model, &demo_stats, checkpoint)?;
    match history.best_epoch {
        Some(best) => println!("best dev F2 {:.4} at epoch {best}", history.best_dev_f2),
        None => println!("no epochs run"),
    }
    println!("checkpoint: {}", checkpoint.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_cfg(&a.config)?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if a.manifest.is_some() {
        cfg.manifest = a.manifest;
    }
    if a.split_file.is_some() {
        cfg.split_file = a.split_file;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }

    let (model, demo_stats) = load_checkpoint(require_path(&cfg.checkpoint, "checkpoint")?)?;
    let manifest = require_path(&cfg.manifest, "manifest")?;
    let subjects = load_manifest(manifest)?;
    let root = manifest_root(manifest);

    let chosen = match (&cfg.split_file, a.part.as_deref()) {
        (Some(split_file), part) => {
            let split = SplitRecord::load(split_file)?.apply(&subjects)?;
            match part.unwrap_or("test") {
                "train" => split.train,
                "dev" => split.dev,
                "test" => split.test,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown part {other:?} (expected train|dev|test)"
                    )))
                }
            }
        }
        (None, None) => subjects,
        (None, Some(_)) => {
            return Err(Error::Config("--part requires --split".into()));
        }
    };

    let report = evaluate(&model, &chosen, &root, &demo_stats, cfg.train.batch_size)?;
    print!("{}", report.to_text());
    if let Some(out) = &cfg.out {
        fs::write(out, report.to_json()?).map_err(|e| Error::io(out, e))?;
        println!("report: {}", out.display());
    }
    Ok(())
}

/// Parses a slice request of the form "plane:index".
fn parse_slice(spec: &str) -> Result<(Plane, usize)> {
    let (plane, index) = spec.split_once(':').ok_or_else(|| {
        Error::InvalidArgument(format!("slice must be \"plane:index\", got {spec:?}"))
    })?;
    let index = index
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad slice index in {spec:?}")))?;
    Ok((plane.parse()?, index))
}

fn slice_path(heatmap_out: &Path, plane: Plane, index: usize) -> PathBuf {
    let stem = heatmap_out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "heatmap".into());
    heatmap_out.with_file_name(format!("{stem}_{plane}{index}.pgm"))
}

fn run_heatmap(a: HeatmapArgs) -> Result<()> {
    let mut cfg = load_cfg(&a.config)?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if a.volume.is_some() {
        cfg.volume = a.volume;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if let Some(v) = a.box_extent {
        cfg.occlusion_box = v;
    }
    if let Some(v) = a.stride {
        cfg.occlusion_stride = v;
    }

    let (model, demo_stats) = load_checkpoint(require_path(&cfg.checkpoint, "checkpoint")?)?;
    let volume_path = require_path(&cfg.volume, "volume")?;
    // Score in the same normalized-intensity space the model trained on;
    // occlusion zeros are therefore post-normalization.
    let volume = load_volume(volume_path)?.normalize_intensity()?;

    let demographics = if model.config().use_demographics {
        let age = a.age.ok_or_else(|| {
            Error::Config("checkpoint fuses demographics: --age is required".into())
        })?;
        let sex: Sex = a
            .sex
            .as_deref()
            .ok_or_else(|| {
                Error::Config("checkpoint fuses demographics: --sex is required".into())
            })?
            .parse()
            .map_err(|_| Error::Config("sex must be M or F".into()))?;
        let query = Subject {
            id: "query".into(),
            volume_path: volume_path.to_path_buf(),
            age,
            sex,
            label: Label::Hc,
            flipped: false,
        };
        let encoded = demo_stats.encode(&query);
        Some([encoded[0] as f32, encoded[1] as f32])
    } else {
        if a.age.is_some() || a.sex.is_some() {
            return Err(Error::Config(
                "checkpoint ignores demographics: omit --age/--sex".into(),
            ));
        }
        None
    };

    let scorer = ModelScorer::new(&model, demographics)?;
    let baseline = scorer.pd_probability(&volume)?;
    let heatmap = occlusion_heatmap(&scorer, &volume, cfg.occlusion_box, cfg.occlusion_stride)?;

    let out = require_path(&cfg.out, "out")?;
    heatmap.save(out)?;
    println!("P(PD) = {baseline:.4}");
    println!("heatmap: {}", out.display());
    for spec in &a.slices {
        let (plane, index) = parse_slice(spec)?;
        let path = slice_path(out, plane, index);
        export_slice(&heatmap, plane, index, &path)?;
        println!("slice: {}", path.display());
    }
    Ok(())
}

fn run_search(a: SearchArgs) -> Result<()> {
    let mut cfg = load_cfg(&a.config)?;
    if a.manifest.is_some() {
        cfg.manifest = a.manifest;
    }
    if a.split_file.is_some() {
        cfg.split_file = a.split_file;
    }
    if a.trial_log.is_some() {
        cfg.trial_log = a.trial_log;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if let Some(v) = a.augment {
        cfg.augment = v;
    }
    merge_train(&mut cfg, &a.train);
    merge_space(&mut cfg, &a.space)?;

    let (train_set, dev_set, root, demo_stats, extents) = load_training_parts(&cfg)?;
    let master_seed = cfg.train.seed;

    let mut trial_no = 0usize;
    let evaluator = |mc: &ModelConfig, tc: &TrainConfig| -> Result<TrialEval> {
        trial_no += 1;
        println!(
            "trial {trial_no}: {} {} demo={} lr0={:.3e} alpha={} rc={:.3e} kp=({:.2},{:.2})",
            mc.variant, mc.norm, mc.use_demographics, tc.lr0, mc.alpha, mc.rc, mc.kp1, mc.kp2
        );
        let mut model = build_model::<f32>(
            mc,
            extents,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 0)),
        )?;
        let history = train(
            &mut model,
            &train_set,
            &dev_set,
            &root,
            &demo_stats,
            tc,
            |_| {},
        )?;
        let eval = TrialEval {
            train_f2: history.epochs.last().map(|e| e.train_f2).unwrap_or(0.0),
            dev_f2: history.best_dev_f2,
            epochs_run: history.epochs.len(),
        };
        println!(
            "trial {trial_no}: dev_f2 {:.4} train_f2 {:.4} after {} epochs",
            eval.dev_f2, eval.train_f2, eval.epochs_run
        );
        Ok(eval)
    };

    let log = cfg.trial_log.as_deref();
    let preset = a.preset.as_deref().unwrap_or("random");
    let (ranked, names) = match preset {
        "random" => (
            random_search(
                &cfg.space,
                &cfg.train,
                cfg.budget,
                master_seed,
                log,
                evaluator,
            )?,
            None,
        ),
        "table3" => {
            let grid = table3_grid(&cfg.train);
            let names: Vec<&'static str> = grid.iter().map(|(name, _, _)| *name).collect();
            let rows = grid.into_iter().map(|(_, m, t)| (m, t)).collect();
            (grid_search(rows, master_seed, log, evaluator)?, Some(names))
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset {other:?} (expected random|table3)"
            )))
        }
    };

    print_ranking(&ranked, names.as_deref());
    if let Some(out) = &cfg.out {
        let json = rankings_json(&ranked, names.as_deref())?;
        fs::write(out, json).map_err(|e| Error::io(out, e))?;
        println!("rankings: {}", out.display());
    }
    Ok(())
}

fn print_ranking(ranked: &[TrialResult], names: Option<&[&'static str]>) {
    println!("rank trial name       dev_f2  train_f2 epochs  lr0        variant    norm  demo");
    for (i, r) in ranked.iter().enumerate() {
        let name = names.map(|ns| ns[r.trial]).unwrap_or("-");
        match &r.outcome {
            TrialOutcome::Done {
                train_f2,
                dev_f2,
                epochs_run,
                ..
            } => println!(
                "{:<4} {:<5} {:<10} {:<7.4} {:<8.4} {:<7} {:<10.3e} {:<10} {:<5} {}",
                i + 1,
                r.trial,
                name,
                dev_f2,
                train_f2,
                epochs_run,
                r.train.lr0,
                r.model.variant,
                r.model.norm,
                r.model.use_demographics
            ),
            TrialOutcome::Failed { error } => {
                println!("{:<4} {:<5} {:<10} failed: {error}", i + 1, r.trial, name)
            }
        }
    }
}

/// Rankings as pretty JSON, excluding wall-clock time so identical runs
/// serialize identically.
fn rankings_json(ranked: &[TrialResult], names: Option<&[&'static str]>) -> Result<String> {
    let rows: Vec<serde_json::Value> = ranked
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = serde_json::json!({
                "rank": i + 1,
                "trial": r.trial,
                "seed": r.seed,
                "lr0": r.train.lr0,
                "model": r.model,
            });
            if let Some(ns) = names {
                row["name"] = ns[r.trial].into();
            }
            match &r.outcome {
                TrialOutcome::Done {
                    train_f2,
                    dev_f2,
                    epochs_run,
                    ..
                } => {
                    row["dev_f2"] = (*dev_f2).into();
                    row["train_f2"] = (*train_f2).into();
                    row["epochs_run"] = (*epochs_run).into();
                }
                TrialOutcome::Failed { error } => {
                    row["error"] = error.as_str().into();
                }
            }
            row
        })
        .collect();
    let mut json = serde_json::to_string_pretty(&rows)
        .map_err(|e| Error::Data(format!("cannot encode rankings: {e}")))?;
    json.push('\n');
    Ok(json)
}
