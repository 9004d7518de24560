//! Random hyperparameter search plus a fixed 12-experiment grid preset.
//! Trials draw their seeds from a master seed by counter, log one JSON
//! record per trial to an append-only file, and can resume a crashed run
//! by skipping seeds already present in that log.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NormKind, Variant};
use crate::optim::TrainConfig;
use crate::seeds::derive_seed;

/// Per-hyperparameter sampling ranges. Continuous ranges are inclusive;
/// a range with `lo == hi` always draws that value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Log-uniform range for the initial learning rate.
    pub lr0: (f64, f64),
    /// Candidate leaky-ReLU slopes.
    pub alpha: Vec<f64>,
    /// Log-uniform range for the L2 coefficient when drawn nonzero.
    pub rc: (f64, f64),
    /// Probability that rc is forced to exactly 0 (regularization off).
    pub rc_zero_prob: f64,
    /// Uniform range shared by both dropout keep probabilities.
    pub kp: (f64, f64),
    pub variants: Vec<Variant>,
    pub norms: Vec<NormKind>,
    pub use_demographics: Vec<bool>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr0: (1e-6, 1e-3),
            alpha: vec![0.0, 0.01, 0.1],
            rc: (1e-4, 1e-1),
            rc_zero_prob: 1.0 / 3.0,
            kp: (0.2, 1.0),
            variants: vec![Variant::Original, Variant::Simplified],
            norms: vec![NormKind::None, NormKind::Batch, NormKind::Group],
            use_demographics: vec![false, true],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("lr0", self.lr0), ("rc", self.rc)] {
            if !(lo > 0.0 && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "{name} range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        let (lo, hi) = self.kp;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "kp range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.rc_zero_prob) {
            return Err(Error::Config(format!(
                "rc_zero_prob must lie in [0, 1], got {}",
                self.rc_zero_prob
            )));
        }
        if self.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config(
                "alpha choices must be finite and >= 0".into(),
            ));
        }
        for (name, empty) in [
            ("alpha", self.alpha.is_empty()),
            ("variants", self.variants.is_empty()),
            ("norms", self.norms.is_empty()),
            ("use_demographics", self.use_demographics.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("{name} choices must be non-empty")));
            }
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo..hi)
}

fn choice<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

/// Draws one candidate configuration. Every hyperparameter is drawn
/// independently in a fixed order, so a given RNG state always yields the
/// same configuration. Fields not under search are copied from `base`.
pub fn sample_config(
    space: &SearchSpace,
    base: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (ModelConfig, TrainConfig) {
    let lr0 = log_uniform(rng, space.lr0);
    let alpha = choice(rng, &space.alpha);
    let rc_zero = rng.random::<f64>() < space.rc_zero_prob;
    let rc_draw = log_uniform(rng, space.rc);
    let rc = if rc_zero { 0.0 } else { rc_draw };
    let kp1 = uniform(rng, space.kp);
    let kp2 = uniform(rng, space.kp);
    let variant = choice(rng, &space.variants);
    let norm = choice(rng, &space.norms);
    let use_demographics = choice(rng, &space.use_demographics);

    let model = ModelConfig {
        variant,
        norm,
        use_demographics,
        alpha,
        rc,
        kp1,
        kp2,
        num_classes: 2,
    };
    let train = TrainConfig {
        lr0,
        ..base.clone()
    };
    (model, train)
}

/// Metrics an evaluator reports back for one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialEval {
    pub train_f2: f64,
    pub dev_f2: f64,
    pub epochs_run: usize,
}

/// How a trial ended; failures keep their message so the search log stays
/// a complete account of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrialOutcome {
    Done {
        train_f2: f64,
        dev_f2: f64,
        epochs_run: usize,
        wall_secs: f64,
    },
    Failed {
        error: String,
    },
}

/// One line of the trial log: the sampled configuration and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Position in the master seed sequence.
    pub trial: usize,
    /// Seed the trial ran under (also its resume key).
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub outcome: TrialOutcome,
}

impl TrialResult {
    pub fn dev_f2(&self) -> Option<f64> {
        match &self.outcome {
            TrialOutcome::Done { dev_f2, .. } => Some(*dev_f2),
            TrialOutcome::Failed { .. } => None,
        }
    }

    fn epochs_run(&self) -> usize {
        match &self.outcome {
            TrialOutcome::Done { epochs_run, .. } => *epochs_run,
            TrialOutcome::Failed { .. } => usize::MAX,
        }
    }
}

/// Orders completed trials by best dev F2 (descending), breaking ties by
/// fewer epochs and then trial index; failed trials sink to the end.
pub fn rank_trials(mut results: Vec<TrialResult>) -> Vec<TrialResult> {
    results.sort_by(|a, b| {
        let fa = a.dev_f2().unwrap_or(f64::NEG_INFINITY);
        let fb = b.dev_f2().unwrap_or(f64::NEG_INFINITY);
        fb.total_cmp(&fa)
            .then(a.epochs_run().cmp(&b.epochs_run()))
            .then(a.trial.cmp(&b.trial))
    });
    results
}

/// Reads a trial log written by [`random_search`] (one JSON record per line).
pub fn read_trial_log(path: &Path) -> Result<Vec<TrialResult>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut results = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        results.push(serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: bad trial record: {e}",
                path.display(),
                i + 1
            ))
        })?);
    }
    Ok(results)
}

/// Evaluates a fixed list of trial configurations, seeded by position:
/// trial i runs under `derive_seed(master_seed, i)`. When `log_path` is
/// given, each finished trial is appended immediately, and trials whose
/// seeds already appear in the log are reused instead of re-evaluated —
/// so an interrupted search resumed with the same arguments produces the
/// same ranking as an uninterrupted one. Evaluator errors are recorded as
/// failed trials and the run continues.
fn execute_trials<F>(
    trials: Vec<(ModelConfig, TrainConfig)>,
    master_seed: u64,
    log_path: Option<&Path>,
    mut evaluator: F,
) -> Result<Vec<TrialResult>>
where
    F: FnMut(&ModelConfig, &TrainConfig) -> Result<TrialEval>,
{
    let mut completed: Vec<TrialResult> = match log_path {
        Some(path) if path.exists() => read_trial_log(path)?,
        _ => Vec::new(),
    };
    let mut log = log_path
        .map(|path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))
        })
        .transpose()?;

    let mut results = Vec::with_capacity(trials.len());
    for (trial, (model, mut train)) in trials.into_iter().enumerate() {
        let seed = derive_seed(master_seed, trial as u64);
        if let Some(prev) = completed.iter().position(|r| r.seed == seed) {
            results.push(completed.swap_remove(prev));
            continue;
        }
        train.seed = seed;

        let start = Instant::now();
        let outcome = match evaluator(&model, &train) {
            Ok(eval) => TrialOutcome::Done {
                train_f2: eval.train_f2,
                dev_f2: eval.dev_f2,
                epochs_run: eval.epochs_run,
                wall_secs: start.elapsed().as_secs_f64(),
            },
            Err(e) => TrialOutcome::Failed {
                error: e.to_string(),
            },
        };
        let result = TrialResult {
            trial,
            seed,
            model,
            train,
            outcome,
        };
        if let (Some(log), Some(path)) = (log.as_mut(), log_path) {
            let line = serde_json::to_string(&result)
                .map_err(|e| Error::Data(format!("trial record serialization: {e}")))?;
            writeln!(log, "{line}").map_err(|e| Error::io(path, e))?;
            log.flush().map_err(|e| Error::io(path, e))?;
        }
        results.push(result);
    }
    Ok(rank_trials(results))
}

/// Runs `budget` randomly drawn trials and returns them ranked. Trial i
/// derives both its configuration draw and its training seed from
/// `derive_seed(master_seed, i)`; see [`execute_trials`]' resume contract.
pub fn random_search<F>(
    space: &SearchSpace,
    base: &TrainConfig,
    budget: usize,
    master_seed: u64,
    log_path: Option<&Path>,
    evaluator: F,
) -> Result<Vec<TrialResult>>
where
    F: FnMut(&ModelConfig, &TrainConfig) -> Result<TrialEval>,
{
    space.validate()?;
    if budget < 1 {
        return Err(Error::InvalidArgument("search budget must be >= 1".into()));
    }
    let trials = (0..budget)
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, trial as u64));
            sample_config(space, base, &mut rng)
        })
        .collect();
    execute_trials(trials, master_seed, log_path, evaluator)
}

/// Runs an explicit list of configurations (e.g. [`table3_grid`]) through
/// the same seeding, logging, resume, and ranking machinery as
/// [`random_search`].
pub fn grid_search<F>(
    grid: Vec<(ModelConfig, TrainConfig)>,
    master_seed: u64,
    log_path: Option<&Path>,
    evaluator: F,
) -> Result<Vec<TrialResult>>
where
    F: FnMut(&ModelConfig, &TrainConfig) -> Result<TrialEval>,
{
    if grid.is_empty() {
        return Err(Error::InvalidArgument("grid must be non-empty".into()));
    }
    execute_trials(grid, master_seed, log_path, evaluator)
}

/// The fixed 12-experiment grid: both variants, with and without
/// demographic fusion, normalization, L2 regularization, and dropout,
/// each at its published learning rate.
pub fn table3_grid(base: &TrainConfig) -> Vec<(&'static str, ModelConfig, TrainConfig)> {
    const ROWS: [(&str, Variant, bool, NormKind, f64, f64, f64, f64, f64); 12] = [
        (
            "OM",
            Variant::Original,
            false,
            NormKind::None,
            5e-5,
            0.0,
            0.0,
            1.0,
            1.0,
        ),
        (
            "SM",
            Variant::Simplified,
            false,
            NormKind::None,
            5e-5,
            0.0,
            0.0,
            1.0,
            1.0,
        ),
        (
            "OM-GA",
            Variant::Original,
            true,
            NormKind::None,
            2e-4,
            0.0,
            0.0,
            1.0,
            1.0,
        ),
        (
            "SM-GA",
            Variant::Simplified,
            true,
            NormKind::None,
            5e-5,
            0.0,
            0.0,
            1.0,
            1.0,
        ),
        (
            "OM-GA-B",
            Variant::Original,
            true,
            NormKind::Batch,
            5e-5,
            0.01,
            0.0,
            1.0,
            1.0,
        ),
        (
            "SM-GA-B",
            Variant::Simplified,
            true,
            NormKind::Batch,
            1e-5,
            0.01,
            0.0,
            1.0,
            1.0,
        ),
        (
            "OM-GA-G",
            Variant::Original,
            true,
            NormKind::Group,
            1e-5,
            0.01,
            0.0,
            1.0,
            1.0,
        ),
        (
            "SM-GA-G",
            Variant::Simplified,
            true,
            NormKind::Group,
            1e-5,
            0.01,
            0.0,
            1.0,
            1.0,
        ),
        (
            "OM-GA-GR",
            Variant::Original,
            true,
            NormKind::Group,
            1e-5,
            0.01,
            0.05,
            1.0,
            1.0,
        ),
        (
            "SM-GA-GR",
            Variant::Simplified,
            true,
            NormKind::Group,
            1e-5,
            0.01,
            0.001,
            1.0,
            1.0,
        ),
        (
            "OM-GA-GRD",
            Variant::Original,
            true,
            NormKind::Group,
            1e-5,
            0.01,
            0.05,
            0.2,
            0.35,
        ),
        (
            "SM-GA-GRD",
            Variant::Simplified,
            true,
            NormKind::Group,
            1e-5,
            0.01,
            0.001,
            0.45,
            0.5,
        ),
    ];

    ROWS.iter()
        .map(|&(name, variant, ga, norm, lr0, alpha, rc, kp1, kp2)| {
            let model = ModelConfig {
                variant,
                norm,
                use_demographics: ga,
                alpha,
                rc,
                kp1,
                kp2,
                num_classes: 2,
            };
            let train = TrainConfig {
                lr0,
                ..base.clone()
            };
            (name, model, train)
        })
        .collect()
}
