//! Run configuration merged from three layers: built-in defaults, an
//! optional flat `key = value` config file, then command-line flags.
//! Later layers win. Every key is validated against the schema below;
//! unknown keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NormKind, Variant};
use crate::optim::TrainConfig;
use crate::search::SearchSpace;

/// Everything a command might need. Each subcommand reads the fields it
/// cares about and ignores the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub space: SearchSpace,
    /// Synthetic subjects per class.
    pub n_per_class: usize,
    /// Synthetic volume extents.
    pub extents: (usize, usize, usize),
    pub signal_strength: f64,
    pub age_effect: f64,
    /// Train/dev/test fractions.
    pub fractions: (f64, f64, f64),
    /// Random-search trial count.
    pub budget: usize,
    pub occlusion_box: usize,
    pub occlusion_stride: usize,
    /// Mirror training subjects across the hemisphere axis.
    pub augment: bool,
    pub manifest: Option<PathBuf>,
    pub split_file: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trial_log: Option<PathBuf>,
    pub volume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            space: SearchSpace::default(),
            n_per_class: 12,
            extents: (16, 20, 20),
            signal_strength: 4.0,
            age_effect: 10.0,
            fractions: (0.7, 0.15, 0.15),
            budget: 20,
            occlusion_box: 2,
            occlusion_stride: 1,
            augment: false,
            manifest: None,
            split_file: None,
            checkpoint: None,
            out: None,
            trial_log: None,
            volume: None,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key}: cannot parse {value:?} as {want}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, want))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true|false")),
    }
}

/// Parses `"X,Y,Z"` into a triple of voxel counts.
pub fn parse_extents(value: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad("extents", value, "X,Y,Z"));
    }
    let mut e = [0usize; 3];
    for (slot, part) in e.iter_mut().zip(&parts) {
        *slot = num("extents", part, "a voxel count")?;
    }
    Ok((e[0], e[1], e[2]))
}

fn list<T>(key: &str, value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Result<Vec<T>> = value.split(',').map(str::trim).map(|s| f(s)).collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: choice list is empty")));
    }
    Ok(items)
}

impl RunConfig {
    /// Sets one schema key from its string form. Both the config-file
    /// parser and the flag-merge layer funnel through here, so a value is
    /// validated the same way no matter where it came from.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            // Model architecture.
            "variant" => self.model.variant = value.parse()?,
            "norm" => self.model.norm = value.parse()?,
            "use_demographics" => self.model.use_demographics = boolean(key, value)?,
            "alpha" => self.model.alpha = num(key, value, "a number")?,
            "rc" => self.model.rc = num(key, value, "a number")?,
            "kp1" => self.model.kp1 = num(key, value, "a number")?,
            "kp2" => self.model.kp2 = num(key, value, "a number")?,
            "num_classes" => self.model.num_classes = num(key, value, "an integer")?,
            // Optimization.
            "lr0" => self.train.lr0 = num(key, value, "a number")?,
            "decay_k" => self.train.decay_k = num(key, value, "a number")?,
            "decay_steps" => self.train.decay_steps = num(key, value, "an integer")?,
            "batch_size" => self.train.batch_size = num(key, value, "an integer")?,
            "max_epochs" => self.train.max_epochs = num(key, value, "an integer")?,
            "seed" => self.train.seed = num(key, value, "an integer")?,
            "beta1" => self.train.beta1 = num(key, value, "a number")?,
            "beta2" => self.train.beta2 = num(key, value, "a number")?,
            "eps_adam" => self.train.eps_adam = num(key, value, "a number")?,
            "early_stop_patience" => {
                self.train.early_stop_patience = num(key, value, "an integer")?
            }
            // Search space.
            "lr0_min" => self.space.lr0.0 = num(key, value, "a number")?,
            "lr0_max" => self.space.lr0.1 = num(key, value, "a number")?,
            "alpha_choices" => self.space.alpha = list(key, value, |s| num(key, s, "a number"))?,
            "rc_min" => self.space.rc.0 = num(key, value, "a number")?,
            "rc_max" => self.space.rc.1 = num(key, value, "a number")?,
            "rc_zero_prob" => self.space.rc_zero_prob = num(key, value, "a number")?,
            "kp_min" => self.space.kp.0 = num(key, value, "a number")?,
            "kp_max" => self.space.kp.1 = num(key, value, "a number")?,
            "variant_choices" => self.space.variants = list(key, value, |s| s.parse::<Variant>())?,
            "norm_choices" => self.space.norms = list(key, value, |s| s.parse::<NormKind>())?,
            "demographics_choices" => {
                self.space.use_demographics = list(key, value, |s| boolean(key, s))?
            }
            // Synthetic data.
            "n_per_class" => self.n_per_class = num(key, value, "an integer")?,
            "extents" => self.extents = parse_extents(value)?,
            "signal_strength" => self.signal_strength = num(key, value, "a number")?,
            "age_effect" => self.age_effect = num(key, value, "a number")?,
            // Splitting.
            "train_frac" => self.fractions.0 = num(key, value, "a number")?,
            "dev_frac" => self.fractions.1 = num(key, value, "a number")?,
            "test_frac" => self.fractions.2 = num(key, value, "a number")?,
            // Search / interpretation / training toggles.
            "budget" => self.budget = num(key, value, "an integer")?,
            "occlusion_box" => self.occlusion_box = num(key, value, "an integer")?,
            "occlusion_stride" => self.occlusion_stride = num(key, value, "an integer")?,
            "augment" => self.augment = boolean(key, value)?,
            // Paths.
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "split_file" => self.split_file = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "trial_log" => self.trial_log = Some(PathBuf::from(value)),
            "volume" => self.volume = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` comments and
    /// blank lines skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }
}
