//! Synthetic dataset generation: smooth random volumes with an optional
//! localized intensity deficit for the PD class, plus demographics whose
//! moments mirror the modeled clinical cohort.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{save_volume, write_manifest, Label, Sex, Subject, Volume, MAX_AGE};
use crate::error::{Error, Result};

/// Parameters for one synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    /// Subjects generated per class (total files = 2 × this).
    pub n_per_class: usize,
    pub extents: (usize, usize, usize),
    /// Peak depth of the PD intensity deficit; 0 produces classes that are
    /// distributionally identical up to noise.
    pub signal_strength: f64,
    /// Added to every PD age before clamping; 0 keeps the cohort's own
    /// small age gap.
    pub age_effect: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 1 {
            return Err(Error::InvalidArgument("n_per_class must be >= 1".into()));
        }
        let (x, y, z) = self.extents;
        if x < 8 || y < 8 || z < 8 {
            return Err(Error::InvalidArgument(format!(
                "extents must each be >= 8, got {:?}",
                self.extents
            )));
        }
        if !self.signal_strength.is_finite() || self.signal_strength < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "signal_strength must be finite and >= 0, got {}",
                self.signal_strength
            )));
        }
        if !self.age_effect.is_finite() {
            return Err(Error::InvalidArgument("age_effect must be finite".into()));
        }
        Ok(())
    }
}

/// Modeled cohort demographics: male rate per class and per-(class, sex)
/// age mean/standard deviation.
const MALE_RATE_HC: f64 = 134.0 / 204.0;
const MALE_RATE_PD: f64 = 292.0 / 452.0;
const AGE_MOMENTS_HC_F: (f64, f64) = (59.2, 11.6);
const AGE_MOMENTS_HC_M: (f64, f64) = (61.7, 10.9);
const AGE_MOMENTS_PD_F: (f64, f64) = (61.9, 9.9);
const AGE_MOMENTS_PD_M: (f64, f64) = (63.3, 9.8);

const BASELINE: f64 = 10.0;
const SMOOTH_AMPLITUDE: f64 = 2.0;
const SMOOTH_SPACING: usize = 4;
const WHITE_NOISE_STD: f64 = 0.4;

/// Center of the PD deficit in voxel coordinates. Deliberately off the
/// x midline so hemisphere flipping relocates it.
pub fn lesion_center(extents: (usize, usize, usize)) -> (f64, f64, f64) {
    (
        0.32 * extents.0 as f64,
        0.55 * extents.1 as f64,
        0.45 * extents.2 as f64,
    )
}

/// Per-axis Gaussian radius of the deficit.
pub fn lesion_sigma(extents: (usize, usize, usize)) -> (f64, f64, f64) {
    (
        extents.0 as f64 / 10.0,
        extents.1 as f64 / 10.0,
        extents.2 as f64 / 10.0,
    )
}

/// Half-open per-axis voxel ranges covering the deficit out to two radii,
/// clipped to the volume.
pub fn lesion_bounds(
    extents: (usize, usize, usize),
) -> ((usize, usize), (usize, usize), (usize, usize)) {
    let center = lesion_center(extents);
    let sigma = lesion_sigma(extents);
    let axis = |c: f64, s: f64, extent: usize| {
        let lo = (c - 2.0 * s).floor().max(0.0) as usize;
        let hi = ((c + 2.0 * s).ceil() as usize).min(extent);
        (lo, hi)
    };
    (
        axis(center.0, sigma.0, extents.0),
        axis(center.1, sigma.1, extents.1),
        axis(center.2, sigma.2, extents.2),
    )
}

/// Smooth background: a coarse standard-normal grid at `SMOOTH_SPACING`
/// voxels, trilinearly upsampled to the full volume.
struct SmoothField {
    nodes: Vec<f64>,
    counts: (usize, usize, usize),
}

impl SmoothField {
    fn sample(extents: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let count = |extent: usize| (extent - 1) / SMOOTH_SPACING + 2;
        let counts = (count(extents.0), count(extents.1), count(extents.2));
        let nodes = (0..counts.0 * counts.1 * counts.2)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * SMOOTH_AMPLITUDE)
            .collect();
        SmoothField { nodes, counts }
    }

    fn node(&self, cx: usize, cy: usize, cz: usize) -> f64 {
        self.nodes[(cx * self.counts.1 + cy) * self.counts.2 + cz]
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        let cell = |v: usize| {
            (
                v / SMOOTH_SPACING,
                (v % SMOOTH_SPACING) as f64 / SMOOTH_SPACING as f64,
            )
        };
        let (cx, tx) = cell(x);
        let (cy, ty) = cell(y);
        let (cz, tz) = cell(z);
        let mut acc = 0.0;
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let w = (if dx == 0 { 1.0 - tx } else { tx })
                        * (if dy == 0 { 1.0 - ty } else { ty })
                        * (if dz == 0 { 1.0 - tz } else { tz });
                    acc += w * self.node(cx + dx, cy + dy, cz + dz);
                }
            }
        }
        acc
    }
}

fn sample_age(label: Label, sex: Sex, age_effect: f64, rng: &mut ChaCha8Rng) -> u32 {
    let (mean, std) = match (label, sex) {
        (Label::Hc, Sex::F) => AGE_MOMENTS_HC_F,
        (Label::Hc, Sex::M) => AGE_MOMENTS_HC_M,
        (Label::Pd, Sex::F) => AGE_MOMENTS_PD_F,
        (Label::Pd, Sex::M) => AGE_MOMENTS_PD_M,
    };
    let shift = if label == Label::Pd { age_effect } else { 0.0 };
    let age = mean + std * rng.sample::<f64, _>(StandardNormal) + shift;
    age.round().clamp(0.0, MAX_AGE as f64) as u32
}

fn generate_volume(spec: &SynthSpec, label: Label, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let (ex, ey, ez) = spec.extents;
    let field = SmoothField::sample(spec.extents, rng);
    let center = lesion_center(spec.extents);
    let sigma = lesion_sigma(spec.extents);
    let mut voxels = Vec::with_capacity(ex * ey * ez);
    for x in 0..ex {
        for y in 0..ey {
            for z in 0..ez {
                let mut v = BASELINE
                    + field.at(x, y, z)
                    + WHITE_NOISE_STD * rng.sample::<f64, _>(StandardNormal);
                if label == Label::Pd && spec.signal_strength > 0.0 {
                    let dx = (x as f64 - center.0) / sigma.0;
                    let dy = (y as f64 - center.1) / sigma.1;
                    let dz = (z as f64 - center.2) / sigma.2;
                    v -= spec.signal_strength * (-0.5 * (dx * dx + dy * dy + dz * dz)).exp();
                }
                voxels.push(v as f32);
            }
        }
    }
    Volume::new(spec.extents, voxels)
}

/// Generates `2 × n_per_class` volumes (HC first, then PD) under
/// `out_dir/volumes/` plus `out_dir/manifest.csv`, and returns the manifest
/// path. Fully deterministic for a given spec.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let volume_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&volume_dir).map_err(|e| Error::io(&volume_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut subjects = Vec::with_capacity(2 * spec.n_per_class);
    for label in [Label::Hc, Label::Pd] {
        let (prefix, male_rate) = match label {
            Label::Hc => ("hc", MALE_RATE_HC),
            Label::Pd => ("pd", MALE_RATE_PD),
        };
        for i in 1..=spec.n_per_class {
            let id = format!("{prefix}{i:04}");
            let sex = if rng.random::<f64>() < male_rate {
                Sex::M
            } else {
                Sex::F
            };
            let age = sample_age(label, sex, spec.age_effect, &mut rng);
            let volume = generate_volume(spec, label, &mut rng)?;
            let rel_path = PathBuf::from("volumes").join(format!("{id}.mvol"));
            save_volume(&volume, &out_dir.join(&rel_path))?;
            subjects.push(Subject {
                id,
                volume_path: rel_path,
                age,
                sex,
                label,
                flipped: false,
            });
        }
    }

    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&subjects, &manifest_path)?;
    Ok(manifest_path)
}
