//! Occlusion sensitivity: slide a zero-valued box over a volume, re-score
//! each position, and attribute the probability change to the voxels the
//! box covered. Negative values mark regions whose intensity supports the
//! PD call. Includes grayscale slice export for quick inspection.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{save_volume, Volume};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{softmax, Tensor};

/// Anything that maps a volume to P(PD). The occlusion sweep only needs
/// this one number, so analytic stand-ins can exercise the sweep exactly.
pub trait PdScorer {
    fn pd_probability(&self, volume: &Volume) -> Result<f64>;
}

/// Scores volumes with a trained binary model at fixed demographics.
pub struct ModelScorer<'a> {
    model: &'a Model<f32>,
    demographics: Option<[f32; 2]>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model<f32>, demographics: Option<[f32; 2]>) -> Result<Self> {
        if model.config().num_classes != 2 {
            return Err(Error::InvalidArgument(
                "occlusion scoring is binary (num_classes = 2)".into(),
            ));
        }
        if model.config().use_demographics != demographics.is_some() {
            return Err(Error::InvalidArgument(if demographics.is_some() {
                "model ignores demographics but some were provided".into()
            } else {
                "model fuses demographics but none were provided".into()
            }));
        }
        Ok(ModelScorer {
            model,
            demographics,
        })
    }
}

impl PdScorer for ModelScorer<'_> {
    fn pd_probability(&self, volume: &Volume) -> Result<f64> {
        let (x, y, z) = volume.extents();
        let volumes = Tensor::new(&[1, x, y, z, 1], volume.voxels().to_vec())?;
        let demo = self
            .demographics
            .map(|d| Tensor::new(&[1, 2], d.to_vec()))
            .transpose()?;
        let logits = self.model.forward_inference(&volumes, demo.as_ref())?;
        let probs = softmax(&logits)?;
        Ok(probs.data()[1] as f64)
    }
}

/// Per-voxel mean change in P(PD) when an occlusion box covers the voxel:
/// (probability of occluded input) − (probability of original input).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    deltas: Volume,
}

impl Heatmap {
    pub fn extents(&self) -> (usize, usize, usize) {
        self.deltas.extents()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.deltas.get(x, y, z)
    }

    pub fn volume(&self) -> &Volume {
        &self.deltas
    }

    pub fn from_volume(deltas: Volume) -> Self {
        Heatmap { deltas }
    }

    /// Persists the deltas as an MVOL volume.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_volume(&self.deltas, path)
    }
}

/// Sweeps a `box_extent`³ zero-box across the volume at the given stride
/// (origins 0, stride, 2·stride, …; boxes clipped at the borders), scoring
/// each occluded copy once. Every voxel's value is the mean Δ over the
/// boxes that covered it; voxels no box reaches (stride > box) stay 0.
pub fn occlusion_heatmap(
    scorer: &dyn PdScorer,
    volume: &Volume,
    box_extent: usize,
    stride: usize,
) -> Result<Heatmap> {
    let (ex, ey, ez) = volume.extents();
    if box_extent < 1 {
        return Err(Error::InvalidArgument("occlusion box must be >= 1".into()));
    }
    if stride < 1 {
        return Err(Error::InvalidArgument(
            "occlusion stride must be >= 1".into(),
        ));
    }
    if box_extent > ex.min(ey).min(ez) {
        return Err(Error::InvalidArgument(format!(
            "occlusion box {box_extent} exceeds volume extents {:?}",
            volume.extents()
        )));
    }

    let baseline = scorer.pd_probability(volume)?;
    let mut scratch = volume.clone();
    let mut sums = vec![0.0f64; volume.numel()];
    let mut counts = vec![0u32; volume.numel()];
    let mut saved: Vec<(usize, f32)> = Vec::with_capacity(box_extent.pow(3));

    for ox in (0..ex).step_by(stride) {
        for oy in (0..ey).step_by(stride) {
            for oz in (0..ez).step_by(stride) {
                let (x1, y1, z1) = (
                    (ox + box_extent).min(ex),
                    (oy + box_extent).min(ey),
                    (oz + box_extent).min(ez),
                );
                saved.clear();
                for x in ox..x1 {
                    for y in oy..y1 {
                        for z in oz..z1 {
                            let i = scratch.index(x, y, z);
                            saved.push((i, scratch.voxels()[i]));
                            scratch.voxels_mut()[i] = 0.0;
                        }
                    }
                }
                let delta = scorer.pd_probability(&scratch)? - baseline;
                for &(i, v) in &saved {
                    sums[i] += delta;
                    counts[i] += 1;
                    scratch.voxels_mut()[i] = v;
                }
            }
        }
    }

    let deltas: Vec<f32> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect();
    Ok(Heatmap {
        deltas: Volume::new(volume.extents(), deltas)?,
    })
}

/// Anatomical slicing planes. X is the left–right (hemisphere) axis, so a
/// sagittal slice fixes X, coronal fixes Y, axial fixes Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Sagittal,
    Coronal,
    Axial,
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sagittal" => Ok(Plane::Sagittal),
            "coronal" => Ok(Plane::Coronal),
            "axial" => Ok(Plane::Axial),
            other => Err(Error::InvalidArgument(format!(
                "unknown plane {other:?} (expected sagittal|coronal|axial)"
            ))),
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
            Plane::Axial => "axial",
        })
    }
}

/// Writes one slice as a binary PGM (P5), linearly rescaled so the slice
/// minimum maps to 0 and the maximum to 255; a constant slice maps to 128.
pub fn export_slice(heatmap: &Heatmap, plane: Plane, index: usize, path: &Path) -> Result<()> {
    let (ex, ey, ez) = heatmap.extents();
    let (limit, rows, cols) = match plane {
        Plane::Sagittal => (ex, ey, ez),
        Plane::Coronal => (ey, ex, ez),
        Plane::Axial => (ez, ex, ey),
    };
    if index >= limit {
        return Err(Error::InvalidArgument(format!(
            "{plane} index {index} out of range for extent {limit}"
        )));
    }

    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            values.push(match plane {
                Plane::Sagittal => heatmap.get(index, r, c),
                Plane::Coronal => heatmap.get(r, index, c),
                Plane::Axial => heatmap.get(r, c, index),
            });
        }
    }
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);

    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| {
        if max > min {
            ((v - min) as f64 / (max - min) as f64 * 255.0).round() as u8
        } else {
            128
        }
    }));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
