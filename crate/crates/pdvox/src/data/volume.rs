//! Brain volumes and the MVOL container format.
//!
//! MVOL layout, bit-exact: magic `MVL1`, three unsigned 32-bit little-endian
//! extents X,Y,Z (sagittal, coronal, axial), then X·Y·Z IEEE-754 little-endian
//! 32-bit floats with X slowest and Z fastest.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MVL1";
const HEADER_LEN: usize = 16;

/// A single scan: extents plus a flat finite voxel buffer, X slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: (usize, usize, usize),
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: (usize, usize, usize), voxels: Vec<f32>) -> Result<Self> {
        let (x, y, z) = extents;
        if x == 0 || y == 0 || z == 0 {
            return Err(Error::Data(format!(
                "volume extents must be positive, got {x}x{y}x{z}"
            )));
        }
        let numel = x
            .checked_mul(y)
            .and_then(|v| v.checked_mul(z))
            .ok_or_else(|| Error::Data(format!("volume extents {x}x{y}x{z} overflow")))?;
        if numel != voxels.len() {
            return Err(Error::Data(format!(
                "extents {x}x{y}x{z} describe {numel} voxels, buffer has {}",
                voxels.len()
            )));
        }
        if let Some(bad) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite voxel at index {bad}")));
        }
        Ok(Volume { extents, voxels })
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        self.extents
    }

    pub fn numel(&self) -> usize {
        self.voxels.len()
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    /// Flat index of voxel (x, y, z); x is the slowest axis.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let (_, ye, ze) = self.extents;
        (x * ye + y) * ze + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.index(x, y, z);
        self.voxels[i] = value;
    }

    /// Per-volume z-score over all voxels: mean 0, population std 1.
    /// Statistics are accumulated in double precision.
    pub fn normalize_intensity(&self) -> Result<Volume> {
        let n = self.voxels.len() as f64;
        let mean = self.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .voxels
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        if var == 0.0 {
            return Err(Error::Data(
                "cannot normalize a constant volume (zero intensity variance)".into(),
            ));
        }
        let inv_std = 1.0 / var.sqrt();
        let voxels = self
            .voxels
            .iter()
            .map(|&v| ((v as f64 - mean) * inv_std) as f32)
            .collect();
        Ok(Volume {
            extents: self.extents,
            voxels,
        })
    }

    /// Mirrors the sagittal axis: voxel (x, y, z) moves to (X−1−x, y, z).
    /// Applying it twice returns the original volume bit-exactly.
    pub fn hemisphere_flip(&self) -> Volume {
        let (x, y, z) = self.extents;
        let plane = y * z;
        let mut voxels = Vec::with_capacity(self.voxels.len());
        for xi in (0..x).rev() {
            voxels.extend_from_slice(&self.voxels[xi * plane..(xi + 1) * plane]);
        }
        Volume {
            extents: self.extents,
            voxels,
        }
    }
}

/// Writes `v` to `path` in the MVOL format.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let (x, y, z) = v.extents;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * v.voxels.len());
    buf.extend_from_slice(MAGIC);
    for extent in [x, y, z] {
        let e = u32::try_from(extent)
            .map_err(|_| Error::Data(format!("extent {extent} exceeds the MVOL u32 limit")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for voxel in &v.voxels {
        buf.extend_from_slice(&voxel.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an MVOL file, rejecting bad magic, size mismatches, and non-finite
/// payloads with distinct error kinds.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::MvolBadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::MvolTruncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let mut extents = [0usize; 3];
    for (i, e) in extents.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let [x, y, z] = extents;
    let numel = (x as u64) * (y as u64) * (z as u64);
    let expected = HEADER_LEN as u64 + 4 * numel;
    if bytes.len() as u64 != expected {
        return Err(Error::MvolTruncated {
            path: path.to_path_buf(),
            expected: expected as usize,
            got: bytes.len(),
        });
    }
    let voxels: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(bad) = voxels.iter().position(|v| !v.is_finite()) {
        return Err(Error::MvolNonFinite {
            path: path.to_path_buf(),
            index: bad,
        });
    }
    Volume::new((x, y, z), voxels)
}
