//! Checkpoint container: a directory holding `manifest.json` (config,
//! input extents, demographic statistics, tensor shapes) plus one MVOL
//! file per parameter and running-statistic vector. Byte-deterministic:
//! saving the same model twice produces identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_volume, save_volume, DemoStats, Volume};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    input_extents: (usize, usize, usize),
    demo_stats: DemoStats,
    /// True tensor shapes; the MVOL files store flat (numel, 1, 1) data.
    parameters: BTreeMap<String, Vec<usize>>,
    /// Channel count per normalization layer carrying running statistics.
    norm_channels: BTreeMap<String, usize>,
}

const MANIFEST_FILE: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors";

fn tensor_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(TENSOR_DIR).join(format!("{name}.mvol"))
}

fn write_tensor(dir: &Path, name: &str, tensor: &Tensor<f32>) -> Result<()> {
    let volume = Volume::new((tensor.numel(), 1, 1), tensor.data().to_vec())?;
    save_volume(&volume, &tensor_file(dir, name))
}

fn read_tensor(dir: &Path, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let volume = load_volume(&tensor_file(dir, name))?;
    let expected: usize = shape.iter().product();
    if volume.numel() != expected {
        return Err(Error::Data(format!(
            "checkpoint tensor {name} holds {} values, expected {expected} for shape {shape:?}",
            volume.numel()
        )));
    }
    Tensor::new(shape, volume.voxels().to_vec())
}

/// Writes the model and the demographic statistics it was trained with.
pub fn save_checkpoint(model: &Model<f32>, demo_stats: &DemoStats, dir: &Path) -> Result<()> {
    let tensor_dir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;

    let mut parameters = BTreeMap::new();
    for (name, p) in model.params() {
        parameters.insert(name.clone(), p.shape().to_vec());
        write_tensor(dir, name, p)?;
    }
    let mut norm_channels = BTreeMap::new();
    for (name, state) in &model.norm_states {
        norm_channels.insert(name.clone(), state.running_mean.numel());
        write_tensor(dir, &format!("{name}.running_mean"), &state.running_mean)?;
        write_tensor(dir, &format!("{name}.running_var"), &state.running_var)?;
    }

    let manifest = CheckpointManifest {
        config: model.config().clone(),
        input_extents: model.input_extents(),
        demo_stats: *demo_stats,
        parameters,
        norm_channels,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("cannot encode checkpoint manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Rebuilds the architecture from the manifest and restores every tensor.
pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, DemoStats)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| {
        Error::Data(format!(
            "invalid checkpoint manifest {}: {e}",
            path.display()
        ))
    })?;

    let mut model: Model<f32> = build_model(
        &manifest.config,
        manifest.input_extents,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;

    let built: Vec<&String> = model.params().keys().collect();
    let stored: Vec<&String> = manifest.parameters.keys().collect();
    if built != stored {
        return Err(Error::Data(format!(
            "checkpoint parameters {stored:?} do not match the architecture {built:?}"
        )));
    }
    for (name, shape) in &manifest.parameters {
        let tensor = read_tensor(dir, name, shape)?;
        let slot = model.params_mut().get_mut(name).expect("key checked");
        if slot.shape() != tensor.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor {name} has shape {:?}, architecture expects {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }

    let built_norms: Vec<&String> = model.norm_states.keys().collect();
    let stored_norms: Vec<&String> = manifest.norm_channels.keys().collect();
    if built_norms != stored_norms {
        return Err(Error::Data(format!(
            "checkpoint norm states {stored_norms:?} do not match the architecture {built_norms:?}"
        )));
    }
    for (name, &channels) in &manifest.norm_channels {
        let mean = read_tensor(dir, &format!("{name}.running_mean"), &[channels])?;
        let var = read_tensor(dir, &format!("{name}.running_var"), &[channels])?;
        let state = model.norm_states.get_mut(name).expect("key checked");
        state.running_mean = mean;
        state.running_var = var;
    }

    Ok((model, manifest.demo_stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, synth_generate, SynthSpec};
    use crate::model::{evaluate, train, NormKind, Variant};
    use crate::optim::TrainConfig;

    fn trained_model() -> (
        tempfile::TempDir,
        Model<f32>,
        DemoStats,
        Vec<crate::data::Subject>,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_generate(
            &SynthSpec {
                n_per_class: 3,
                extents: (8, 8, 8),
                signal_strength: 4.0,
                age_effect: 10.0,
                seed: 41,
            },
            dir.path(),
        )
        .unwrap();
        let subjects = load_manifest(&manifest).unwrap();
        let stats = DemoStats::from_subjects(&subjects).unwrap();
        let config = ModelConfig {
            variant: Variant::Simplified,
            norm: NormKind::Batch,
            ..ModelConfig::default()
        };
        let mut model =
            build_model(&config, (8, 8, 8), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        train(
            &mut model,
            &subjects,
            &subjects,
            dir.path(),
            &stats,
            &TrainConfig {
                lr0: 1e-3,
                batch_size: 4,
                max_epochs: 2,
                seed: 43,
                ..TrainConfig::default()
            },
            |_| {},
        )
        .unwrap();
        (dir, model, stats, subjects)
    }

    #[test]
    fn round_trip_restores_everything() {
        let (data_dir, model, stats, subjects) = trained_model();
        let ckpt = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &stats, ckpt.path()).unwrap();
        let (loaded, loaded_stats) = load_checkpoint(ckpt.path()).unwrap();

        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.params(), model.params());
        assert_eq!(loaded_stats, stats);
        for (name, state) in &model.norm_states {
            let restored = &loaded.norm_states[name];
            assert_eq!(restored.running_mean, state.running_mean);
            assert_eq!(restored.running_var, state.running_var);
        }

        // Identical reports, including ROC, after the round trip.
        let before = evaluate(&model, &subjects, data_dir.path(), &stats, 4).unwrap();
        let after = evaluate(&loaded, &subjects, data_dir.path(), &loaded_stats, 4).unwrap();
        assert_eq!(before.to_json().unwrap(), after.to_json().unwrap());
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let (_data_dir, model, stats, _) = trained_model();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &stats, a.path()).unwrap();
        save_checkpoint(&model, &stats, b.path()).unwrap();

        let read = |dir: &Path, rel: &str| fs::read(dir.join(rel)).unwrap();
        assert_eq!(read(a.path(), MANIFEST_FILE), read(b.path(), MANIFEST_FILE));
        assert_eq!(
            read(a.path(), "tensors/conv1.kernel.mvol"),
            read(b.path(), "tensors/conv1.kernel.mvol")
        );
        assert_eq!(
            read(a.path(), "tensors/norm1.running_var.mvol"),
            read(b.path(), "tensors/norm1.running_var.mvol")
        );
    }

    #[test]
    fn load_rejects_missing_or_mismatched_tensors() {
        let (_data_dir, model, stats, _) = trained_model();
        let ckpt = tempfile::tempdir().unwrap();
        save_checkpoint(&model, &stats, ckpt.path()).unwrap();

        assert!(load_checkpoint(&ckpt.path().join("nowhere")).is_err());

        fs::remove_file(tensor_file(ckpt.path(), "fc1.bias")).unwrap();
        assert!(load_checkpoint(ckpt.path()).is_err());
    }
}
