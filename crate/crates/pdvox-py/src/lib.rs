//! Python bindings for the pdvox engine: the volume container, trained-model
//! scoring, occlusion attribution, the classification metrics, synthetic
//! cohort generation, and the full command-line driver callable in-process.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pdvox::data::{
    load_volume, save_volume, synth_generate, DemoStats, Label, Sex, Subject, SynthSpec, Volume,
};
use pdvox::interpret::{occlusion_heatmap as occlusion, ModelScorer, PdScorer};
use pdvox::metrics::{precision_recall_f2 as prf2, roc_auc as auc, ConfusionCounts};
use pdvox::model::{load_checkpoint, Model};

fn py_err(e: pdvox::Error) -> PyErr {
    let msg = e.to_string();
    match e {
        pdvox::Error::InvalidArgument(_) | pdvox::Error::Config(_) => PyValueError::new_err(msg),
        pdvox::Error::Io { .. } | pdvox::Error::MissingVolume { .. } => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

/// A dense 3-D float volume addressed as (x, y, z).
#[pyclass(name = "Volume")]
struct PyVolume {
    inner: Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(extents: (usize, usize, usize), values: Vec<f32>) -> PyResult<Self> {
        Ok(PyVolume {
            inner: Volume::new(extents, values).map_err(py_err)?,
        })
    }

    /// Reads a volume container from disk.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVolume {
            inner: load_volume(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_volume(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn extents(&self) -> (usize, usize, usize) {
        self.inner.extents()
    }

    /// All voxels as a flat list in x-major order.
    fn values(&self) -> Vec<f32> {
        self.inner.voxels().to_vec()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f32> {
        let (ex, ey, ez) = self.inner.extents();
        if x >= ex || y >= ey || z >= ez {
            return Err(PyValueError::new_err(format!(
                "index ({x}, {y}, {z}) outside extents ({ex}, {ey}, {ez})"
            )));
        }
        Ok(self.inner.get(x, y, z))
    }

    /// Z-scores the intensities; models score volumes in this space.
    fn normalized(&self) -> PyResult<Self> {
        Ok(PyVolume {
            inner: self.inner.normalize_intensity().map_err(py_err)?,
        })
    }

    /// Mirrors the volume across the mid-sagittal plane.
    fn hemisphere_flip(&self) -> Self {
        PyVolume {
            inner: self.inner.hemisphere_flip(),
        }
    }

    fn __repr__(&self) -> String {
        let (x, y, z) = self.inner.extents();
        format!("Volume(extents=({x}, {y}, {z}))")
    }
}

/// A trained classifier restored from a checkpoint directory.
#[pyclass(name = "Model")]
struct PyModel {
    model: Model<f32>,
    demo_stats: DemoStats,
}

impl PyModel {
    /// Z-scored [age, sex] when the checkpoint fuses demographics; errors
    /// when the caller's age/sex do not match what the model expects.
    fn encode_demographics(
        &self,
        age: Option<u32>,
        sex: Option<&str>,
    ) -> PyResult<Option<[f32; 2]>> {
        if !self.model.config().use_demographics {
            if age.is_some() || sex.is_some() {
                return Err(PyValueError::new_err(
                    "model ignores demographics: omit age/sex",
                ));
            }
            return Ok(None);
        }
        let age =
            age.ok_or_else(|| PyValueError::new_err("model fuses demographics: age is required"))?;
        let sex: Sex = sex
            .ok_or_else(|| PyValueError::new_err("model fuses demographics: sex is required"))?
            .parse()
            .map_err(|_| PyValueError::new_err("sex must be 'M' or 'F'"))?;
        let query = Subject {
            id: "query".into(),
            volume_path: PathBuf::from("query.mvol"),
            age,
            sex,
            label: Label::Hc,
            flipped: false,
        };
        let encoded = self.demo_stats.encode(&query);
        Ok(Some([encoded[0] as f32, encoded[1] as f32]))
    }
}

#[pymethods]
impl PyModel {
    /// Restores a model and its demographic statistics from a checkpoint
    /// directory written by `pdvox train`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (model, demo_stats) = load_checkpoint(&dir).map_err(py_err)?;
        Ok(PyModel { model, demo_stats })
    }

    #[getter]
    fn extents(&self) -> (usize, usize, usize) {
        self.model.input_extents()
    }

    #[getter]
    fn uses_demographics(&self) -> bool {
        self.model.config().use_demographics
    }

    /// P(PD) for one volume. Intensities are normalized internally, matching
    /// the training-time preprocessing; age/sex are required exactly when the
    /// checkpoint fuses demographics.
    #[pyo3(signature = (volume, age=None, sex=None))]
    fn predict(&self, volume: &PyVolume, age: Option<u32>, sex: Option<&str>) -> PyResult<f64> {
        let demographics = self.encode_demographics(age, sex)?;
        let scorer = ModelScorer::new(&self.model, demographics).map_err(py_err)?;
        let normalized = volume.inner.normalize_intensity().map_err(py_err)?;
        scorer.pd_probability(&normalized).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (x, y, z) = self.model.input_extents();
        format!(
            "Model(extents=({x}, {y}, {z}), uses_demographics={})",
            if self.model.config().use_demographics {
                "True"
            } else {
                "False"
            }
        )
    }
}

/// Mean P(PD) shift from zeroing a sliding box, one value per voxel, as a
/// Volume. The input is normalized first, so the zeros sit in the same
/// space the model scores.
#[pyfunction]
#[pyo3(signature = (model, volume, box_extent=2, stride=1, age=None, sex=None))]
fn occlusion_heatmap(
    model: &PyModel,
    volume: &PyVolume,
    box_extent: usize,
    stride: usize,
    age: Option<u32>,
    sex: Option<&str>,
) -> PyResult<PyVolume> {
    let demographics = model.encode_demographics(age, sex)?;
    let scorer = ModelScorer::new(&model.model, demographics).map_err(py_err)?;
    let normalized = volume.inner.normalize_intensity().map_err(py_err)?;
    let heat = occlusion(&scorer, &normalized, box_extent, stride).map_err(py_err)?;
    Ok(PyVolume {
        inner: heat.volume().clone(),
    })
}

/// Writes a paired synthetic cohort (volumes plus manifest.csv) under
/// `out_dir` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_per_class=10, extents=(16, 20, 20), signal_strength=4.0, age_effect=10.0, seed=0))]
fn synth(
    out_dir: PathBuf,
    n_per_class: usize,
    extents: (usize, usize, usize),
    signal_strength: f64,
    age_effect: f64,
    seed: u64,
) -> PyResult<String> {
    let spec = SynthSpec {
        n_per_class,
        extents,
        signal_strength,
        age_effect,
        seed,
    };
    let manifest = synth_generate(&spec, &out_dir).map_err(py_err)?;
    Ok(manifest.display().to_string())
}

/// Precision, recall, and the recall-weighted F2 score from raw counts.
#[pyfunction]
#[pyo3(signature = (tp, tn, fp, fn_))]
fn precision_recall_f2(tp: usize, tn: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    prf2(&ConfusionCounts { tp, tn, fp, fn_ })
}

/// Area under the ROC curve. Labels are "HC"/"PD"; higher scores mean
/// more PD-like.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<String>) -> PyResult<f64> {
    let truth: Vec<Label> = labels
        .iter()
        .map(|s| s.parse::<Label>())
        .collect::<Result<_, _>>()
        .map_err(py_err)?;
    let (_, a) = auc(&scores, &truth).map_err(py_err)?;
    Ok(a)
}

/// Per-axis half-open index ranges of the synthetic deficit's bounding box
/// at the given extents.
#[pyfunction]
fn lesion_bounds(
    extents: (usize, usize, usize),
) -> ((usize, usize), (usize, usize), (usize, usize)) {
    pdvox::data::lesion_bounds(extents)
}

/// Runs the command-line driver in-process (synth/split/train/eval/heatmap/
/// search) and returns its exit code.
#[pyfunction]
fn run(args: Vec<String>) -> u8 {
    pdvox::cli::run(&args)
}

#[pymodule]
fn pdvox_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(occlusion_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall_f2, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(lesion_bounds, m)?)?;
    Ok(())
}
