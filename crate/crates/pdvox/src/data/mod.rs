//! Dataset handling: subject manifests, hemisphere-flip augmentation,
//! stratified train/dev/test splitting, demographic encoding, batching,
//! and synthetic dataset generation.

mod synth;
mod volume;

pub use synth::{lesion_bounds, lesion_center, lesion_sigma, synth_generate, SynthSpec};
pub use volume::{load_volume, save_volume, Volume};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Subject sex; encoded as F = 0, M = 1 when fed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sex {
    F,
    M,
}

impl Sex {
    pub fn encoded(self) -> f64 {
        match self {
            Sex::F => 0.0,
            Sex::M => 1.0,
        }
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(Sex::F),
            "M" => Ok(Sex::M),
            other => Err(Error::Data(format!("unknown sex token {other:?}"))),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::F => "F",
            Sex::M => "M",
        })
    }
}

/// Diagnosis label. PD is the positive class everywhere (class index 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Hc,
    Pd,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Hc => 0,
            Label::Pd => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Hc),
            1 => Some(Label::Pd),
            _ => None,
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HC" => Ok(Label::Hc),
            "PD" => Ok(Label::Pd),
            other => Err(Error::Data(format!("unknown label token {other:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Hc => "HC",
            Label::Pd => "PD",
        })
    }
}

/// One sample: a scan on disk plus its demographic fields. `flipped` marks
/// augmented copies; they share the source subject's id.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub volume_path: PathBuf,
    pub age: u32,
    pub sex: Sex,
    pub label: Label,
    pub flipped: bool,
}

const MANIFEST_HEADER: [&str; 5] = ["id", "path", "age", "sex", "label"];
pub const MAX_AGE: u32 = 120;

/// Parses a manifest CSV (`id,path,age,sex,label`) into subjects.
/// Malformed rows are rejected with their 1-based data row number.
pub fn load_manifest(path: &Path) -> Result<Vec<Subject>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => {
            Error::Data(format!("cannot open manifest {}: {e}", path.display()))
        }
        _ => Error::Data(format!("cannot parse manifest {}: {e}", path.display())),
    })?;
    let row_err = |row: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        row,
        message,
    };

    let headers = reader
        .headers()
        .map_err(|e| row_err(0, format!("missing header: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(row_err(
            0,
            format!(
                "header must be {}, got {}",
                MANIFEST_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut subjects = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| row_err(row, e.to_string()))?;
        if record.len() != MANIFEST_HEADER.len() {
            return Err(row_err(
                row,
                format!("expected 5 fields, got {}", record.len()),
            ));
        }
        let id = record[0].trim();
        if id.is_empty() {
            return Err(row_err(row, "empty id".into()));
        }
        let age: u32 = record[2]
            .trim()
            .parse()
            .map_err(|_| row_err(row, format!("invalid age {:?}", &record[2])))?;
        if age > MAX_AGE {
            return Err(row_err(
                row,
                format!("age {age} out of range [0, {MAX_AGE}]"),
            ));
        }
        let sex: Sex = record[3]
            .trim()
            .parse()
            .map_err(|e: Error| row_err(row, e.to_string()))?;
        let label: Label = record[4]
            .trim()
            .parse()
            .map_err(|e: Error| row_err(row, e.to_string()))?;
        subjects.push(Subject {
            id: id.to_string(),
            volume_path: PathBuf::from(record[1].trim()),
            age,
            sex,
            label,
            flipped: false,
        });
    }
    Ok(subjects)
}

/// Writes subjects as a manifest CSV. Only original scans belong in a
/// manifest; flipped copies are an in-memory augmentation artifact.
pub fn write_manifest(subjects: &[Subject], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write manifest {}: {e}", path.display())))?;
    writer
        .write_record(MANIFEST_HEADER)
        .and_then(|_| {
            for s in subjects {
                writer.write_record([
                    s.id.as_str(),
                    &s.volume_path.to_string_lossy(),
                    &s.age.to_string(),
                    &s.sex.to_string(),
                    &s.label.to_string(),
                ])?;
            }
            writer.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::Data(format!("cannot write manifest {}: {e}", path.display())))
}

/// Doubles the dataset: every subject is followed (after all originals) by a
/// hemisphere-flipped copy sharing its id, age, sex, and label.
pub fn augment(subjects: &[Subject]) -> Vec<Subject> {
    let mut out = Vec::with_capacity(subjects.len() * 2);
    out.extend_from_slice(subjects);
    out.extend(subjects.iter().map(|s| Subject {
        flipped: true,
        ..s.clone()
    }));
    out
}

/// Which of the three splits a subject landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

/// A train/dev/test partition, disjoint by subject id.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Subject>,
    pub dev: Vec<Subject>,
    pub test: Vec<Subject>,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

/// Largest-remainder apportionment of `n` into the three fractions; ties go
/// to the earlier split (train, dev, test order). Sums exactly to `n`.
fn apportion(n: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fs = [fractions.0, fractions.1, fractions.2];
    let mut sizes = [0usize; 3];
    let mut remainders = [(0.0f64, 0usize); 3];
    let mut used = 0;
    for i in 0..3 {
        let quota = n as f64 * fs[i];
        sizes[i] = quota.floor() as usize;
        used += sizes[i];
        remainders[i] = (quota - quota.floor(), i);
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(n - used) {
        sizes[i] += 1;
    }
    sizes
}

/// Splits subjects into train/dev/test, stratified by label and grouped by
/// subject id so an original and its flipped copy always land together.
/// Per-class sizes follow largest-remainder apportionment; membership is a
/// seeded shuffle, so the same seed always reproduces the same split.
pub fn stratified_split(
    subjects: &[Subject],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let fs = [fractions.0, fractions.1, fractions.2];
    if fs.iter().any(|&f| f <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions must all be positive, got {fractions:?}"
        )));
    }
    if (fs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }

    // Unique ids in first-appearance order, labelled by their first record.
    let mut ids: Vec<(&str, Label)> = Vec::new();
    let mut seen: std::collections::HashSet<&str> = std::collections::HashSet::new();
    for s in subjects {
        if seen.insert(s.id.as_str()) {
            ids.push((s.id.as_str(), s.label));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: BTreeMap<&str, SplitName> = BTreeMap::new();
    for class in [Label::Hc, Label::Pd] {
        let mut class_ids: Vec<&str> = ids
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(id, _)| *id)
            .collect();
        class_ids.shuffle(&mut rng);
        let sizes = apportion(class_ids.len(), fractions);
        let mut cursor = class_ids.into_iter();
        for (count, name) in
            sizes
                .into_iter()
                .zip([SplitName::Train, SplitName::Dev, SplitName::Test])
        {
            for id in cursor.by_ref().take(count) {
                assignment.insert(id, name);
            }
        }
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        fractions,
        seed,
    };
    for s in subjects {
        match assignment[s.id.as_str()] {
            SplitName::Train => split.train.push(s.clone()),
            SplitName::Dev => split.dev.push(s.clone()),
            SplitName::Test => split.test.push(s.clone()),
        }
    }
    for (part, name) in [
        (&split.train, "train"),
        (&split.dev, "dev"),
        (&split.test, "test"),
    ] {
        if part.is_empty() {
            return Err(Error::Data(format!(
                "{} subjects are too few to populate the {name} split at fractions {fractions:?}",
                ids.len()
            )));
        }
    }
    Ok(split)
}

/// On-disk record of a split: the seed and fractions that produced it plus
/// each subject id's assignment, enough to reproduce the split exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub fractions: (f64, f64, f64),
    pub assignments: BTreeMap<String, SplitName>,
}

impl SplitRecord {
    pub fn from_split(split: &DatasetSplit) -> Self {
        let mut assignments = BTreeMap::new();
        for (part, name) in [
            (&split.train, SplitName::Train),
            (&split.dev, SplitName::Dev),
            (&split.test, SplitName::Test),
        ] {
            for s in part {
                assignments.insert(s.id.clone(), name);
            }
        }
        SplitRecord {
            seed: split.seed,
            fractions: split.fractions,
            assignments,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot encode split record: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("invalid split record {}: {e}", path.display())))
    }

    /// Re-applies this record to a subject list (original or augmented).
    /// Every subject id must be covered by the record.
    pub fn apply(&self, subjects: &[Subject]) -> Result<DatasetSplit> {
        let mut split = DatasetSplit {
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
            fractions: self.fractions,
            seed: self.seed,
        };
        for s in subjects {
            match self.assignments.get(&s.id) {
                Some(SplitName::Train) => split.train.push(s.clone()),
                Some(SplitName::Dev) => split.dev.push(s.clone()),
                Some(SplitName::Test) => split.test.push(s.clone()),
                None => {
                    return Err(Error::Data(format!(
                        "subject {} is not covered by the split record",
                        s.id
                    )))
                }
            }
        }
        Ok(split)
    }
}

/// Age statistics of the training split, used to z-score the age feature
/// everywhere (dev/test/heatmap inputs reuse the training statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoStats {
    pub age_mean: f64,
    pub age_std: f64,
}

impl DemoStats {
    pub fn from_subjects(subjects: &[Subject]) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Data(
                "cannot compute demographic statistics of an empty set".into(),
            ));
        }
        let n = subjects.len() as f64;
        let mean = subjects.iter().map(|s| s.age as f64).sum::<f64>() / n;
        let var = subjects
            .iter()
            .map(|s| {
                let d = s.age as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        Ok(DemoStats {
            age_mean: mean,
            // A single-age cohort degenerates to z = 0 rather than dividing
            // by zero.
            age_std: if std > 0.0 { std } else { 1.0 },
        })
    }

    /// Model-ready features: [z-scored age, sex with F = 0 / M = 1].
    pub fn encode(&self, subject: &Subject) -> [f64; 2] {
        [
            (subject.age as f64 - self.age_mean) / self.age_std,
            subject.sex.encoded(),
        ]
    }
}

/// One mini-batch of model-ready tensors.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[N, X, Y, Z, 1]`, intensity-normalized, flips applied.
    pub volumes: Tensor<T>,
    /// `[N, 2]`: z-scored age and encoded sex.
    pub demographics: Tensor<T>,
    /// Class indices (HC = 0, PD = 1), one per row.
    pub labels: Vec<usize>,
}

/// Lazily loads one epoch of shuffled batches from disk.
pub struct BatchIter<'a, T> {
    subjects: &'a [Subject],
    root: &'a Path,
    stats: DemoStats,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    extents: Option<(usize, usize, usize)>,
    _marker: std::marker::PhantomData<T>,
}

/// Shuffled mini-batches over `subjects` for one epoch. Volumes load lazily
/// per batch (normalized, flipped where flagged), the final short batch is
/// emitted as-is, and the same `shuffle_seed` always yields the same order.
/// Relative volume paths resolve against `root`.
pub fn batch_iter<'a, T: Scalar>(
    subjects: &'a [Subject],
    root: &'a Path,
    stats: &DemoStats,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<BatchIter<'a, T>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(BatchIter {
        subjects,
        root,
        stats: *stats,
        batch_size,
        order,
        pos: 0,
        extents: None,
        _marker: std::marker::PhantomData,
    })
}

/// Loads, flips, and normalizes one subject's volume.
pub fn load_subject_volume(subject: &Subject, root: &Path) -> Result<Volume> {
    let path = if subject.volume_path.is_absolute() {
        subject.volume_path.clone()
    } else {
        root.join(&subject.volume_path)
    };
    let raw = load_volume(&path).map_err(|e| match e {
        Error::Io { path, source } => Error::MissingVolume {
            subject: subject.id.clone(),
            path,
            message: source.to_string(),
        },
        other => other,
    })?;
    let oriented = if subject.flipped {
        raw.hemisphere_flip()
    } else {
        raw
    };
    oriented
        .normalize_intensity()
        .map_err(|e| Error::Data(format!("subject {}: {e}", subject.id)))
}

impl<T: Scalar> BatchIter<'_, T> {
    fn build_batch(&mut self, indices: &[usize]) -> Result<Batch<T>> {
        let n = indices.len();
        let mut volumes: Vec<T> = Vec::new();
        let mut demographics: Vec<T> = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for &i in indices {
            let subject = &self.subjects[i];
            let vol = load_subject_volume(subject, self.root)?;
            match self.extents {
                None => self.extents = Some(vol.extents()),
                Some(e) if e != vol.extents() => {
                    return Err(Error::Data(format!(
                        "subject {}: volume extents {:?} differ from {:?}",
                        subject.id,
                        vol.extents(),
                        e
                    )))
                }
                _ => {}
            }
            if volumes.is_empty() {
                volumes.reserve(n * vol.numel());
            }
            volumes.extend(vol.voxels().iter().map(|&v| T::from_f64(v as f64)));
            let demo = self.stats.encode(subject);
            demographics.extend(demo.iter().map(|&v| T::from_f64(v)));
            labels.push(subject.label.class_index());
        }
        let (x, y, z) = self.extents.unwrap();
        Ok(Batch {
            volumes: Tensor::new(&[n, x, y, z, 1], volumes)?,
            demographics: Tensor::new(&[n, 2], demographics)?,
            labels,
        })
    }
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.build_batch(&indices))
    }
}
