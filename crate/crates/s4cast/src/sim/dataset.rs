//! Observed datasets: latent paths subsampled at the irregular observation
//! times, split into train/val/test, normalized on the training split, and
//! serialized as JSON Lines with a self-describing header.

use super::hawkes::hawkes_sample;
use super::{patient_rng, simulate_latent, SimConfig, SimError, StreamPurpose};
use crate::util::write_atomic;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// Lower clamp on the normalization scale.
pub const MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// Affine volume normalization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let vals: Vec<f64> = values.collect();
        assert!(!vals.is_empty(), "cannot fit normalization on no values");
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(MIN_STD),
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// One patient's observed record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTrajectory {
    pub patient_index: usize,
    /// Strictly increasing observation times in days, starting at 0.
    pub obs_times: Vec<f64>,
    /// Tumor volume (cm^3) at each observation.
    pub volumes: Vec<f64>,
    /// Tumor diameter (cm), derived from volume.
    pub diameters: Vec<f64>,
    /// Cancer stage 1-4 at each observation.
    pub stages: Vec<u8>,
    /// Whether chemo was active on the day of each observation (0/1).
    pub chemo: Vec<u8>,
    /// Whether radio was active on the day of each observation (0/1).
    pub radio: Vec<u8>,
    /// Per-observation covariate vector: [diameter, initial diameter].
    pub covariates: Vec<Vec<f64>>,
    /// Static feature: diameter at entry, cm.
    pub initial_diameter_cm: f64,
}

impl PatientTrajectory {
    pub fn len(&self) -> usize {
        self.obs_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs_times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: SplitTag,
    pub config: SimConfig,
    pub normalization: Normalization,
    pub trajectories: Vec<PatientTrajectory>,
}

/// The three splits produced by one generation run. Normalization is fitted
/// on train and shared by all three.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetBundle {
    pub fn get(&self, split: SplitTag) -> &Dataset {
        match split {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }
}

/// Train/val/test patient counts under the 8:1:1 split rule.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n * 8 / 10).max(1).min(n);
    let val = (n / 10).min(n - train);
    let test = n - train - val;
    (train, val, test)
}

/// Simulate one patient and subsample it at self-excited observation times
/// snapped to the nearest latent grid point (duplicates collapsed).
pub fn observe_patient(
    config: &SimConfig,
    patient_index: usize,
) -> Result<PatientTrajectory, SimError> {
    let path = simulate_latent(config, patient_index, None)?;
    let mut obs_rng = patient_rng(config, patient_index, StreamPurpose::Observation);
    let raw_times = hawkes_sample(
        &path.stages,
        config.dt_sim,
        config.kappa,
        config.horizon,
        &config.hawkes,
        &mut obs_rng,
    )?;
    let mut indices: Vec<usize> = raw_times
        .iter()
        .map(|t| path.nearest_index(*t, config.dt_sim))
        .collect();
    indices.dedup();

    let mut traj = PatientTrajectory {
        patient_index,
        obs_times: Vec::with_capacity(indices.len()),
        volumes: Vec::with_capacity(indices.len()),
        diameters: Vec::with_capacity(indices.len()),
        stages: Vec::with_capacity(indices.len()),
        chemo: Vec::with_capacity(indices.len()),
        radio: Vec::with_capacity(indices.len()),
        covariates: Vec::with_capacity(indices.len()),
        initial_diameter_cm: path.initial_diameter_cm,
    };
    for idx in indices {
        let volume = path.volumes[idx];
        let diameter = super::sphere_diameter(volume);
        traj.obs_times.push(path.times[idx]);
        traj.volumes.push(volume);
        traj.diameters.push(diameter);
        traj.stages.push(path.stages[idx]);
        traj.chemo.push(u8::from(path.chemo_active[idx]));
        traj.radio.push(u8::from(path.radio_active[idx]));
        traj.covariates
            .push(vec![diameter, path.initial_diameter_cm]);
    }
    Ok(traj)
}

/// Generate the full cohort and split it 8:1:1 by patient index.
pub fn generate_dataset(config: &SimConfig) -> Result<DatasetBundle, SimError> {
    config.validate()?;
    let (n_train, n_val, _) = split_sizes(config.n);
    let mut all = Vec::with_capacity(config.n);
    for patient in 0..config.n {
        all.push(observe_patient(config, patient)?);
    }
    let test_rows = all.split_off(n_train + n_val);
    let val_rows = all.split_off(n_train);
    let train_rows = all;

    let normalization =
        Normalization::fit(train_rows.iter().flat_map(|t| t.volumes.iter().copied()));
    let make = |split, trajectories| Dataset {
        split,
        config: config.clone(),
        normalization: normalization.clone(),
        trajectories,
    };
    Ok(DatasetBundle {
        train: make(SplitTag::Train, train_rows),
        val: make(SplitTag::Val, val_rows),
        test: make(SplitTag::Test, test_rows),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    split: SplitTag,
    config: SimConfig,
    normalization: Normalization,
    count: usize,
}

/// Write one split as JSON Lines: a header line, then one trajectory per line.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), SimError> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        split: dataset.split,
        config: dataset.config.clone(),
        normalization: dataset.normalization.clone(),
        count: dataset.trajectories.len(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for traj in &dataset.trajectories {
        out.extend_from_slice(&serde_json::to_vec(traj)?);
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, SimError> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines();
    let header_line = lines.next().ok_or_else(|| SimError::Malformed {
        path: display.clone(),
        reason: "empty file".into(),
    })?;
    let header: Header = serde_json::from_str(header_line)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(SimError::Malformed {
            path: display.clone(),
            reason: format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                header.schema_version
            ),
        });
    }
    let mut trajectories = Vec::with_capacity(header.count);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        trajectories.push(serde_json::from_str(line)?);
    }
    if trajectories.len() != header.count {
        return Err(SimError::Malformed {
            path: display,
            reason: format!(
                "expected {} trajectories, found {}",
                header.count,
                trajectories.len()
            ),
        });
    }
    Ok(Dataset {
        split: header.split,
        config: header.config,
        normalization: header.normalization,
        trajectories,
    })
}

/// Standard file names for the three splits inside a dataset directory.
pub fn split_file_name(split: SplitTag) -> &'static str {
    match split {
        SplitTag::Train => "train.jsonl",
        SplitTag::Val => "val.jsonl",
        SplitTag::Test => "test.jsonl",
    }
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<(), SimError> {
    for split in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
        save_dataset(bundle.get(split), &dir.join(split_file_name(split)))?;
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle, SimError> {
    Ok(DatasetBundle {
        train: load_dataset(&dir.join(split_file_name(SplitTag::Train)))?,
        val: load_dataset(&dir.join(split_file_name(SplitTag::Val)))?,
        test: load_dataset(&dir.join(split_file_name(SplitTag::Test)))?,
    })
}
