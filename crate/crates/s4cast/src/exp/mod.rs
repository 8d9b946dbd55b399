//! Experiment orchestration: resolve a grid of (kappa, gamma, seed) cells
//! into runs, execute them with per-cell isolation, pivot the results into
//! tables, and resume interrupted sweeps through content-hashed records.

use crate::model::checkpoint::save_checkpoint;
use crate::model::{Model, ModelConfig, ModelError};
use crate::report::{write_csv, ReportError};
use crate::sim::dataset::{generate_dataset, Dataset, DatasetBundle};
use crate::sim::{SimConfig, SimError};
use crate::train::{
    evaluate, evaluate_lvcf, save_history, train, EvalMode, TrainConfig, TrainError,
};
use crate::util::{sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Declarative description of a sweep: the grid, the templates every cell
/// starts from, and where results land.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kappas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub out_dir: PathBuf,
    /// Also score each run counterfactually (slower).
    #[serde(default)]
    pub counterfactual: bool,
}

impl ExperimentSpec {
    /// The reduced-budget grid matching the headline result table:
    /// kappa in {1,5,10,15,20} by gamma in {2,4,6,8,10}, one seed.
    pub fn desk(out_dir: PathBuf) -> Self {
        Self {
            kappas: vec![1.0, 5.0, 10.0, 15.0, 20.0],
            gammas: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            seeds: vec![0],
            sim: SimConfig::default(),
            train: TrainConfig::desk(),
            model: ModelConfig::default(),
            out_dir,
            counterfactual: false,
        }
    }

    pub fn validate(&self) -> Result<(), ExpError> {
        if self.kappas.is_empty() || self.gammas.is_empty() || self.seeds.is_empty() {
            return Err(ExpError::InvalidSpec(
                "kappa, gamma, and seed lists must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec, ExpError> {
    let text = std::fs::read_to_string(path)?;
    let spec: ExperimentSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

pub fn save_spec(spec: &ExperimentSpec, path: &Path) -> Result<(), ExpError> {
    let mut bytes = serde_json::to_vec_pretty(spec)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Fully resolved configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

/// Apply one grid cell to the experiment spec's templates. Gamma drives both the
/// chemo and radio assignment dials; the seed drives both data generation
/// and training; the model's trade-off weight follows the training config.
pub fn resolve_cell(spec: &ExperimentSpec, kappa: f64, gamma: f64, seed: u64) -> RunConfig {
    let mut sim = spec.sim.clone();
    sim.kappa = kappa;
    sim.gamma_c = gamma;
    sim.gamma_r = gamma;
    sim.seed = seed;
    let mut train = spec.train.clone();
    train.seed = seed;
    train.checkpoint_dir = None;
    let mut model = spec.model.clone();
    model.mu = train.mu;
    RunConfig { sim, train, model }
}

pub fn run_key(kappa: f64, gamma: f64, seed: u64) -> String {
    format!("k{kappa}_g{gamma}_s{seed}")
}

pub fn config_hash(config: &RunConfig) -> Result<String, ExpError> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

/// JSON-safe float: non-finite values are stored as null.
mod nanable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Final metrics of one run, scored on the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(with = "nanable")]
    pub loss_y: f64,
    #[serde(with = "nanable")]
    pub loss_a: f64,
    #[serde(with = "nanable")]
    pub loss_total: f64,
    #[serde(with = "nanable")]
    pub loss_sum: f64,
    #[serde(with = "nanable")]
    pub nrmse: f64,
    #[serde(with = "nanable")]
    pub rmse_treated: f64,
    #[serde(with = "nanable")]
    pub rmse_untreated: f64,
    /// Last-value-carried-forward reference error on the same split.
    #[serde(with = "nanable")]
    pub lvcf_nrmse: f64,
    /// Counterfactual forecast error; NaN when not computed.
    #[serde(with = "nanable")]
    pub cf_nrmse: f64,
    pub epochs_run: usize,
    #[serde(with = "nanable")]
    pub wall_seconds_total: f64,
}

impl RunMetrics {
    pub fn nan() -> Self {
        Self {
            loss_y: f64::NAN,
            loss_a: f64::NAN,
            loss_total: f64::NAN,
            loss_sum: f64::NAN,
            nrmse: f64::NAN,
            rmse_treated: f64::NAN,
            rmse_untreated: f64::NAN,
            lvcf_nrmse: f64::NAN,
            cf_nrmse: f64::NAN,
            epochs_run: 0,
            wall_seconds_total: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kappa: f64,
    pub gamma: f64,
    pub seed: u64,
    pub config_hash: String,
    pub status: RunStatus,
    pub metrics: RunMetrics,
}

/// Pick the split evaluation should run on: test, else val, else train.
pub fn eval_split(bundle: &DatasetBundle) -> &Dataset {
    if !bundle.test.trajectories.is_empty() {
        &bundle.test
    } else if !bundle.val.trajectories.is_empty() {
        &bundle.val
    } else {
        &bundle.train
    }
}

/// Split used for per-epoch metrics during training: val, else train.
pub fn epoch_eval_split(bundle: &DatasetBundle) -> &Dataset {
    if !bundle.val.trajectories.is_empty() {
        &bundle.val
    } else {
        &bundle.train
    }
}

/// Execute one fully resolved run: simulate, train, evaluate, and write
/// `config.json`, `history.csv`, `checkpoint.json` into `dir`.
pub fn run_cell(
    config: &RunConfig,
    dir: &Path,
    counterfactual: bool,
) -> Result<RunMetrics, ExpError> {
    std::fs::create_dir_all(dir)?;
    let mut config_bytes = serde_json::to_vec_pretty(config)?;
    config_bytes.push(b'\n');
    write_atomic(&dir.join("config.json"), &config_bytes)?;

    let bundle = generate_dataset(&config.sim)?;
    let model = Model::init(config.model.clone(), config.train.seed)?;
    let (model, history) = train(
        model,
        &bundle.train,
        epoch_eval_split(&bundle),
        &config.train,
    )?;
    save_history(&history, &dir.join("history.csv"))?;
    save_checkpoint(&model, &dir.join("checkpoint.json"))?;

    let held_out = eval_split(&bundle);
    let report = evaluate(&model, held_out, EvalMode::Factual)?;
    let lvcf = evaluate_lvcf(held_out)?;
    let cf_nrmse = if counterfactual {
        evaluate(&model, held_out, EvalMode::Counterfactual)?.nrmse
    } else {
        f64::NAN
    };
    Ok(RunMetrics {
        loss_y: report.loss_y,
        loss_a: report.loss_a,
        loss_total: report.loss_total,
        loss_sum: report.loss_sum(),
        nrmse: report.nrmse,
        rmse_treated: report.rmse_treated,
        rmse_untreated: report.rmse_untreated,
        lvcf_nrmse: lvcf.nrmse,
        cf_nrmse,
        epochs_run: history.len(),
        wall_seconds_total: history.iter().map(|h| h.wall_seconds).sum(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub records: Vec<RunRecord>,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub results_csv: PathBuf,
}

fn load_record(path: &Path) -> Option<RunRecord> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn save_record(record: &RunRecord, path: &Path) -> Result<(), ExpError> {
    let mut bytes = serde_json::to_vec_pretty(record)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn float_cell(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

/// Run the full grid sequentially. Cells whose `result.json` already holds
/// an Ok record with a matching config hash are skipped; failed cells are
/// recorded with NaN metrics and the sweep continues.
pub fn sweep(spec: &ExperimentSpec) -> Result<SweepSummary, ExpError> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.out_dir)?;
    let mut records = Vec::new();
    let mut completed = 0;
    let mut skipped = 0;
    let mut failed = 0;

    for &kappa in &spec.kappas {
        for &gamma in &spec.gammas {
            for &seed in &spec.seeds {
                let cell = resolve_cell(spec, kappa, gamma, seed);
                let hash = config_hash(&cell)?;
                let key = run_key(kappa, gamma, seed);
                let dir = spec.out_dir.join(&key);
                let result_path = dir.join("result.json");
                if let Some(prev) = load_record(&result_path) {
                    if prev.config_hash == hash && matches!(prev.status, RunStatus::Ok) {
                        records.push(prev);
                        skipped += 1;
                        continue;
                    }
                }
                let record = match run_cell(&cell, &dir, spec.counterfactual) {
                    Ok(metrics) => {
                        completed += 1;
                        RunRecord {
                            kappa,
                            gamma,
                            seed,
                            config_hash: hash,
                            status: RunStatus::Ok,
                            metrics,
                        }
                    }
                    Err(err) => {
                        failed += 1;
                        let message = err.to_string();
                        let _ = std::fs::create_dir_all(&dir);
                        let _ = write_atomic(&dir.join("error.txt"), message.as_bytes());
                        RunRecord {
                            kappa,
                            gamma,
                            seed,
                            config_hash: hash,
                            status: RunStatus::Failed { error: message },
                            metrics: RunMetrics::nan(),
                        }
                    }
                };
                save_record(&record, &result_path)?;
                records.push(record);
            }
        }
    }

    let results_csv = spec.out_dir.join("results.csv");
    write_results_csv(&records, &results_csv)?;
    write_pivot_csv(spec, &records, |m| m.nrmse, &spec.out_dir.join("pivot_nrmse.csv"))?;
    write_pivot_csv(
        spec,
        &records,
        |m| m.loss_sum,
        &spec.out_dir.join("pivot_loss_sum.csv"),
    )?;

    let manifest: BTreeMap<String, String> = records
        .iter()
        .map(|r| {
            let status = match &r.status {
                RunStatus::Ok => "ok".to_string(),
                RunStatus::Failed { .. } => "failed".to_string(),
            };
            (
                run_key(r.kappa, r.gamma, r.seed),
                format!("{}:{}", status, r.config_hash),
            )
        })
        .collect();
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    write_atomic(&spec.out_dir.join("manifest.json"), &manifest_bytes)?;

    Ok(SweepSummary {
        records,
        completed,
        skipped,
        failed,
        results_csv,
    })
}

fn write_results_csv(records: &[RunRecord], path: &Path) -> Result<(), ExpError> {
    let header: Vec<String> = [
        "kappa",
        "gamma",
        "seed",
        "status",
        "loss_y",
        "loss_a",
        "loss_total",
        "loss_sum",
        "nrmse",
        "rmse_treated",
        "rmse_untreated",
        "lvcf_nrmse",
        "cf_nrmse",
        "epochs",
        "wall_seconds",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let status = match &r.status {
                RunStatus::Ok => "ok".to_string(),
                RunStatus::Failed { error } => format!("failed: {error}"),
            };
            vec![
                float_cell(r.kappa),
                float_cell(r.gamma),
                r.seed.to_string(),
                status,
                float_cell(r.metrics.loss_y),
                float_cell(r.metrics.loss_a),
                float_cell(r.metrics.loss_total),
                float_cell(r.metrics.loss_sum),
                float_cell(r.metrics.nrmse),
                float_cell(r.metrics.rmse_treated),
                float_cell(r.metrics.rmse_untreated),
                float_cell(r.metrics.lvcf_nrmse),
                float_cell(r.metrics.cf_nrmse),
                r.metrics.epochs_run.to_string(),
                float_cell(r.metrics.wall_seconds_total),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)?;
    Ok(())
}

/// Kappa rows by gamma columns; cells average the metric over seeds of
/// successful runs, NaN when a cell has none.
fn write_pivot_csv(
    spec: &ExperimentSpec,
    records: &[RunRecord],
    metric: impl Fn(&RunMetrics) -> f64,
    path: &Path,
) -> Result<(), ExpError> {
    let mut header = vec!["kappa".to_string()];
    header.extend(spec.gammas.iter().map(|g| format!("gamma_{g}")));
    let mut rows = Vec::with_capacity(spec.kappas.len());
    for &kappa in &spec.kappas {
        let mut row = vec![float_cell(kappa)];
        for &gamma in &spec.gammas {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| {
                    r.kappa == kappa && r.gamma == gamma && matches!(r.status, RunStatus::Ok)
                })
                .map(|r| metric(&r.metrics))
                .filter(|v| v.is_finite())
                .collect();
            let cell = if values.is_empty() {
                f64::NAN
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            };
            row.push(float_cell(cell));
        }
        rows.push(row);
    }
    write_csv(path, &header, &rows)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Layers,
    Latent,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layers" => Some(Self::Layers),
            "latent" => Some(Self::Latent),
            _ => None,
        }
    }

    pub fn column_name(self) -> &'static str {
        match self {
            Self::Layers => "layers",
            Self::Latent => "latent_dim",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: usize,
    pub treatment_loss: f64,
    pub outcome_loss: f64,
    pub total_loss: f64,
}

/// Vary one architecture axis with everything else held fixed, training a
/// fresh model per setting on one shared dataset. `total_loss` is the
/// unsigned combination (outcome MSE plus treatment cross-entropy).
pub fn ablate(
    base: &RunConfig,
    axis: AblationAxis,
    values: &[usize],
    out_dir: &Path,
) -> Result<Vec<AblationRow>, ExpError> {
    if values.is_empty() {
        return Err(ExpError::InvalidSpec("no ablation values".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let bundle = generate_dataset(&base.sim)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut model_config = base.model.clone();
        match axis {
            AblationAxis::Layers => model_config.layers = value,
            AblationAxis::Latent => model_config.latent_dim = value,
        }
        let model = Model::init(model_config, base.train.seed)?;
        let (model, history) = train(
            model,
            &bundle.train,
            epoch_eval_split(&bundle),
            &base.train,
        )?;
        let dir = out_dir.join(format!("{}_{value}", axis.column_name()));
        std::fs::create_dir_all(&dir)?;
        save_history(&history, &dir.join("history.csv"))?;
        save_checkpoint(&model, &dir.join("checkpoint.json"))?;
        let report = evaluate(&model, eval_split(&bundle), EvalMode::Factual)?;
        rows.push(AblationRow {
            value,
            treatment_loss: report.loss_a,
            outcome_loss: report.loss_y,
            total_loss: report.loss_sum(),
        });
    }
    let header: Vec<String> = [
        axis.column_name(),
        "treatment_loss",
        "outcome_loss",
        "total_loss",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.value.to_string(),
                float_cell(r.treatment_loss),
                float_cell(r.outcome_loss),
                float_cell(r.total_loss),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join(format!("ablate_{}.csv", axis.column_name())),
        &header,
        &csv_rows,
    )?;
    Ok(rows)
}
