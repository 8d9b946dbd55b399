//! Command-line interface: simulate cohorts, train models, sweep grids,
//! run ablations, and render plots. Exit codes: 0 success, 2 validation
//! error, 3 runtime or numeric failure.

use crate::exp::{
    ablate, epoch_eval_split, eval_split, load_spec, resolve_cell, sweep, AblationAxis,
    ExperimentSpec, RunConfig,
};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{AdversarialMode, Model, ModelConfig};
use crate::report::{bar_chart_svg, line_plot_svg, read_history_csv, BarGroup, PlotConfig, Series};
use crate::sim::dataset::{generate_dataset, load_bundle, save_bundle, split_file_name, SplitTag};
use crate::sim::SimConfig;
use crate::train::{
    evaluate, evaluate_lvcf, save_history, train, EvalMode, LossReport, TrainConfig,
};
use crate::util::{sha256_hex, write_atomic};
use clap::{Args, Parser, Subcommand};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable that relocates relative output paths.
pub const OUT_ROOT_ENV: &str = "S4CAST_OUT_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn validation(err: impl Display) -> CliError {
    CliError::Validation(err.to_string())
}

fn runtime(err: impl Display) -> CliError {
    CliError::Runtime(err.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "s4cast",
    version,
    about = "Tumor-growth forecasting under irregular sampling and confounded treatment, \
             built on state-space sequence models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic patient cohort as train/val/test JSONL files.
    Simulate(SimulateArgs),
    /// Train a forecasting model on a simulated dataset directory.
    Train(TrainArgs),
    /// Run a (kappa, gamma, seed) grid from an experiment spec file.
    Sweep(SweepArgs),
    /// Vary one architecture axis with everything else held fixed.
    Ablate(AblateArgs),
    /// Render SVG plots from completed run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of patients.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Chemotherapy assignment confounding strength.
    #[arg(long = "gamma-c", default_value_t = 0.0)]
    pub gamma_c: f64,
    /// Radiotherapy assignment confounding strength.
    #[arg(long = "gamma-r", default_value_t = 0.0)]
    pub gamma_r: f64,
    /// Observation-intensity dial (>= 1).
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    /// Days simulated per patient.
    #[arg(long, default_value_t = 60.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the dataset files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory produced by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for history, checkpoints, and config.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Trade-off weight between outcome and treatment losses.
    #[arg(long, default_value_t = 0.5)]
    pub mu: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "lr-ssm")]
    pub lr_ssm: Option<f64>,
    #[arg(long = "lr-other")]
    pub lr_other: Option<f64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Truncate training sequences to this many observations.
    #[arg(long = "max-len")]
    pub max_len: Option<usize>,
    /// Number of stacked sequence layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Latent width of the trunk.
    #[arg(long)]
    pub latent: Option<usize>,
    /// State size of each scalar state-space channel.
    #[arg(long = "state-size")]
    pub state_size: Option<usize>,
    /// Use the full-budget profile (50 epochs, reference learning rates)
    /// instead of the reduced desk profile.
    #[arg(long = "paper-scale")]
    pub paper_scale: bool,
    /// Report wall_seconds as 0.0 so reruns are byte-identical.
    #[arg(long = "fixed-timing")]
    pub fixed_timing: bool,
    /// Couple the treatment head through the joint objective instead of
    /// gradient reversal.
    #[arg(long = "joint-objective")]
    pub joint_objective: bool,
    /// Additionally score the trained model counterfactually.
    #[arg(long)]
    pub counterfactual: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Experiment spec JSON file.
    #[arg(long)]
    pub spec: PathBuf,
    /// Override the spec file's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the default desk-scale spec to --spec and exit.
    #[arg(long = "write-default-spec")]
    pub write_default_spec: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Axis to vary: layers | latent.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated settings for the axis.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    /// Confounding strength applied to both treatment dials.
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "paper-scale")]
    pub paper_scale: bool,
    #[arg(long = "fixed-timing")]
    pub fixed_timing: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Completed run directories (each containing history.csv).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Directory for the emitted SVG files.
    #[arg(long)]
    pub out: PathBuf,
    /// Use a linear y axis instead of the default log scale.
    #[arg(long)]
    pub linear: bool,
}

/// Resolve an output path against a root directory: absolute paths pass
/// through, relative ones land under the root.
pub fn resolve_out_with_root(path: &Path, root: Option<&str>) -> PathBuf {
    match root {
        Some(root) if path.is_relative() => Path::new(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn resolve_out(path: &Path) -> PathBuf {
    let root = std::env::var(OUT_ROOT_ENV).ok();
    resolve_out_with_root(path, root.as_deref())
}

fn base_train_config(paper_scale: bool) -> TrainConfig {
    if paper_scale {
        TrainConfig::default()
    } else {
        TrainConfig::desk()
    }
}

fn json_number(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn report_json(report: &LossReport, lvcf_nrmse: f64, cf_nrmse: Option<f64>) -> serde_json::Value {
    let mut obj = serde_json::json!({
        "epoch": report.epoch,
        "loss_y": json_number(report.loss_y),
        "loss_a": json_number(report.loss_a),
        "loss_total": json_number(report.loss_total),
        "loss_sum": json_number(report.loss_sum()),
        "nrmse": json_number(report.nrmse),
        "rmse_treated": json_number(report.rmse_treated),
        "rmse_untreated": json_number(report.rmse_untreated),
        "lvcf_nrmse": json_number(lvcf_nrmse),
    });
    if let Some(cf) = cf_nrmse {
        obj["cf_nrmse"] = json_number(cf);
    }
    obj
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let config = SimConfig {
        n: args.n,
        gamma_c: args.gamma_c,
        gamma_r: args.gamma_r,
        kappa: args.kappa,
        horizon: args.horizon,
        seed: args.seed,
        ..SimConfig::default()
    };
    config.validate().map_err(validation)?;
    let out = resolve_out(&args.out);
    let bundle = generate_dataset(&config).map_err(runtime)?;
    std::fs::create_dir_all(&out).map_err(runtime)?;
    save_bundle(&bundle, &out).map_err(runtime)?;

    let config_json = serde_json::to_vec(&config).map_err(runtime)?;
    let manifest = serde_json::json!({
        "config": config,
        "config_hash": sha256_hex(&config_json),
        "files": [
            split_file_name(SplitTag::Train),
            split_file_name(SplitTag::Val),
            split_file_name(SplitTag::Test),
        ],
        "counts": {
            "train": bundle.train.trajectories.len(),
            "val": bundle.val.trajectories.len(),
            "test": bundle.test.trajectories.len(),
        },
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(runtime)?;
    bytes.push(b'\n');
    write_atomic(&out.join("manifest.json"), &bytes).map_err(runtime)?;
    println!(
        "wrote {} patients ({}/{}/{}) to {}",
        args.n,
        bundle.train.trajectories.len(),
        bundle.val.trajectories.len(),
        bundle.test.trajectories.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&args.data).map_err(validation)?;
    let out = resolve_out(&args.out);

    let mut train_config = base_train_config(args.paper_scale);
    if let Some(v) = args.epochs {
        train_config.epochs = v;
    }
    if let Some(v) = args.lr_ssm {
        train_config.lr_ssm = v;
    }
    if let Some(v) = args.lr_other {
        train_config.lr_other = v;
    }
    if let Some(v) = args.batch_size {
        train_config.batch_size = v;
    }
    if let Some(v) = args.max_len {
        train_config.max_len = v;
    }
    train_config.mu = args.mu;
    train_config.seed = args.seed;
    train_config.fixed_timing = args.fixed_timing;
    train_config.checkpoint_dir = Some(out.join("checkpoints"));
    train_config.validate().map_err(validation)?;

    let mut model_config = ModelConfig {
        mu: args.mu,
        ..ModelConfig::default()
    };
    if let Some(v) = args.layers {
        model_config.layers = v;
    }
    if let Some(v) = args.latent {
        model_config.latent_dim = v;
    }
    if let Some(v) = args.state_size {
        model_config.state_size = v;
    }
    if args.joint_objective {
        model_config.adversarial_mode = AdversarialMode::JointObjective;
    }
    model_config.validate().map_err(validation)?;

    std::fs::create_dir_all(&out).map_err(runtime)?;
    if let Some(dir) = &train_config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(runtime)?;
    }
    let run_config = RunConfig {
        sim: bundle.train.config.clone(),
        train: train_config.clone(),
        model: model_config.clone(),
    };
    let mut config_bytes = serde_json::to_vec_pretty(&run_config).map_err(runtime)?;
    config_bytes.push(b'\n');
    write_atomic(&out.join("config.json"), &config_bytes).map_err(runtime)?;

    let model = Model::init(model_config, args.seed).map_err(validation)?;
    let (model, history) = train(
        model,
        &bundle.train,
        epoch_eval_split(&bundle),
        &train_config,
    )
    .map_err(runtime)?;
    save_history(&history, &out.join("history.csv")).map_err(runtime)?;
    save_checkpoint(&model, &out.join("checkpoint.json")).map_err(runtime)?;

    let held_out = eval_split(&bundle);
    let report = evaluate(&model, held_out, EvalMode::Factual).map_err(runtime)?;
    let lvcf = evaluate_lvcf(held_out).map_err(runtime)?;
    let cf = if args.counterfactual {
        Some(
            evaluate(&model, held_out, EvalMode::Counterfactual)
                .map_err(runtime)?
                .nrmse,
        )
    } else {
        None
    };
    println!("{}", report_json(&report, lvcf.nrmse, cf));
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    if args.write_default_spec {
        let out_dir = args
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs/sweep"));
        let spec = ExperimentSpec::desk(out_dir);
        crate::exp::save_spec(&spec, &args.spec).map_err(runtime)?;
        println!("wrote default spec to {}", args.spec.display());
        return Ok(());
    }
    let mut spec = load_spec(&args.spec).map_err(validation)?;
    if let Some(out) = &args.out {
        spec.out_dir = out.clone();
    }
    spec.out_dir = resolve_out(&spec.out_dir);
    let summary = sweep(&spec).map_err(runtime)?;
    println!(
        "sweep finished: completed {}, skipped {}, failed {}; results at {}",
        summary.completed,
        summary.skipped,
        summary.failed,
        summary.results_csv.display()
    );
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let axis = AblationAxis::parse(&args.axis)
        .ok_or_else(|| validation(format!("unknown axis {:?} (use layers|latent)", args.axis)))?;
    if args.values.is_empty() {
        return Err(validation("at least one --values entry required"));
    }
    let out = resolve_out(&args.out);
    let spec = ExperimentSpec {
        kappas: vec![args.kappa],
        gammas: vec![args.gamma],
        seeds: vec![args.seed],
        sim: SimConfig {
            n: args.n,
            ..SimConfig::default()
        },
        train: {
            let mut t = base_train_config(args.paper_scale);
            if let Some(v) = args.epochs {
                t.epochs = v;
            }
            t.fixed_timing = args.fixed_timing;
            t
        },
        model: ModelConfig::default(),
        out_dir: out.clone(),
        counterfactual: false,
    };
    let base = resolve_cell(&spec, args.kappa, args.gamma, args.seed);
    base.sim.validate().map_err(validation)?;
    let rows = ablate(&base, axis, &args.values, &out).map_err(runtime)?;
    for row in &rows {
        println!(
            "{} {}: treatment_loss {:.6} outcome_loss {:.6} total_loss {:.6}",
            axis.column_name(),
            row.value,
            row.treatment_loss,
            row.outcome_loss,
            row.total_loss
        );
    }
    println!(
        "wrote {}",
        out.join(format!("ablate_{}.csv", axis.column_name())).display()
    );
    Ok(())
}

fn run_label(dir: &Path) -> String {
    // Prefer the recorded grid point, falling back to the directory name.
    let from_result = std::fs::read_to_string(dir.join("result.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| {
            let k = v.get("kappa")?.as_f64()?;
            let g = v.get("gamma")?.as_f64()?;
            Some(format!("{k}-{g}"))
        });
    if let Some(label) = from_result {
        return label;
    }
    let from_config = std::fs::read_to_string(dir.join("config.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| {
            let sim = v.get("sim")?;
            let k = sim.get("kappa")?.as_f64()?;
            let g = sim.get("gamma_c")?.as_f64()?;
            Some(format!("{k}-{g}"))
        });
    from_config.unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string())
    })
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let out = resolve_out(&args.out);
    let mut series = Vec::with_capacity(args.runs.len());
    let mut groups = Vec::with_capacity(args.runs.len());
    for dir in &args.runs {
        let history_path = dir.join("history.csv");
        let history = read_history_csv(&history_path).map_err(validation)?;
        if history.is_empty() {
            return Err(validation(format!(
                "{}: history has no rows",
                history_path.display()
            )));
        }
        let label = run_label(dir);
        series.push(Series {
            label: label.clone(),
            points: history
                .iter()
                .map(|r| (r.epoch as f64, r.loss_sum()))
                .collect(),
        });
        let last = history.last().expect("non-empty history");
        groups.push(BarGroup {
            label,
            values: vec![last.rmse_treated, last.rmse_untreated],
        });
    }

    let plot_config = PlotConfig {
        title: "Training loss by epoch".into(),
        x_label: "epoch".into(),
        y_label: "outcome + treatment loss".into(),
        log_y: !args.linear,
    };
    let curves = line_plot_svg(&series, &plot_config).map_err(runtime)?;
    let bars = bar_chart_svg(
        &groups,
        &["treated".to_string(), "untreated".to_string()],
        "Forecast error by treatment status",
        "rmse (volume)",
    )
    .map_err(runtime)?;
    std::fs::create_dir_all(&out).map_err(runtime)?;
    let curves_path = out.join("loss_curves.svg");
    let bars_path = out.join("rmse_bars.svg");
    write_atomic(&curves_path, curves.as_bytes()).map_err(runtime)?;
    write_atomic(&bars_path, bars.as_bytes()).map_err(runtime)?;
    println!("wrote {} and {}", curves_path.display(), bars_path.display());
    Ok(())
}
