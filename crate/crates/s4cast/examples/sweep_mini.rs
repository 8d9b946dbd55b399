//! Run a miniature (kappa, gamma) grid end to end — simulate, train, score,
//! pivot — exactly as the `s4cast sweep` subcommand does, but small enough
//! to finish in well under a minute.
//!
//! Run with: cargo run --release --example sweep_mini

use s4cast::exp::{sweep, ExperimentSpec};
use s4cast::model::ModelConfig;
use s4cast::sim::SimConfig;
use s4cast::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("s4cast_sweep_mini");
    let spec = ExperimentSpec {
        kappas: vec![1.0, 5.0],
        gammas: vec![0.0, 10.0],
        seeds: vec![0],
        sim: SimConfig {
            n: 10,
            horizon: 20.0,
            ..SimConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            max_len: 24,
            fixed_timing: true,
            ..TrainConfig::desk()
        },
        model: ModelConfig {
            layers: 1,
            latent_dim: 4,
            state_size: 4,
            ..ModelConfig::default()
        },
        out_dir: out_dir.clone(),
        counterfactual: false,
    };

    let summary = sweep(&spec)?;
    println!(
        "completed {}, skipped {}, failed {}",
        summary.completed, summary.skipped, summary.failed
    );

    println!("\nresults.csv:");
    print!("{}", std::fs::read_to_string(&summary.results_csv)?);

    println!("\npivot (forecast nrmse, kappa rows x gamma columns):");
    print!(
        "{}",
        std::fs::read_to_string(out_dir.join("pivot_nrmse.csv"))?
    );

    // Running again resumes: every cell is already done, so all are skipped.
    let again = sweep(&spec)?;
    println!(
        "\nrerun: completed {}, skipped {}, failed {} (resume works)",
        again.completed, again.skipped, again.failed
    );
    Ok(())
}
