//! Sanity-check the training loop by memorizing a handful of patients:
//! with the treatment trade-off disabled (mu = 0) the outcome loss should
//! collapse far below its starting value.
//!
//! Run with: cargo run --release --example train_overfit

use s4cast::model::{Model, ModelConfig};
use s4cast::sim::dataset::generate_dataset;
use s4cast::sim::SimConfig;
use s4cast::train::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = SimConfig {
        n: 12,
        horizon: 30.0,
        kappa: 3.0,
        seed: 5,
        ..SimConfig::default()
    };
    let bundle = generate_dataset(&sim)?;
    println!(
        "memorizing {} training patients",
        bundle.train.trajectories.len()
    );

    let model_config = ModelConfig {
        layers: 2,
        latent_dim: 8,
        state_size: 8,
        mu: 0.0,
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        epochs: 40,
        batch_size: 12,
        lr_ssm: 5e-3,
        lr_other: 1e-2,
        mu: 0.0,
        max_len: 64,
        fixed_timing: true,
        ..TrainConfig::default()
    };

    let model = Model::init(model_config, 0)?;
    let (_, history) = train(model, &bundle.train, &bundle.train, &train_config)?;

    println!("\nepoch   outcome loss   nrmse");
    for report in history.iter().step_by(5).chain(history.last()) {
        println!(
            "{:>5}   {:>12.6}   {:>6.4}",
            report.epoch, report.loss_y, report.nrmse
        );
    }

    let first = history.first().expect("history").loss_y;
    let last = history.last().expect("history").loss_y;
    println!(
        "\noutcome loss fell {:.1}x (from {first:.4} to {last:.4})",
        first / last.max(1e-12)
    );
    Ok(())
}
