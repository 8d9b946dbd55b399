use s4cast::model::checkpoint::load_checkpoint;
use s4cast::sim::dataset::load_bundle;
use s4cast::train::eval::{evaluate, EvalMode};
use s4cast::train::{train, TrainConfig};
use std::path::Path;

fn report(tag: &str, model: &s4cast::model::Model, bundle: &s4cast::sim::dataset::DatasetBundle) {
    let f = evaluate(model, &bundle.test, EvalMode::Factual).unwrap();
    let c = evaluate(model, &bundle.test, EvalMode::Counterfactual).unwrap();
    println!(
        "{tag}: factual nrmse {:.5} loss_y {:.5} loss_a {:.5} | cf nrmse {:.5} always-rmse {:.4} never-rmse {:.4}",
        f.nrmse, f.loss_y, f.loss_a, c.nrmse, c.rmse_treated, c.rmse_untreated
    );
}

fn main() {
    let bundle = load_bundle(Path::new("/tmp/probe_a10/data")).unwrap();
    let mut model = load_checkpoint(Path::new("/tmp/probe_a10/cool_mu0/checkpoint.json")).unwrap();
    report("warm-start (mu=0, 40ep)", &model, &bundle);

    model.config.mu = 0.5;
    let config = TrainConfig {
        epochs: 10,
        batch_size: 16,
        lr_ssm: 5e-4,
        lr_other: 5e-4,
        mu: 0.5,
        seed: 1,
        max_len: 48,
        checkpoint_dir: None,
        fixed_timing: true,
    };
    let (model, hist) = train(model, &bundle.train, &bundle.val, &config).unwrap();
    for h in &hist {
        println!(
            "  epoch {:2}: loss_y {:.5} loss_a {:.5}",
            h.epoch, h.loss_y, h.loss_a
        );
    }
    report("after +10ep mu=0.5", &model, &bundle);
}
