//! Evaluation: factual one-step-ahead error metrics, counterfactual accuracy
//! against forced-plan ground truth, and a last-value-carried-forward
//! reference predictor.

use super::{featurize, total_loss, treatment_loss, LossReport, TrainError, FEATURE_DIM};
use crate::autodiff::tensor::Tensor;
use crate::model::Model;
use crate::sim::dataset::{Dataset, Normalization};
use crate::sim::{counterfactual_rollout, sphere_diameter, stage_of, ForcedPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Score one-step-ahead predictions at the observed treatment sequence.
    Factual,
    /// Roll the model forward from the midpoint of each trajectory under
    /// always-treat and never-treat plans and score it against simulated
    /// ground truth for the same patient under the same plan.
    Counterfactual,
}

/// One scored prediction, in normalized volume units.
struct PredPoint {
    pred_norm: f64,
    true_norm: f64,
    treated: bool,
}

fn rmse(errors: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut sum = 0.0;
    for e in errors {
        sum += e * e;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Reduce scored predictions to a report. `nrmse` and the treated/untreated
/// errors are in denormalized volume units; `loss_y` stays normalized.
fn summarize(
    points: &[PredPoint],
    norm: &Normalization,
    loss_a: f64,
    mu: f64,
) -> Result<LossReport, TrainError> {
    if points.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = points.len() as f64;
    let loss_y = points
        .iter()
        .map(|p| (p.pred_norm - p.true_norm) * (p.pred_norm - p.true_norm))
        .sum::<f64>()
        / n;
    let err_den = |p: &PredPoint| (p.pred_norm - p.true_norm) * norm.std;
    let overall = rmse(points.iter().map(err_den));
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        let t = norm.denormalize(p.true_norm);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    let range = (hi - lo).max(1e-12);
    Ok(LossReport {
        epoch: 0,
        loss_y,
        loss_a,
        loss_total: total_loss(loss_y, loss_a, mu),
        nrmse: overall / range,
        rmse_treated: rmse(points.iter().filter(|p| p.treated).map(err_den)),
        rmse_untreated: rmse(points.iter().filter(|p| !p.treated).map(err_den)),
        wall_seconds: 0.0,
    })
}

fn factual_points(
    model: &Model,
    dataset: &Dataset,
) -> Result<(Vec<PredPoint>, f64), TrainError> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    for traj in &dataset.trajectories {
        let feat = featurize(traj, &dataset.normalization)?;
        let (yhat, ahat) = model.forward_once(&feat.inputs)?;
        for k in 0..feat.len() {
            if !feat.mask[k] {
                continue;
            }
            points.push(PredPoint {
                pred_norm: yhat[k],
                true_norm: feat.targets_y[k],
                treated: feat.targets_a[k] > 0.5,
            });
            labels.push(feat.targets_a[k]);
            probs.push(ahat[k]);
        }
    }
    if points.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let full_mask = vec![true; labels.len()];
    let loss_a = treatment_loss(&labels, &probs, &full_mask)?;
    Ok((points, loss_a))
}

fn set_stage_one_hot(rows: &mut [f64], k: usize, stage: u8) {
    for s in 0..4 {
        rows[k * FEATURE_DIM + 1 + s] = 0.0;
    }
    rows[k * FEATURE_DIM + 1 + (stage.clamp(1, 4) - 1) as usize] = 1.0;
}

fn counterfactual_points(
    model: &Model,
    dataset: &Dataset,
) -> Result<Vec<PredPoint>, TrainError> {
    let config = &dataset.config;
    let norm = &dataset.normalization;
    let mut points = Vec::new();
    for traj in &dataset.trajectories {
        let l = traj.len();
        if l < 3 {
            continue;
        }
        let k_split = l / 2;
        let t_split = traj.obs_times[k_split];
        let feat = featurize(traj, norm)?;
        for (plan, treated) in [(ForcedPlan::AlwaysTreat, true), (ForcedPlan::NeverTreat, false)] {
            let path = counterfactual_rollout(config, traj.patient_index, t_split, &plan)?;
            let mut rows = feat.inputs.data().to_vec();
            // Future treatment flags come from the forced plan's own path;
            // everything else before the split stays factual.
            for k in (k_split + 1)..l {
                let idx = path.nearest_index(traj.obs_times[k], config.dt_sim);
                rows[k * FEATURE_DIM + 5] = f64::from(u8::from(path.chemo_active[idx]));
                rows[k * FEATURE_DIM + 6] = f64::from(u8::from(path.radio_active[idx]));
            }
            for step in k_split..(l - 1) {
                let input = Tensor::matrix(
                    step + 1,
                    FEATURE_DIM,
                    rows[..(step + 1) * FEATURE_DIM].to_vec(),
                );
                let (yhat, _) = model.forward_once(&input)?;
                let pred_norm = yhat[step];
                let next = step + 1;
                let idx = path.nearest_index(traj.obs_times[next], config.dt_sim);
                points.push(PredPoint {
                    pred_norm,
                    true_norm: norm.normalize(path.volumes[idx]),
                    treated,
                });
                // Feed the prediction back in as the next row's state. A
                // degenerate (non-positive) predicted volume is floored to
                // a hair above zero so it maps to the smallest stage.
                let vol = norm.denormalize(pred_norm).max(1e-9);
                rows[next * FEATURE_DIM] = pred_norm;
                set_stage_one_hot(&mut rows, next, stage_of(sphere_diameter(vol)));
            }
        }
    }
    if points.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(points)
}

/// Score a trained model on a dataset. Pure: repeated calls agree
/// bit-exactly, and `wall_seconds` is always reported as zero.
pub fn evaluate(model: &Model, dataset: &Dataset, mode: EvalMode) -> Result<LossReport, TrainError> {
    if dataset.trajectories.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    match mode {
        EvalMode::Factual => {
            let (points, loss_a) = factual_points(model, dataset)?;
            summarize(&points, &dataset.normalization, loss_a, model.config.mu)
        }
        EvalMode::Counterfactual => {
            // Treatment prediction has no ground truth under a forced plan;
            // the treatment loss is reported as zero.
            let points = counterfactual_points(model, dataset)?;
            summarize(&points, &dataset.normalization, 0.0, model.config.mu)
        }
    }
}

/// Last-value-carried-forward reference: predict that the next observed
/// volume equals the current one. Treatment loss is reported at chance
/// level (ln 2) and the combined loss is just the outcome loss.
pub fn evaluate_lvcf(dataset: &Dataset) -> Result<LossReport, TrainError> {
    if dataset.trajectories.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut points = Vec::new();
    for traj in &dataset.trajectories {
        let feat = featurize(traj, &dataset.normalization)?;
        for k in 0..feat.len() {
            if !feat.mask[k] {
                continue;
            }
            points.push(PredPoint {
                pred_norm: feat.inputs.data()[k * FEATURE_DIM],
                true_norm: feat.targets_y[k],
                treated: feat.targets_a[k] > 0.5,
            });
        }
    }
    let mut report = summarize(&points, &dataset.normalization, std::f64::consts::LN_2, 0.0)?;
    report.loss_total = report.loss_y;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::sim::dataset::{generate_dataset, DatasetBundle, PatientTrajectory};
    use crate::sim::SimConfig;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_norm() -> Normalization {
        Normalization {
            mean: 0.0,
            std: 1.0,
        }
    }

    fn tiny_bundle(n: usize, seed: u64) -> DatasetBundle {
        let config = SimConfig {
            n,
            seed,
            horizon: 15.0,
            ..SimConfig::default()
        };
        generate_dataset(&config).unwrap()
    }

    fn tiny_model(seed: u64) -> Model {
        let config = ModelConfig {
            layers: 1,
            latent_dim: 6,
            state_size: 4,
            ..ModelConfig::default()
        };
        Model::init(config, seed).unwrap()
    }

    #[test]
    fn oracle_predictions_score_zero() {
        let points: Vec<PredPoint> = [0.5, -1.0, 2.0]
            .iter()
            .map(|t| PredPoint {
                pred_norm: *t,
                true_norm: *t,
                treated: false,
            })
            .collect();
        let report = summarize(&points, &unit_norm(), 0.0, 0.5).unwrap();
        assert_eq!(report.nrmse, 0.0);
        assert_eq!(report.loss_y, 0.0);
    }

    #[test]
    fn mean_predictor_on_standardized_targets_is_unit_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let points: Vec<PredPoint> = (0..4000)
            .map(|_| PredPoint {
                pred_norm: 0.0,
                true_norm: StandardNormal.sample(&mut rng),
                treated: false,
            })
            .collect();
        let report = summarize(&points, &unit_norm(), 0.0, 0.0).unwrap();
        assert!(
            (report.loss_y - 1.0).abs() < 0.15,
            "loss_y = {}",
            report.loss_y
        );
    }

    #[test]
    fn strata_partition_the_squared_error() {
        // Treated errors 1 and 3; untreated error 2 (std = 1).
        let points = vec![
            PredPoint {
                pred_norm: 1.0,
                true_norm: 0.0,
                treated: true,
            },
            PredPoint {
                pred_norm: 3.0,
                true_norm: 0.0,
                treated: true,
            },
            PredPoint {
                pred_norm: 2.0,
                true_norm: 0.0,
                treated: false,
            },
        ];
        let report = summarize(&points, &unit_norm(), 0.0, 0.0).unwrap();
        assert_relative_eq!(report.rmse_treated, 5.0_f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(report.rmse_untreated, 2.0, max_relative = 1e-12);
        let recombined =
            (2.0 * report.rmse_treated.powi(2) + report.rmse_untreated.powi(2)) / 3.0;
        assert_relative_eq!(
            recombined,
            report.loss_y, // std = 1 so normalized and raw errors agree
            max_relative = 1e-12
        );
        // One empty stratum reports NaN rather than a misleading number.
        let only_treated = &points[..2];
        let r = summarize(only_treated, &unit_norm(), 0.0, 0.0).unwrap();
        assert!(r.rmse_untreated.is_nan());
    }

    #[test]
    fn evaluate_is_pure() {
        let bundle = tiny_bundle(5, 21);
        let model = tiny_model(3);
        let a = evaluate(&model, &bundle.train, EvalMode::Factual).unwrap();
        let b = evaluate(&model, &bundle.train, EvalMode::Factual).unwrap();
        assert_eq!(a.nrmse.to_bits(), b.nrmse.to_bits());
        assert_eq!(a.loss_y.to_bits(), b.loss_y.to_bits());
        assert_eq!(a.loss_a.to_bits(), b.loss_a.to_bits());
        assert_eq!(a.rmse_treated.to_bits(), b.rmse_treated.to_bits());
        assert_eq!(a.wall_seconds, 0.0);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let bundle = tiny_bundle(3, 2);
        let empty = Dataset {
            trajectories: vec![],
            ..bundle.train.clone()
        };
        assert!(matches!(
            evaluate(&tiny_model(0), &empty, EvalMode::Factual),
            Err(TrainError::EmptyDataset)
        ));
        assert!(matches!(
            evaluate_lvcf(&empty),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn lvcf_hand_check() {
        let traj = PatientTrajectory {
            patient_index: 0,
            obs_times: vec![0.0, 1.0, 2.0, 3.0],
            volumes: vec![2.0, 4.0, 6.0, 8.0],
            diameters: vec![1.5, 2.0, 2.25, 2.5],
            stages: vec![1, 1, 2, 2],
            chemo: vec![0, 1, 0, 1],
            radio: vec![0, 0, 1, 0],
            covariates: vec![vec![0.0; 2]; 4],
            initial_diameter_cm: 6.5,
        };
        let dataset = Dataset {
            split: crate::sim::dataset::SplitTag::Test,
            config: SimConfig::default(),
            normalization: unit_norm(),
            trajectories: vec![traj],
        };
        let report = evaluate_lvcf(&dataset).unwrap();
        // Predictions (2, 4, 6) against targets (4, 6, 8): RMSE 2, range 4.
        assert_relative_eq!(report.loss_y, 4.0, max_relative = 1e-12);
        assert_relative_eq!(report.nrmse, 0.5, max_relative = 1e-12);
        assert_relative_eq!(report.rmse_treated, 2.0, max_relative = 1e-12);
        assert!(report.rmse_untreated.is_nan());
        assert_eq!(report.loss_total, report.loss_y);
    }

    #[test]
    fn counterfactual_evaluation_smoke() {
        let bundle = tiny_bundle(4, 31);
        let model = tiny_model(5);
        let report = evaluate(&model, &bundle.train, EvalMode::Counterfactual).unwrap();
        assert!(report.nrmse.is_finite() && report.nrmse >= 0.0);
        assert!(report.rmse_treated.is_finite());
        assert!(report.rmse_untreated.is_finite());
        assert_eq!(report.loss_a, 0.0);
        // Pure as well.
        let again = evaluate(&model, &bundle.train, EvalMode::Counterfactual).unwrap();
        assert_eq!(report.nrmse.to_bits(), again.nrmse.to_bits());
    }

    #[test]
    fn counterfactual_survives_wildly_negative_predictions() {
        // A head biased to huge negative outputs denormalizes below zero;
        // the fed-back state must floor to the smallest stage, not panic.
        let bundle = tiny_bundle(4, 31);
        let mut model = tiny_model(5);
        for v in model.params.get_mut("head_y.bias") {
            *v = -1e3;
        }
        let report = evaluate(&model, &bundle.train, EvalMode::Counterfactual).unwrap();
        assert!(report.nrmse.is_finite());
    }
}
