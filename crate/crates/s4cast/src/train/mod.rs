//! Losses, optimizer, training loop, and evaluation metrics for the
//! forecasting model: masked one-step-ahead outcome regression plus a
//! treatment-prediction head, combined through the gradient-reversal
//! coupling so the trunk is pushed toward treatment-invariant features.

pub mod eval;

pub use eval::{evaluate, evaluate_lvcf, EvalMode};

use crate::autodiff::tensor::Tensor;
use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{AdversarialMode, Model, ModelError, ParamGroup, ParamSet};
use crate::sim::dataset::{Dataset, Normalization, PatientTrajectory};
use crate::sim::{SimError, D_MAX_CM};
use crate::util::write_atomic;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Width of one featurized input row:
/// normalized volume, stage one-hot (4), chemo, radio, time gap, entry size.
pub const FEATURE_DIM: usize = 9;

/// Probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] before logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("trajectory has {len} observations; at least 2 are required")]
    TooShort { len: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("dataset has no usable trajectories")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at epoch {epoch} step {step}; diagnostics: {diagnostics}")]
    NonFinite {
        what: String,
        epoch: usize,
        step: usize,
        diagnostics: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for the state-space parameters (spectrum, low-rank
    /// factors, input/output vectors).
    pub lr_ssm: f64,
    /// Learning rate for everything else (mixing layers, encoder, heads,
    /// step sizes).
    pub lr_other: f64,
    /// Trade-off weight between outcome loss and treatment loss.
    pub mu: f64,
    pub seed: u64,
    /// Training sequences longer than this are truncated to their first
    /// `max_len` observations.
    pub max_len: usize,
    /// When set, a checkpoint is written here after every epoch.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Report wall_seconds as 0.0 so that reruns are byte-identical.
    #[serde(default)]
    pub fixed_timing: bool,
    /// Full-batch re-fit steps applied to the treatment head at the start of
    /// every epoch while the trunk is frozen. Keeps the adversarial game
    /// honest: the reversed gradient only approximates the balance objective
    /// when the head plays close to its best response, and under plain
    /// simultaneous descent the trunk outruns the head and drives it into
    /// confidently-wrong territory instead of uninformativeness. While the
    /// refresh is active the head trains only in this phase (the joint step
    /// skips it). 0 disables; inactive when mu = 0 or under the literal
    /// joint objective.
    #[serde(default)]
    pub head_refresh_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr_ssm: 5e-4,
            lr_other: 2e-5,
            mu: 0.5,
            seed: 0,
            max_len: 256,
            checkpoint_dir: None,
            fixed_timing: false,
            head_refresh_steps: 32,
        }
    }
}

impl TrainConfig {
    /// Reduced-budget profile sized for a laptop-class run: fewer epochs,
    /// shorter truncation, and a faster rate for the dense parameters so
    /// the encoder and heads can move within the small budget.
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            max_len: 48,
            lr_other: 2e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !self.lr_ssm.is_finite()
            || self.lr_ssm <= 0.0
            || !self.lr_other.is_finite()
            || self.lr_other <= 0.0
        {
            return Err(TrainError::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(TrainError::InvalidConfig("mu must be >= 0".into()));
        }
        if self.max_len < 2 {
            return Err(TrainError::InvalidConfig("max_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// Per-epoch metrics. Losses are training-split means; the error metrics
/// (nrmse and the treated/untreated split) come from the evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub loss_y: f64,
    pub loss_a: f64,
    /// loss_y - mu * loss_a; may be negative.
    pub loss_total: f64,
    pub nrmse: f64,
    pub rmse_treated: f64,
    pub rmse_untreated: f64,
    pub wall_seconds: f64,
}

impl LossReport {
    /// Auxiliary unsigned combination for cross-table comparability.
    pub fn loss_sum(&self) -> f64 {
        self.loss_y + self.loss_a
    }

    pub const CSV_HEADER: &'static str =
        "epoch,loss_y,loss_a,loss_total,nrmse,rmse_treated,rmse_untreated,wall_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.loss_y,
            self.loss_a,
            self.loss_total,
            self.nrmse,
            self.rmse_treated,
            self.rmse_untreated,
            self.wall_seconds
        )
    }
}

/// Write the per-epoch loss history as CSV.
pub fn save_history(history: &[LossReport], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from(LossReport::CSV_HEADER);
    out.push('\n');
    for row in history {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// One trajectory turned into model inputs and one-step-ahead targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    /// L x FEATURE_DIM input rows.
    pub inputs: Tensor,
    /// Normalized next-observation volume; entry k predicts observation k+1.
    pub targets_y: Vec<f64>,
    /// 1.0 when any treatment is active at observation k+1.
    pub targets_a: Vec<f64>,
    /// Positions that contribute to losses; the last row is always masked.
    pub mask: Vec<bool>,
}

impl Featurized {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

fn stage_one_hot(stage: u8) -> [f64; 4] {
    let mut oh = [0.0; 4];
    let idx = (stage.clamp(1, 4) - 1) as usize;
    oh[idx] = 1.0;
    oh
}

/// Build input rows and shifted targets from one observed trajectory.
///
/// Row k is [normalized volume, stage one-hot (4), chemo flag, radio flag,
/// time since previous observation (0 at the first), entry diameter / 13].
pub fn featurize(
    traj: &PatientTrajectory,
    norm: &Normalization,
) -> Result<Featurized, TrainError> {
    let l = traj.len();
    if l < 2 {
        return Err(TrainError::TooShort { len: l });
    }
    let mut rows = Vec::with_capacity(l * FEATURE_DIM);
    let mut targets_y = Vec::with_capacity(l);
    let mut targets_a = Vec::with_capacity(l);
    let mut mask = Vec::with_capacity(l);
    for k in 0..l {
        let oh = stage_one_hot(traj.stages[k]);
        let dt = if k == 0 {
            0.0
        } else {
            traj.obs_times[k] - traj.obs_times[k - 1]
        };
        rows.push(norm.normalize(traj.volumes[k]));
        rows.extend_from_slice(&oh);
        rows.push(f64::from(traj.chemo[k]));
        rows.push(f64::from(traj.radio[k]));
        rows.push(dt);
        rows.push(traj.initial_diameter_cm / D_MAX_CM);
        if k + 1 < l {
            targets_y.push(norm.normalize(traj.volumes[k + 1]));
            targets_a.push(f64::from(traj.chemo[k + 1].max(traj.radio[k + 1])));
            mask.push(true);
        } else {
            targets_y.push(0.0);
            targets_a.push(0.0);
            mask.push(false);
        }
    }
    Ok(Featurized {
        inputs: Tensor::matrix(l, FEATURE_DIM, rows),
        targets_y,
        targets_a,
        mask,
    })
}

/// Keep only the first `max_len` observations of a trajectory.
pub fn truncate_trajectory(traj: &PatientTrajectory, max_len: usize) -> PatientTrajectory {
    if traj.len() <= max_len {
        return traj.clone();
    }
    PatientTrajectory {
        patient_index: traj.patient_index,
        obs_times: traj.obs_times[..max_len].to_vec(),
        volumes: traj.volumes[..max_len].to_vec(),
        diameters: traj.diameters[..max_len].to_vec(),
        stages: traj.stages[..max_len].to_vec(),
        chemo: traj.chemo[..max_len].to_vec(),
        radio: traj.radio[..max_len].to_vec(),
        covariates: traj.covariates[..max_len].to_vec(),
        initial_diameter_cm: traj.initial_diameter_cm,
    }
}

fn masked_count(mask: &[bool]) -> Result<f64, TrainError> {
    let k = mask.iter().filter(|m| **m).count();
    if k == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(k as f64)
}

fn check_len(name: &str, got: usize, want: usize) -> Result<(), TrainError> {
    if got != want {
        return Err(TrainError::ShapeMismatch(format!(
            "{name}: length {got} != {want}"
        )));
    }
    Ok(())
}

/// Mean squared error over unmasked positions.
pub fn outcome_loss(y: &[f64], yhat: &[f64], mask: &[bool]) -> Result<f64, TrainError> {
    check_len("yhat", yhat.len(), y.len())?;
    check_len("mask", mask.len(), y.len())?;
    let k = masked_count(mask)?;
    let sum: f64 = y
        .iter()
        .zip(yhat)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((t, p), _)| (t - p) * (t - p))
        .sum();
    Ok(sum / k)
}

/// Mean binary cross-entropy over unmasked positions, with probability
/// clamping before the logarithms.
pub fn treatment_loss(a: &[f64], ahat: &[f64], mask: &[bool]) -> Result<f64, TrainError> {
    check_len("ahat", ahat.len(), a.len())?;
    check_len("mask", mask.len(), a.len())?;
    let k = masked_count(mask)?;
    let sum: f64 = a
        .iter()
        .zip(ahat)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((label, p), _)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / k)
}

/// Combined objective: outcome loss minus `mu` times treatment loss.
pub fn total_loss(loss_y: f64, loss_a: f64, mu: f64) -> f64 {
    loss_y - mu * loss_a
}

/// Tape version of [`outcome_loss`] on an (L x 1) prediction node.
pub fn outcome_loss_node(
    tape: &mut Tape,
    yhat: NodeId,
    targets: &[f64],
    mask: &[bool],
) -> Result<NodeId, TrainError> {
    let l = targets.len();
    check_len("mask", mask.len(), l)?;
    check_len("yhat node", tape.value(yhat).len(), l)?;
    let k = masked_count(mask)?;
    let neg_targets = Tensor::matrix(l, 1, targets.iter().map(|t| -t).collect());
    let err = tape.add_const(yhat, neg_targets);
    let sq = tape.mul_elem(err, err);
    let weights = Tensor::matrix(
        l,
        1,
        mask.iter().map(|m| if *m { 1.0 / k } else { 0.0 }).collect(),
    );
    Ok(tape.dot_const(sq, weights))
}

/// Tape version of [`treatment_loss`] on an (L x 1) probability node.
pub fn treatment_loss_node(
    tape: &mut Tape,
    ahat: NodeId,
    targets: &[f64],
    mask: &[bool],
) -> Result<NodeId, TrainError> {
    let l = targets.len();
    check_len("mask", mask.len(), l)?;
    check_len("ahat node", tape.value(ahat).len(), l)?;
    let k = masked_count(mask)?;
    let p = tape.clamp(ahat, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ln_p = tape.ln(p);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_const(neg_p, Tensor::matrix(l, 1, vec![1.0; l]));
    let ln_q = tape.ln(one_minus_p);
    let w_pos = Tensor::matrix(
        l,
        1,
        targets
            .iter()
            .zip(mask)
            .map(|(a, m)| if *m { -a / k } else { 0.0 })
            .collect(),
    );
    let w_neg = Tensor::matrix(
        l,
        1,
        targets
            .iter()
            .zip(mask)
            .map(|(a, m)| if *m { -(1.0 - a) / k } else { 0.0 })
            .collect(),
    );
    let pos = tape.dot_const(ln_p, w_pos);
    let neg = tape.dot_const(ln_q, w_neg);
    Ok(tape.add(pos, neg))
}

/// First and second moment accumulators for the adaptive-moment optimizer.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected adaptive-moment update. Parameters whose name ends in
/// a state-space suffix use `lr_ssm`; everything else uses `lr_other`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr_ssm: f64,
    lr_other: f64,
) -> Result<(), TrainError> {
    adam_step_filtered(params, grads, state, lr_ssm, lr_other, false)
}

/// `adam_step` with an optional exclusion of the treatment-head parameters,
/// used while the head is being trained in its own refresh phase.
fn adam_step_filtered(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr_ssm: f64,
    lr_other: f64,
    skip_treatment_head: bool,
) -> Result<(), TrainError> {
    state.t += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (name, values) in params.iter_mut() {
        if skip_treatment_head && name.starts_with("head_a.") {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::ShapeMismatch(format!("missing gradient for {name}")))?;
        check_len(name, g.len(), values.len())?;
        let lr = match ParamSet::group_of(name) {
            ParamGroup::Ssm => lr_ssm,
            ParamGroup::Other => lr_other,
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; values.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; values.len()]);
        for i in 0..values.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn finite_or_dump(
    what: &str,
    value: f64,
    epoch: usize,
    step: usize,
    model: &Model,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    if value.is_finite() {
        return Ok(value);
    }
    let mut diag = String::new();
    for (name, values) in model.params.iter() {
        let max = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let finite = values.iter().all(|v| v.is_finite());
        diag.push_str(&format!("{name}: max_abs={max:.3e} finite={finite}; "));
    }
    if let Some(dir) = &config.checkpoint_dir {
        let path = dir.join(format!("diverged_epoch{epoch}_step{step}.json"));
        if save_checkpoint(model, &path).is_ok() {
            diag.push_str(&format!("state dumped to {}", path.display()));
        }
    }
    Err(TrainError::NonFinite {
        what: what.to_string(),
        epoch,
        step,
        diagnostics: diag,
    })
}

/// Re-fit the treatment head to the frozen trunk: cache the latent sequence
/// of every training trajectory once, then take full-batch optimizer steps
/// on the head alone. Deterministic; the trunk does not move.
fn refresh_head(
    model: &mut Model,
    features: &[Featurized],
    adam: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let mut latents = Vec::with_capacity(features.len());
    for feat in features {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let out = bound.forward(&mut tape, &feat.inputs);
        latents.push(tape.value(out.z).clone());
    }
    let h = model.config.latent_dim;
    let mut head = ParamSet::from_map(BTreeMap::from([
        (
            "head_a.weight".to_string(),
            model.params.get("head_a.weight").to_vec(),
        ),
        (
            "head_a.bias".to_string(),
            model.params.get("head_a.bias").to_vec(),
        ),
    ]));
    for _ in 0..config.head_refresh_steps {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(h, 1, head.get("head_a.weight").to_vec()));
        let b = tape.leaf(Tensor::vector(head.get("head_a.bias").to_vec()));
        let mut sum: Option<NodeId> = None;
        for (feat, z) in features.iter().zip(&latents) {
            let zc = tape.leaf(z.clone());
            let logits = tape.matmul(zc, w);
            let shifted = tape.add_broadcast(logits, b);
            let ahat = tape.sigmoid(shifted);
            let la = treatment_loss_node(&mut tape, ahat, &feat.targets_a, &feat.mask)?;
            sum = Some(match sum {
                Some(acc) => tape.add(acc, la),
                None => la,
            });
        }
        let inv = 1.0 / features.len() as f64;
        let la_mean = tape.scale(sum.expect("non-empty feature set"), inv);
        let grads = tape.backward(la_mean)?;
        let mut grad_map = BTreeMap::new();
        grad_map.insert("head_a.weight".to_string(), grads.get(w).data().to_vec());
        grad_map.insert("head_a.bias".to_string(), grads.get(b).data().to_vec());
        adam_step(&mut head, &grad_map, adam, config.lr_ssm, config.lr_other)?;
    }
    for name in ["head_a.weight", "head_a.bias"] {
        *model.params.get_mut(name) = head.get(name).to_vec();
    }
    Ok(())
}

/// Train `model` on the training split, reporting error metrics on the
/// evaluation split after every epoch. Deterministic for a fixed seed.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    eval_set: &Dataset,
    config: &TrainConfig,
) -> Result<(Model, Vec<LossReport>), TrainError> {
    config.validate()?;
    if train_set.trajectories.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let norm = &train_set.normalization;
    let mut features = Vec::with_capacity(train_set.trajectories.len());
    for traj in &train_set.trajectories {
        let short = truncate_trajectory(traj, config.max_len);
        features.push(featurize(&short, norm)?);
    }

    let mu = model.config.mu;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..features.len()).collect();
    // The head refresh only exists to stabilize the reversal game; with
    // mu = 0 or the literal joint objective there is no game to stabilize.
    let refresh = config.head_refresh_steps > 0
        && mu > 0.0
        && matches!(
            model.config.adversarial_mode,
            AdversarialMode::GradReverse
        );
    let mut head_adam = AdamState::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        if refresh {
            refresh_head(&mut model, &features, &mut head_adam, config)?;
        }
        order.shuffle(&mut shuffle_rng);
        let mut epoch_ly = 0.0;
        let mut epoch_la = 0.0;
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let mut sum_ly: Option<NodeId> = None;
            let mut sum_la: Option<NodeId> = None;
            for &idx in chunk {
                let feat = &features[idx];
                let out = bound.forward(&mut tape, &feat.inputs);
                let ly = outcome_loss_node(&mut tape, out.yhat, &feat.targets_y, &feat.mask)?;
                let la = treatment_loss_node(&mut tape, out.ahat, &feat.targets_a, &feat.mask)?;
                sum_ly = Some(match sum_ly {
                    Some(acc) => tape.add(acc, ly),
                    None => ly,
                });
                sum_la = Some(match sum_la {
                    Some(acc) => tape.add(acc, la),
                    None => la,
                });
            }
            let inv = 1.0 / chunk.len() as f64;
            let ly_batch = tape.scale(sum_ly.expect("non-empty batch"), inv);
            let la_batch = tape.scale(sum_la.expect("non-empty batch"), inv);
            let objective = match model.config.adversarial_mode {
                // The reversal node inside the model realizes the -mu
                // coupling, so both heads are minimized here.
                AdversarialMode::GradReverse => tape.add(ly_batch, la_batch),
                AdversarialMode::JointObjective => {
                    let scaled = tape.scale(la_batch, -mu);
                    tape.add(ly_batch, scaled)
                }
            };
            let ly_val = finite_or_dump(
                "outcome loss",
                tape.value(ly_batch).scalar_value(),
                epoch,
                step,
                &model,
                config,
            )?;
            let la_val = finite_or_dump(
                "treatment loss",
                tape.value(la_batch).scalar_value(),
                epoch,
                step,
                &model,
                config,
            )?;
            let grads = tape.backward(objective)?;
            let mut grad_map = BTreeMap::new();
            for (name, id) in &bound.leaves {
                let g = grads.get(*id).data().to_vec();
                if g.iter().any(|v| !v.is_finite()) {
                    finite_or_dump(
                        &format!("gradient of {name}"),
                        f64::NAN,
                        epoch,
                        step,
                        &model,
                        config,
                    )?;
                }
                grad_map.insert(name.clone(), g);
            }
            adam_step_filtered(
                &mut model.params,
                &grad_map,
                &mut adam,
                config.lr_ssm,
                config.lr_other,
                refresh,
            )?;
            epoch_ly += ly_val * chunk.len() as f64;
            epoch_la += la_val * chunk.len() as f64;
            seen += chunk.len();
        }
        let loss_y = epoch_ly / seen as f64;
        let loss_a = epoch_la / seen as f64;
        let eval = evaluate(&model, eval_set, EvalMode::Factual)?;
        let wall_seconds = if config.fixed_timing {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        history.push(LossReport {
            epoch,
            loss_y,
            loss_a,
            loss_total: total_loss(loss_y, loss_a, mu),
            nrmse: eval.nrmse,
            rmse_treated: eval.rmse_treated,
            rmse_untreated: eval.rmse_untreated,
            wall_seconds,
        });
        if let Some(dir) = &config.checkpoint_dir {
            save_checkpoint(&model, &dir.join(format!("epoch_{epoch:03}.json")))?;
        }
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sim::dataset::{generate_dataset, SplitTag};
    use crate::sim::SimConfig;
    use approx::assert_relative_eq;

    fn tiny_trajectory() -> PatientTrajectory {
        PatientTrajectory {
            patient_index: 0,
            obs_times: vec![0.0, 1.0, 3.0, 6.0],
            volumes: vec![2.0, 4.0, 6.0, 8.0],
            diameters: vec![1.5, 2.0, 2.25, 2.5],
            stages: vec![1, 1, 2, 2],
            chemo: vec![0, 1, 0, 1],
            radio: vec![0, 0, 1, 0],
            covariates: vec![vec![0.0; 2]; 4],
            initial_diameter_cm: 6.5,
        }
    }

    fn unit_norm() -> Normalization {
        Normalization {
            mean: 0.0,
            std: 1.0,
        }
    }

    #[test]
    fn config_defaults_match_contract() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 50);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.lr_ssm, 5e-4);
        assert_eq!(c.lr_other, 2e-5);
        assert_eq!(c.mu, 0.5);
        assert_eq!(ModelConfig::default().feature_dim, FEATURE_DIM);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_ssm: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            mu: -0.1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            max_len: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn featurize_shapes_and_targets() {
        let traj = tiny_trajectory();
        let norm = Normalization {
            mean: 2.0,
            std: 2.0,
        };
        let feat = featurize(&traj, &norm).unwrap();
        assert_eq!(feat.inputs.rows(), 4);
        assert_eq!(feat.inputs.cols(), FEATURE_DIM);
        assert_eq!(feat.mask, vec![true, true, true, false]);
        // Row 0: normalized volume (2-2)/2 = 0, stage 1 one-hot, no treatment,
        // dt 0, static 6.5/13.
        let row0 = &feat.inputs.data()[0..FEATURE_DIM];
        assert_eq!(row0, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        // Row 2: volume (6-2)/2 = 2, stage 2, radio on, dt = 3-1 = 2.
        let row2 = &feat.inputs.data()[2 * FEATURE_DIM..3 * FEATURE_DIM];
        assert_eq!(row2, &[2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.5]);
        // Target at k is the next normalized volume / any-treatment flag.
        assert_eq!(feat.targets_y[0], 1.0);
        assert_eq!(feat.targets_a[0], 1.0);
        assert_eq!(feat.targets_y[2], 3.0);
        assert_eq!(feat.targets_a[2], 1.0);
    }

    #[test]
    fn featurize_two_observations_has_one_unmasked() {
        let traj = truncate_trajectory(&tiny_trajectory(), 2);
        let feat = featurize(&traj, &unit_norm()).unwrap();
        assert_eq!(feat.mask, vec![true, false]);
    }

    #[test]
    fn featurize_uniform_times_constant_gap() {
        let mut traj = tiny_trajectory();
        traj.obs_times = vec![0.0, 2.0, 4.0, 6.0];
        let feat = featurize(&traj, &unit_norm()).unwrap();
        for k in 1..4 {
            assert_eq!(feat.inputs.data()[k * FEATURE_DIM + 7], 2.0);
        }
    }

    #[test]
    fn featurize_rejects_short() {
        let traj = truncate_trajectory(&tiny_trajectory(), 1);
        assert!(matches!(
            featurize(&traj, &unit_norm()),
            Err(TrainError::TooShort { len: 1 })
        ));
    }

    #[test]
    fn outcome_loss_hand_values() {
        let full = vec![true, true];
        assert_eq!(
            outcome_loss(&[1.0, 2.0], &[1.0, 2.0], &full).unwrap(),
            0.0
        );
        assert_eq!(
            outcome_loss(&[1.0, 3.0], &[0.0, 1.0], &full).unwrap(),
            2.5
        );
        // Doubling the errors quadruples the loss.
        assert_eq!(
            outcome_loss(&[2.0, 6.0], &[0.0, 2.0], &full).unwrap(),
            10.0
        );
        assert!(matches!(
            outcome_loss(&[1.0], &[1.0], &[false]),
            Err(TrainError::EmptyMask)
        ));
        assert!(outcome_loss(&[1.0], &[1.0, 2.0], &[true]).is_err());
    }

    #[test]
    fn treatment_loss_hand_values() {
        let m = vec![true];
        let near_one = 1.0 - 1e-7;
        assert!(treatment_loss(&[1.0], &[near_one], &m).unwrap() < 1e-6);
        assert_relative_eq!(
            treatment_loss(&[1.0], &[0.5], &m).unwrap(),
            std::f64::consts::LN_2,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            treatment_loss(&[0.0], &[0.5], &m).unwrap(),
            std::f64::consts::LN_2,
            max_relative = 1e-12
        );
        // Out-of-range probabilities are clamped, not rejected.
        assert!(treatment_loss(&[1.0], &[1.5], &m).unwrap().is_finite());
        assert!(matches!(
            treatment_loss(&[1.0], &[0.5], &[false]),
            Err(TrainError::EmptyMask)
        ));
    }

    #[test]
    fn total_loss_hand_values() {
        assert_eq!(total_loss(2.0, 1.0, 0.5), 1.5);
        assert_eq!(total_loss(2.0, 1.0, 0.0), 2.0);
        assert_eq!(total_loss(2.0, 0.0, 7.0), 2.0);
        // Linear in the treatment loss with slope -mu.
        let a = total_loss(1.0, 2.0, 0.25);
        let b = total_loss(1.0, 3.0, 0.25);
        assert_relative_eq!(b - a, -0.25, max_relative = 1e-15);
    }

    #[test]
    fn loss_nodes_match_plain_losses() {
        let targets_y = vec![0.3, -1.2, 0.7, 0.0];
        let targets_a = vec![1.0, 0.0, 1.0, 0.0];
        let mask = vec![true, true, true, false];
        let yhat_vals = vec![0.1, -0.5, 1.0, 9.9];
        let probs = vec![0.8, 0.3, 0.55, 0.99];

        let mut tape = Tape::new();
        let yhat = tape.leaf(Tensor::matrix(4, 1, yhat_vals.clone()));
        let ahat = tape.leaf(Tensor::matrix(4, 1, probs.clone()));
        let ly = outcome_loss_node(&mut tape, yhat, &targets_y, &mask).unwrap();
        let la = treatment_loss_node(&mut tape, ahat, &targets_a, &mask).unwrap();

        let plain_ly = outcome_loss(&targets_y, &yhat_vals, &mask).unwrap();
        let plain_la = treatment_loss(&targets_a, &probs, &mask).unwrap();
        assert_relative_eq!(
            tape.value(ly).scalar_value(),
            plain_ly,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            tape.value(la).scalar_value(),
            plain_la,
            max_relative = 1e-12
        );

        // Gradients: masked-out positions must receive zero gradient.
        let total = tape.add(ly, la);
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(yhat).data()[3], 0.0);
        assert_eq!(grads.get(ahat).data()[3], 0.0);
        // Unmasked MSE gradient is 2(p - t)/k.
        assert_relative_eq!(
            grads.get(yhat).data()[0],
            2.0 * (0.1 - 0.3) / 3.0,
            max_relative = 1e-12
        );
        // Unmasked BCE gradient for a positive label is -1/(k p).
        assert_relative_eq!(
            grads.get(ahat).data()[0],
            -1.0 / (3.0 * 0.8),
            max_relative = 1e-9
        );
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = ParamSet::default();
        params.insert("encoder.weight", vec![1.0, -2.0, 3.0]);
        let mut grads = BTreeMap::new();
        grads.insert("encoder.weight".to_string(), vec![0.0, 0.0, 0.0]);
        let mut state = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, 1e-3, 1e-3).unwrap();
        }
        assert_eq!(params.get("encoder.weight"), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut params = ParamSet::default();
        params.insert("encoder.weight", vec![0.0, 0.0]);
        let mut grads = BTreeMap::new();
        grads.insert("encoder.weight".to_string(), vec![0.3, -7.0]);
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, 1e-3, 1e-2).unwrap();
        let p = params.get("encoder.weight");
        assert_relative_eq!(p[0], -1e-2, max_relative = 1e-4);
        assert_relative_eq!(p[1], 1e-2, max_relative = 1e-4);
    }

    #[test]
    fn adam_group_rates_differ_by_ratio() {
        let mut params = ParamSet::default();
        params.insert("layers.0.channels.0.c", vec![0.0]);
        params.insert("layers.0.mix", vec![0.0]);
        let mut grads = BTreeMap::new();
        grads.insert("layers.0.channels.0.c".to_string(), vec![1.0]);
        grads.insert("layers.0.mix".to_string(), vec![1.0]);
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, 5e-4, 2e-5).unwrap();
        let ssm_step = params.get("layers.0.channels.0.c")[0].abs();
        let other_step = params.get("layers.0.mix")[0].abs();
        assert_relative_eq!(ssm_step / other_step, 25.0, max_relative = 1e-6);
    }

    #[test]
    fn adam_rejects_missing_or_mismatched_grads() {
        let mut params = ParamSet::default();
        params.insert("encoder.weight", vec![0.0, 0.0]);
        let mut state = AdamState::default();
        let empty = BTreeMap::new();
        assert!(adam_step(&mut params, &empty, &mut state, 1e-3, 1e-3).is_err());
        let mut short = BTreeMap::new();
        short.insert("encoder.weight".to_string(), vec![1.0]);
        assert!(adam_step(&mut params, &short, &mut state, 1e-3, 1e-3).is_err());
    }

    fn tiny_bundle(n: usize, seed: u64) -> crate::sim::dataset::DatasetBundle {
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

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 11,
            max_len: 8,
            fixed_timing: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn train_history_len_and_determinism() {
        let bundle = tiny_bundle(5, 3);
        let config = tiny_train_config();
        let (_, h1) = train(tiny_model(1), &bundle.train, &bundle.train, &config).unwrap();
        let (_, h2) = train(tiny_model(1), &bundle.train, &bundle.train, &config).unwrap();
        assert_eq!(h1.len(), config.epochs);
        assert_eq!(h1, h2);
        for (i, row) in h1.iter().enumerate() {
            assert_eq!(row.epoch, i + 1);
            assert!(row.loss_y >= 0.0 && row.loss_a >= 0.0);
            assert_relative_eq!(
                row.loss_total,
                row.loss_y - 0.5 * row.loss_a,
                max_relative = 1e-12
            );
            assert_eq!(row.wall_seconds, 0.0);
        }
    }

    #[test]
    fn train_writes_checkpoints_per_epoch() {
        let bundle = tiny_bundle(4, 5);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..tiny_train_config()
        };
        train(tiny_model(2), &bundle.train, &bundle.train, &config).unwrap();
        for epoch in 1..=config.epochs {
            assert!(dir.path().join(format!("epoch_{epoch:03}.json")).exists());
        }
        let reloaded =
            crate::model::checkpoint::load_checkpoint(&dir.path().join("epoch_003.json"))
                .unwrap();
        assert_eq!(reloaded.param_count(), tiny_model(2).param_count());
    }

    #[test]
    fn train_reduces_loss_on_tiny_overfit() {
        let bundle = tiny_bundle(4, 9);
        let config = TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr_ssm: 5e-3,
            lr_other: 1e-2,
            seed: 4,
            max_len: 8,
            fixed_timing: true,
            ..TrainConfig::default()
        };
        let model_config = ModelConfig {
            layers: 1,
            latent_dim: 6,
            state_size: 4,
            mu: 0.0,
            ..ModelConfig::default()
        };
        let model = Model::init(model_config, 7).unwrap();
        let (_, history) = train(model, &bundle.train, &bundle.train, &config).unwrap();
        let first = history.first().unwrap().loss_y;
        let last = history.last().unwrap().loss_y;
        assert!(
            last < 0.5 * first,
            "loss_y {first} -> {last} did not drop by half"
        );
    }

    #[test]
    fn adam_step_filtered_skips_treatment_head() {
        let mut params = ParamSet::from_map(BTreeMap::from([
            ("head_a.weight".to_string(), vec![1.0, 2.0]),
            ("encoder.weight".to_string(), vec![1.0]),
        ]));
        let grads = BTreeMap::from([
            ("head_a.weight".to_string(), vec![1.0, 1.0]),
            ("encoder.weight".to_string(), vec![1.0]),
        ]);
        let mut state = AdamState::default();
        adam_step_filtered(&mut params, &grads, &mut state, 1e-2, 1e-2, true).unwrap();
        assert_eq!(params.get("head_a.weight"), &[1.0, 2.0]);
        assert!(params.get("encoder.weight")[0] < 1.0);
    }

    #[test]
    fn head_refresh_improves_treatment_fit_on_frozen_trunk() {
        let bundle = tiny_bundle(6, 11);
        let mut model = tiny_model(3);
        let norm = &bundle.train.normalization;
        let features: Vec<Featurized> = bundle
            .train
            .trajectories
            .iter()
            .map(|t| featurize(t, norm).unwrap())
            .collect();
        let head_loss = |model: &Model| -> f64 {
            let mut labels = Vec::new();
            let mut probs = Vec::new();
            let mut mask = Vec::new();
            for feat in &features {
                let (_, ahat) = model.forward_once(&feat.inputs).unwrap();
                labels.extend_from_slice(&feat.targets_a);
                probs.extend_from_slice(&ahat);
                mask.extend_from_slice(&feat.mask);
            }
            treatment_loss(&labels, &probs, &mask).unwrap()
        };
        // Wreck the head so the refresh has real work to do.
        for v in model.params.get_mut("head_a.weight") {
            *v = 3.0;
        }
        let before = head_loss(&model);
        let trunk_before = model.params.get("encoder.weight").to_vec();
        let config = TrainConfig {
            head_refresh_steps: 300,
            lr_other: 5e-2,
            ..tiny_train_config()
        };
        let mut adam = AdamState::default();
        refresh_head(&mut model, &features, &mut adam, &config).unwrap();
        let after = head_loss(&model);
        assert!(after < before, "refresh did not improve: {before} -> {after}");
        // A linear head with a bias can always do at least as well as the
        // best constant predictor, which is never worse than chance.
        assert!(
            after <= std::f64::consts::LN_2 + 0.05,
            "refreshed head stuck at {after}"
        );
        assert_eq!(model.params.get("encoder.weight"), trunk_before.as_slice());
        // Deterministic: a second refresh from the same state is a no-op
        // only if Adam state matches, so rerun the whole thing instead.
        let mut model2 = tiny_model(3);
        for v in model2.params.get_mut("head_a.weight") {
            *v = 3.0;
        }
        let mut adam2 = AdamState::default();
        refresh_head(&mut model2, &features, &mut adam2, &config).unwrap();
        assert_eq!(
            model.params.get("head_a.weight"),
            model2.params.get("head_a.weight")
        );
    }

    #[test]
    fn train_aborts_on_non_finite_params() {
        let bundle = tiny_bundle(3, 2);
        let mut model = tiny_model(3);
        model.params.get_mut("encoder.weight")[0] = f64::NAN;
        let err = train(model, &bundle.train, &bundle.train, &tiny_train_config()).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }));
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let bundle = tiny_bundle(3, 2);
        let empty = Dataset {
            trajectories: vec![],
            ..bundle.train.clone()
        };
        assert!(matches!(
            train(tiny_model(0), &empty, &bundle.train, &tiny_train_config()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn history_csv_format() {
        let history = vec![LossReport {
            epoch: 1,
            loss_y: 0.5,
            loss_a: 0.25,
            loss_total: 0.375,
            nrmse: 0.1,
            rmse_treated: 0.2,
            rmse_untreated: 0.3,
            wall_seconds: 0.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        save_history(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), LossReport::CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "1,0.5,0.25,0.375,0.1,0.2,0.3,0.000");
        assert_eq!(history[0].loss_sum(), 0.75);
    }

    #[test]
    fn truncation_respects_max_len() {
        let traj = tiny_trajectory();
        let cut = truncate_trajectory(&traj, 3);
        assert_eq!(cut.len(), 3);
        assert_eq!(cut.obs_times, vec![0.0, 1.0, 3.0]);
        let all = truncate_trajectory(&traj, 10);
        assert_eq!(all, traj);
    }

    #[test]
    fn split_tags_survive_bundle_round_trip() {
        let bundle = tiny_bundle(10, 1);
        assert_eq!(bundle.train.split, SplitTag::Train);
        assert_eq!(bundle.train.trajectories.len(), 8);
        assert_eq!(bundle.val.trajectories.len(), 1);
        assert_eq!(bundle.test.trajectories.len(), 1);
    }
}
