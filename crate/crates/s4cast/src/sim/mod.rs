//! Synthetic longitudinal oncology data.
//!
//! Each patient is a latent tumor-volume process integrated on a fine grid:
//! logistic regrowth toward a carrying capacity, pharmacokinetic chemotherapy
//! effect (exponentially decaying concentration, impulse dosing), quadratic
//! radiotherapy effect, and multiplicative noise. A confounded policy assigns
//! daily treatments with probability increasing in tumor diameter (strength
//! `gamma`), and a stage-modulated self-exciting process picks irregular
//! observation times (intensity scale `kappa`). Because every noise draw
//! comes from a per-patient counter-based stream and is consumed on every
//! step regardless of treatment, re-running a patient under a forced
//! treatment plan yields exact counterfactual ground truth (common random
//! numbers).

pub mod dataset;
pub mod hawkes;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("tumor volume must be positive (got {0})")]
    NonPositiveVolume(f64),
    #[error("integration step must be positive (got {0})")]
    NonPositiveStep(f64),
    #[error("observation-process branching ratio {ratio} >= 1 would run away")]
    BranchingRatio { ratio: f64 },
    #[error("split time {t_split} outside the simulated range [0, {horizon}]")]
    SplitOutOfRange { t_split: f64, horizon: f64 },
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("dataset file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

/// Largest tumor diameter the model tracks, in cm.
pub const D_MAX_CM: f64 = 13.0;

/// Tumor growth / treatment-response constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PkpdParams {
    /// Logistic growth rate, per day.
    pub rho: f64,
    /// Carrying capacity: volume of a sphere at the maximum diameter, cm^3.
    pub carrying_capacity: f64,
    /// Chemotherapy kill rate per unit concentration.
    pub beta_c: f64,
    /// Linear radiotherapy kill rate per Gy.
    pub alpha_r: f64,
    /// Quadratic radiotherapy kill rate per Gy^2.
    pub beta_r: f64,
    /// Multiplicative noise scale.
    pub sigma: f64,
    /// Smallest representable volume, cm^3.
    pub v_min: f64,
    /// Concentration added at the start of each chemo day.
    pub chemo_impulse: f64,
    /// Chemotherapy concentration half-life, days.
    pub chemo_half_life_days: f64,
    /// Radiotherapy dose on treated days, Gy.
    pub radio_dose: f64,
}

impl Default for PkpdParams {
    fn default() -> Self {
        let alpha_r = 0.0398;
        Self {
            rho: 7e-5 * 30.0,
            carrying_capacity: sphere_volume(D_MAX_CM),
            beta_c: 0.028,
            alpha_r,
            beta_r: alpha_r / 10.0,
            sigma: 0.01,
            v_min: 0.001,
            chemo_impulse: 5.0,
            chemo_half_life_days: 1.0,
            radio_dose: 2.0,
        }
    }
}

/// Observation-time process constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HawkesParams {
    /// Baseline observation rate per day at stage 1.
    pub base_rate: f64,
    /// Excitation jump per observation.
    pub alpha: f64,
    /// Excitation decay rate per day.
    pub beta: f64,
}

impl Default for HawkesParams {
    fn default() -> Self {
        Self {
            base_rate: 0.5,
            alpha: 0.2,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Patient count.
    pub n: usize,
    /// Confounding strength for chemotherapy assignment.
    pub gamma_c: f64,
    /// Confounding strength for radiotherapy assignment.
    pub gamma_r: f64,
    /// Observation-intensity modulation across stages (>= 1).
    pub kappa: f64,
    /// Days simulated per patient.
    pub horizon: f64,
    /// Latent integration step, days.
    pub dt_sim: f64,
    pub seed: u64,
    pub pkpd: PkpdParams,
    pub hawkes: HawkesParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 500,
            gamma_c: 0.0,
            gamma_r: 0.0,
            kappa: 1.0,
            horizon: 60.0,
            dt_sim: 0.25,
            seed: 0,
            pkpd: PkpdParams::default(),
            hawkes: HawkesParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n < 1 {
            return Err(SimError::InvalidConfig("n must be >= 1".into()));
        }
        if !self.gamma_c.is_finite()
            || !self.gamma_r.is_finite()
            || self.gamma_c < 0.0
            || self.gamma_r < 0.0
        {
            return Err(SimError::InvalidConfig(
                "gamma_c and gamma_r must be finite and >= 0".into(),
            ));
        }
        if !self.kappa.is_finite() || self.kappa < 1.0 {
            return Err(SimError::InvalidConfig("kappa must be >= 1".into()));
        }
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(SimError::InvalidConfig("horizon must be > 0".into()));
        }
        if !self.dt_sim.is_finite() || self.dt_sim <= 0.0 || self.dt_sim > 1.0 {
            return Err(SimError::InvalidConfig("dt_sim must be in (0, 1]".into()));
        }
        let ratio = self.hawkes.alpha / self.hawkes.beta;
        if ratio >= 1.0 {
            return Err(SimError::BranchingRatio { ratio });
        }
        Ok(())
    }
}

pub fn sphere_volume(diameter_cm: f64) -> f64 {
    std::f64::consts::PI / 6.0 * diameter_cm.powi(3)
}

pub fn sphere_diameter(volume_cm3: f64) -> f64 {
    (6.0 * volume_cm3 / std::f64::consts::PI).cbrt()
}

/// One Euler step of the tumor volume under current treatment exposure.
///
/// `dV = (rho ln(K/V) − beta_c·conc − (alpha_r·dose + beta_r·dose²))·V·dt
///       + sigma·V·sqrt(dt)·eps`, clamped to `[v_min, K]`. The noise draw is
/// consumed unconditionally so parallel rollouts stay aligned.
pub fn tumor_step(
    params: &PkpdParams,
    volume: f64,
    chemo_conc: f64,
    radio_dose: f64,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, SimError> {
    if volume <= 0.0 {
        return Err(SimError::NonPositiveVolume(volume));
    }
    if dt <= 0.0 {
        return Err(SimError::NonPositiveStep(dt));
    }
    let eps: f64 = rng.sample(StandardNormal);
    let growth = params.rho * (params.carrying_capacity / volume).ln();
    let chemo_kill = params.beta_c * chemo_conc;
    let radio_kill = params.alpha_r * radio_dose + params.beta_r * radio_dose * radio_dose;
    let drift = (growth - chemo_kill - radio_kill) * volume * dt;
    let diffusion = params.sigma * volume * dt.sqrt() * eps;
    Ok((volume + drift + diffusion).clamp(params.v_min, params.carrying_capacity))
}

/// Exponential concentration decay over `dt` days.
pub fn chemo_decay(conc: f64, dt: f64, half_life_days: f64) -> f64 {
    conc * 2f64.powf(-dt / half_life_days)
}

/// Probability that treatment is assigned at the given diameter.
pub fn treatment_probability(diameter_cm: f64, gamma: f64) -> f64 {
    let x = (gamma / D_MAX_CM) * (diameter_cm - D_MAX_CM / 2.0);
    1.0 / (1.0 + (-x).exp())
}

/// Bernoulli treatment draw at the given diameter and confounding strength.
pub fn treatment_policy(diameter_cm: f64, gamma: f64, rng: &mut ChaCha8Rng) -> bool {
    rng.gen::<f64>() < treatment_probability(diameter_cm, gamma)
}

/// Cancer stage from tumor diameter: <3 cm stage 1, <5 stage 2, <7 stage 3,
/// else stage 4 (boundaries belong to the upper stage).
pub fn stage_of(diameter_cm: f64) -> u8 {
    debug_assert!(diameter_cm > 0.0);
    if diameter_cm < 3.0 {
        1
    } else if diameter_cm < 5.0 {
        2
    } else if diameter_cm < 7.0 {
        3
    } else {
        4
    }
}

/// Per-patient stream purposes; combined with the patient index into a
/// counter-mode stream id so every patient/purpose pair is independent.
#[derive(Debug, Clone, Copy)]
enum StreamPurpose {
    Noise = 0,
    Policy = 1,
    Observation = 2,
    Init = 3,
}

fn patient_rng(config: &SimConfig, patient_index: usize, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(patient_index as u64 * 4 + purpose as u64);
    rng
}

/// Treatment plan override for counterfactual re-simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum ForcedPlan {
    /// Replay the factual policy draws.
    Factual,
    /// Chemo and radio on every day from the split onward.
    AlwaysTreat,
    /// No treatment from the split onward.
    NeverTreat,
    /// Explicit (chemo, radio) per day from the split onward; days beyond
    /// the list fall back to no treatment.
    Custom(Vec<(bool, bool)>),
}

/// One daily policy decision, recorded for confounding diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyDecision {
    pub day: f64,
    pub diameter_cm: f64,
    pub chemo: bool,
    pub radio: bool,
}

/// Fully resolved latent path on the integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    /// Grid times 0, dt, 2dt, ..., horizon.
    pub times: Vec<f64>,
    /// Volume at each grid time.
    pub volumes: Vec<f64>,
    /// Stage at each grid time.
    pub stages: Vec<u8>,
    /// Whether chemo / radio was active during the day containing each grid time.
    pub chemo_active: Vec<bool>,
    pub radio_active: Vec<bool>,
    pub decisions: Vec<DailyDecision>,
    pub initial_diameter_cm: f64,
}

impl LatentPath {
    /// Index of the grid point nearest to `t`.
    pub fn nearest_index(&self, t: f64, dt: f64) -> usize {
        ((t / dt).round() as usize).min(self.times.len() - 1)
    }
}

/// Integrate one patient's latent process.
///
/// With `override_plan = None` this is the factual trajectory. With
/// `Some((t_split, plan))`, policy decisions before `t_split` replay the
/// factual stream and decisions from `t_split` onward follow the plan; the
/// volume-noise stream is consumed identically in both cases, so paths agree
/// exactly up to the split.
pub fn simulate_latent(
    config: &SimConfig,
    patient_index: usize,
    override_plan: Option<(f64, &ForcedPlan)>,
) -> Result<LatentPath, SimError> {
    config.validate()?;
    if let Some((t_split, _)) = override_plan {
        if !(0.0..=config.horizon).contains(&t_split) {
            return Err(SimError::SplitOutOfRange {
                t_split,
                horizon: config.horizon,
            });
        }
    }
    let dt = config.dt_sim;
    let steps = (config.horizon / dt).round() as usize;
    let mut noise_rng = patient_rng(config, patient_index, StreamPurpose::Noise);
    let mut policy_rng = patient_rng(config, patient_index, StreamPurpose::Policy);
    let mut init_rng = patient_rng(config, patient_index, StreamPurpose::Init);

    let initial_diameter = 1.0 + init_rng.gen::<f64>() * 11.0;
    let mut volume = sphere_volume(initial_diameter);
    let mut conc = 0.0;
    let mut chemo_today = false;
    let mut radio_today = false;
    let mut day_counter: usize = 0;
    let mut next_decision = 0.0f64;

    let mut path = LatentPath {
        times: Vec::with_capacity(steps + 1),
        volumes: Vec::with_capacity(steps + 1),
        stages: Vec::with_capacity(steps + 1),
        chemo_active: Vec::with_capacity(steps + 1),
        radio_active: Vec::with_capacity(steps + 1),
        decisions: Vec::new(),
        initial_diameter_cm: initial_diameter,
    };

    for k in 0..=steps {
        let t = k as f64 * dt;
        if t + 1e-9 >= next_decision {
            let diameter = sphere_diameter(volume);
            // The factual draws are always consumed so that overridden and
            // factual runs stay stream-aligned.
            let drawn_chemo = treatment_policy(diameter, config.gamma_c, &mut policy_rng);
            let drawn_radio = treatment_policy(diameter, config.gamma_r, &mut policy_rng);
            let (chemo, radio) = match override_plan {
                Some((t_split, plan)) if t + 1e-9 >= t_split => match plan {
                    ForcedPlan::Factual => (drawn_chemo, drawn_radio),
                    ForcedPlan::AlwaysTreat => (true, true),
                    ForcedPlan::NeverTreat => (false, false),
                    ForcedPlan::Custom(days) => {
                        let offset = (t - t_split).floor().max(0.0) as usize;
                        days.get(offset).copied().unwrap_or((false, false))
                    }
                },
                _ => (drawn_chemo, drawn_radio),
            };
            chemo_today = chemo;
            radio_today = radio;
            if chemo {
                conc += config.pkpd.chemo_impulse;
            }
            path.decisions.push(DailyDecision {
                day: day_counter as f64,
                diameter_cm: diameter,
                chemo,
                radio,
            });
            day_counter += 1;
            next_decision += 1.0;
        }

        path.times.push(t);
        path.volumes.push(volume);
        path.stages.push(stage_of(sphere_diameter(volume)));
        path.chemo_active.push(chemo_today);
        path.radio_active.push(radio_today);

        if k < steps {
            let dose = if radio_today { config.pkpd.radio_dose } else { 0.0 };
            volume = tumor_step(&config.pkpd, volume, conc, dose, dt, &mut noise_rng)?;
            conc = chemo_decay(conc, dt, config.pkpd.chemo_half_life_days);
        }
    }
    Ok(path)
}

/// Ground-truth counterfactual path for a patient under a forced plan from
/// `t_split` onward, sharing the factual noise stream.
pub fn counterfactual_rollout(
    config: &SimConfig,
    patient_index: usize,
    t_split: f64,
    plan: &ForcedPlan,
) -> Result<LatentPath, SimError> {
    simulate_latent(config, patient_index, Some((t_split, plan)))
}
