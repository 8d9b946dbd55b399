//! The deep state-space network.
//!
//! A stack of layers, each holding `H` independent single-input state-space
//! channels parameterized through the normal-plus-low-rank spectrum, a
//! position-wise mixing matrix, bias, smooth activation, and a residual
//! connection. An input encoder lifts `F` features to width `H`; two linear
//! heads read the final latent sequence out: an unbounded outcome head and a
//! sigmoid treatment head fed through a gradient-reversal node.

pub mod checkpoint;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::linalg::LinalgError;
use crate::ssm::nplr::{nplr_decompose, SpectrumBasis};
use crate::ssm::{hippo_legs, SsmError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("channel discretization failed: {0}")]
    Discretization(#[from] LinalgError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint is missing parameter {0}")]
    MissingParameter(String),
}

/// Nonlinearity applied after mixing, before the residual add.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationTag {
    Identity,
    /// Tanh-based smooth approximation of the Gaussian-error linear unit.
    #[default]
    SmoothGelu,
}

/// How the treatment head couples to the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Identity forward, gradient scaled by -mu into the trunk; the head
    /// itself still learns to predict treatment.
    #[default]
    GradReverse,
    /// Literally minimize loss_y - mu * loss_a; kept for comparison runs.
    JointObjective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    /// Channel width H.
    pub latent_dim: usize,
    /// State size N per channel.
    pub state_size: usize,
    /// Input feature width F.
    pub feature_dim: usize,
    /// Trade-off weight on the treatment loss.
    pub mu: f64,
    #[serde(default)]
    pub activation: ActivationTag,
    #[serde(default)]
    pub adversarial_mode: AdversarialMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            latent_dim: 64,
            state_size: 16,
            feature_dim: 9,
            mu: 0.5,
            activation: ActivationTag::SmoothGelu,
            adversarial_mode: AdversarialMode::GradReverse,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.latent_dim == 0 || self.state_size == 0 || self.feature_dim == 0
        {
            return Err(ModelError::InvalidConfig(
                "layers, latent_dim, state_size, feature_dim must all be >= 1".into(),
            ));
        }
        if self.mu < 0.0 || !self.mu.is_finite() {
            return Err(ModelError::InvalidConfig("mu must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Named flat parameter arrays.
///
/// Channel-level names look like `layers.0.channels.3.lambda`; layer-level
/// `layers.0.mix`; global `encoder.weight`, `head_y.bias`, etc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Vec<f64>>,
}

/// Optimizer grouping: the five per-channel state-space arrays train at
/// `lr_ssm`; everything else (log-step, mixing, bias, encoder, heads) at
/// `lr_other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Ssm,
    Other,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.entries.insert(name.into(), values);
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Vec<f64>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Vec<f64>> {
        self.entries
    }

    pub fn from_map(map: BTreeMap<String, Vec<f64>>) -> Self {
        Self { entries: map }
    }

    pub fn group_of(name: &str) -> ParamGroup {
        match name.rsplit('.').next().unwrap_or("") {
            "lambda" | "p" | "q" | "b" | "c" => ParamGroup::Ssm,
            _ => ParamGroup::Other,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamSet,
    basis: Rc<SpectrumBasis>,
}

/// Expected number of trainable scalars: per layer, H channels of 5N
/// state-space values plus one log-step each, an H x H mixer and H biases;
/// plus the F->H encoder and the two H->1 heads, all with biases.
pub fn expected_param_count(config: &ModelConfig) -> usize {
    let (l, h, n, f) = (
        config.layers,
        config.latent_dim,
        config.state_size,
        config.feature_dim,
    );
    l * (h * 5 * n + h + h * h + h) + (f * h + h) + 2 * (h + 1)
}

impl Model {
    /// Deterministic initialization from a seed.
    ///
    /// Every channel starts at the same decomposed memory matrix (spectrum,
    /// low-rank factors, input vector); the readout `C` (normal, scaled
    /// 1/sqrt(N)) and log-step (uniform in [ln 0.001, ln 0.1]) differ per
    /// channel and break the symmetry. Mixing and head weights are normal
    /// scaled 1/sqrt(H); encoder weights normal scaled 1/sqrt(F); biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let n = config.state_size;
        let h = config.latent_dim;
        let f = config.feature_dim;
        let form = nplr_decompose(&hippo_legs(n)?)?;
        let basis = Rc::new(form.spectrum_basis());
        let lambda0 = form.spectrum_parameters();
        let p0: Vec<f64> = (0..n).map(|i| form.p[(i, 0)]).collect();
        let q0: Vec<f64> = (0..n).map(|i| form.q[(i, 0)]).collect();
        let b0: Vec<f64> = (0..n).map(|i| ((2 * i + 1) as f64).sqrt()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |scale: f64, count: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..count)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * scale
                })
                .collect()
        };

        let mut params = ParamSet::default();
        let (log_lo, log_hi) = (0.001f64.ln(), 0.1f64.ln());
        for l in 0..config.layers {
            for ch in 0..h {
                let prefix = format!("layers.{l}.channels.{ch}");
                params.insert(format!("{prefix}.lambda"), lambda0.clone());
                params.insert(format!("{prefix}.p"), p0.clone());
                params.insert(format!("{prefix}.q"), q0.clone());
                params.insert(format!("{prefix}.b"), b0.clone());
                params.insert(
                    format!("{prefix}.c"),
                    normal(1.0 / (n as f64).sqrt(), n, &mut rng),
                );
                let ld = log_lo + rng.gen::<f64>() * (log_hi - log_lo);
                params.insert(format!("{prefix}.log_delta"), vec![ld]);
            }
            params.insert(
                format!("layers.{l}.mix"),
                normal(1.0 / (h as f64).sqrt(), h * h, &mut rng),
            );
            params.insert(format!("layers.{l}.bias"), vec![0.0; h]);
        }
        params.insert(
            "encoder.weight".to_string(),
            normal(1.0 / (f as f64).sqrt(), f * h, &mut rng),
        );
        params.insert("encoder.bias".to_string(), vec![0.0; h]);
        params.insert(
            "head_y.weight".to_string(),
            normal(1.0 / (h as f64).sqrt(), h, &mut rng),
        );
        params.insert("head_y.bias".to_string(), vec![0.0]);
        params.insert(
            "head_a.weight".to_string(),
            normal(1.0 / (h as f64).sqrt(), h, &mut rng),
        );
        params.insert("head_a.bias".to_string(), vec![0.0]);

        Ok(Self {
            config,
            seed,
            params,
            basis,
        })
    }

    /// Rebuild a model from (config, seed, parameters); the spectrum basis is
    /// a pure function of the state size and is not stored.
    pub fn from_parts(
        config: ModelConfig,
        seed: u64,
        params: ParamSet,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let form = nplr_decompose(&hippo_legs(config.state_size)?)?;
        Ok(Self {
            config,
            seed,
            params,
            basis: Rc::new(form.spectrum_basis()),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    /// Put every parameter on the tape as a leaf and materialize the
    /// discrete channel matrices. One binding serves a whole batch.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel, ModelError> {
        let h = self.config.latent_dim;
        let n = self.config.state_size;
        let mut leaves = BTreeMap::new();
        let leaf = |tape: &mut Tape, leaves: &mut BTreeMap<String, NodeId>, name: String, shape: Option<(usize, usize)>| {
            let data = self.params.get(&name).to_vec();
            let t = match shape {
                Some((r, c)) => Tensor::matrix(r, c, data),
                None => {
                    if data.len() == 1 {
                        Tensor::scalar(data[0])
                    } else {
                        Tensor::vector(data)
                    }
                }
            };
            let id = tape.leaf(t);
            leaves.insert(name, id);
            id
        };

        let identity = Tensor::matrix(
            n,
            n,
            {
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    d[i * n + i] = 1.0;
                }
                d
            },
        );

        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let mut mats = LayerMats {
                a_bars: Vec::with_capacity(h),
                b_bars: Vec::with_capacity(h),
                cs: Vec::with_capacity(h),
            };
            for ch in 0..h {
                let prefix = format!("layers.{l}.channels.{ch}");
                let lam = leaf(tape, &mut leaves, format!("{prefix}.lambda"), None);
                let p = leaf(tape, &mut leaves, format!("{prefix}.p"), None);
                let q = leaf(tape, &mut leaves, format!("{prefix}.q"), None);
                let b = leaf(tape, &mut leaves, format!("{prefix}.b"), None);
                let c = leaf(tape, &mut leaves, format!("{prefix}.c"), None);
                let log_delta = leaf(tape, &mut leaves, format!("{prefix}.log_delta"), None);

                let a = tape.nplr_assemble(lam, p, q, self.basis.clone());
                let delta = tape.exp(log_delta);
                let half_neg = tape.scale_by_node(a, delta, -0.5);
                let f_mat = tape.add_const(half_neg, identity.clone());
                let half_pos = tape.scale_by_node(a, delta, 0.5);
                let g_mat = tape.add_const(half_pos, identity.clone());
                let a_bar = tape.solve(f_mat, g_mat)?;
                let delta_b = tape.scale_by_node(b, delta, 1.0);
                let b_bar = tape.solve(f_mat, delta_b)?;

                mats.a_bars.push(a_bar);
                mats.b_bars.push(b_bar);
                mats.cs.push(c);
            }
            let mix = leaf(tape, &mut leaves, format!("layers.{l}.mix"), Some((h, h)));
            let bias = leaf(tape, &mut leaves, format!("layers.{l}.bias"), None);
            layers.push(BoundLayer { mats, mix, bias });
        }

        let f = self.config.feature_dim;
        let encoder_w = leaf(tape, &mut leaves, "encoder.weight".to_string(), Some((f, h)));
        let encoder_b = leaf(tape, &mut leaves, "encoder.bias".to_string(), None);
        let head_y_w = leaf(tape, &mut leaves, "head_y.weight".to_string(), Some((h, 1)));
        let head_y_b = leaf(tape, &mut leaves, "head_y.bias".to_string(), None);
        let head_a_w = leaf(tape, &mut leaves, "head_a.weight".to_string(), Some((h, 1)));
        let head_a_b = leaf(tape, &mut leaves, "head_a.bias".to_string(), None);

        Ok(BoundModel {
            config: self.config.clone(),
            leaves,
            layers,
            encoder_w,
            encoder_b,
            head_y_w,
            head_y_b,
            head_a_w,
            head_a_b,
        })
    }

    /// Convenience: run one input through a fresh tape without keeping it.
    pub fn forward_once(&self, input: &Tensor) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = bound.forward(&mut tape, input);
        Ok((
            tape.value(out.yhat).data().to_vec(),
            tape.value(out.ahat).data().to_vec(),
        ))
    }
}

/// Node ids of one layer's materialized channel matrices.
pub struct LayerMats {
    pub a_bars: Vec<NodeId>,
    pub b_bars: Vec<NodeId>,
    pub cs: Vec<NodeId>,
}

struct BoundLayer {
    mats: LayerMats,
    mix: NodeId,
    bias: NodeId,
}

/// Model bound onto a tape: parameter leaves plus materialized channels.
pub struct BoundModel {
    pub config: ModelConfig,
    /// Leaf node per parameter name, for gradient readout after backward.
    pub leaves: BTreeMap<String, NodeId>,
    layers: Vec<BoundLayer>,
    encoder_w: NodeId,
    encoder_b: NodeId,
    head_y_w: NodeId,
    head_y_b: NodeId,
    head_a_w: NodeId,
    head_a_b: NodeId,
}

/// Output node ids of one sample's forward pass.
pub struct ForwardOutputs {
    /// (L x 1) unbounded outcome predictions.
    pub yhat: NodeId,
    /// (L x 1) treatment probabilities, strictly inside (0, 1).
    pub ahat: NodeId,
    /// (L x H) final latent sequence.
    pub z: NodeId,
}

/// One layer: per-channel scans, mix, bias, activation, residual.
pub fn layer_forward(
    tape: &mut Tape,
    mats: &LayerMats,
    mix: NodeId,
    bias: NodeId,
    activation: ActivationTag,
    input: NodeId,
) -> NodeId {
    let scanned = tape.scan_channels(
        mats.a_bars.clone(),
        mats.b_bars.clone(),
        mats.cs.clone(),
        input,
    );
    let mixed = tape.matmul(scanned, mix);
    let biased = tape.add_broadcast(mixed, bias);
    let activated = match activation {
        ActivationTag::Identity => biased,
        ActivationTag::SmoothGelu => tape.tanh_gelu(biased),
    };
    tape.add(activated, input)
}

impl BoundModel {
    /// Forward one sample of shape (L x F). Output length equals input length.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> ForwardOutputs {
        assert_eq!(
            input.cols(),
            self.config.feature_dim,
            "input feature width {} != configured {}",
            input.cols(),
            self.config.feature_dim
        );
        let u = tape.leaf(input.clone());
        let enc = tape.matmul(u, self.encoder_w);
        let mut z = tape.add_broadcast(enc, self.encoder_b);
        for layer in &self.layers {
            z = layer_forward(
                tape,
                &layer.mats,
                layer.mix,
                layer.bias,
                self.config.activation,
                z,
            );
        }
        let ym = tape.matmul(z, self.head_y_w);
        let yhat = tape.add_broadcast(ym, self.head_y_b);
        let head_in = match self.config.adversarial_mode {
            AdversarialMode::GradReverse => tape.grad_reverse(z, self.config.mu),
            AdversarialMode::JointObjective => z,
        };
        let am = tape.matmul(head_in, self.head_a_w);
        let alogit = tape.add_broadcast(am, self.head_a_b);
        let ahat = tape.sigmoid(alogit);
        ForwardOutputs { yhat, ahat, z }
    }
}
