//! Group-based vertical expansion of a trained layer stack.
//!
//! The source model's `R` layers are split into `P` groups of `Q`; each
//! group gains `q` new layers appended after its originals, initialized by
//! one of five policies. A new layer's "preceding" layers are the ones
//! already placed before it in the final ordering, so chained copies
//! collapse to the group's last original layer.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::model::{xavier_uniform, LayerParams, ModelParams};
use crate::router::RouterParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Random,
    Copy,
    Identity,
    LinearMerge,
    Slerp,
}

impl FromStr for Policy {
    type Err = DloError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Policy::Random),
            "copy" => Ok(Policy::Copy),
            "identity" => Ok(Policy::Identity),
            "linear-merge" | "linear" => Ok(Policy::LinearMerge),
            "slerp" => Ok(Policy::Slerp),
            other => Err(DloError::Config(format!(
                "unknown policy '{other}' (expected random|copy|identity|linear-merge|slerp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionSpec {
    /// Group count P; the source layer count must be divisible by it.
    pub groups: usize,
    /// New layers per group, q.
    pub per_group: usize,
    pub policy: Policy,
    /// Merge window: linear-merge sums over the preceding tau layers;
    /// slerp interpolates between the immediate predecessor and the layer
    /// tau back.
    #[serde(default = "default_tau")]
    pub tau: usize,
    /// Linear-merge weights, most recent layer first; must sum to 1.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Slerp interpolation parameter in [0, 1].
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Seed for the random policy.
    #[serde(default)]
    pub seed: u64,
}

fn default_tau() -> usize {
    2
}

fn default_alphas() -> Vec<f64> {
    vec![0.5, 0.5]
}

fn default_alpha() -> f64 {
    0.5
}

impl ExpansionSpec {
    pub fn new(groups: usize, per_group: usize, policy: Policy) -> Self {
        ExpansionSpec {
            groups,
            per_group,
            policy,
            tau: 2,
            alphas: vec![0.5, 0.5],
            alpha: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self, source_layers: usize) -> Result<usize> {
        if self.groups == 0 || !source_layers.is_multiple_of(self.groups) {
            return Err(DloError::Config(format!(
                "layer count {source_layers} not divisible into {} groups",
                self.groups
            )));
        }
        let q_layers = source_layers / self.groups;
        let uses_tau = matches!(self.policy, Policy::LinearMerge | Policy::Slerp);
        if uses_tau && (self.tau == 0 || self.tau > q_layers) {
            return Err(DloError::Config(format!(
                "merge window tau={} must be in 1..={q_layers}",
                self.tau
            )));
        }
        if self.policy == Policy::LinearMerge {
            if self.alphas.len() != self.tau {
                return Err(DloError::Config(format!(
                    "linear-merge needs {} weights, got {}",
                    self.tau,
                    self.alphas.len()
                )));
            }
            let sum: f64 = self.alphas.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(DloError::Config(format!(
                    "linear-merge weights must sum to 1, got {sum}"
                )));
            }
        }
        if self.policy == Policy::Slerp && !(0.0..=1.0).contains(&self.alpha) {
            return Err(DloError::Config(format!(
                "slerp alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(q_layers)
    }
}

/// Xavier-initialized tensor for a freshly added layer.
pub fn init_random<E: Scalar>(shape: &[usize], rng: &mut ChaCha20Rng) -> Result<Tensor<E>> {
    match shape {
        [n_in, n_out] => Ok(Tensor::param(shape, xavier_uniform(*n_in, *n_out, rng))),
        _ => Err(DloError::Init(format!(
            "cannot derive fan-in/fan-out from shape {shape:?}"
        ))),
    }
}

/// New layer as a deep copy of the last layer placed before it.
pub fn init_copy<E: Scalar>(preceding: &[&LayerParams<E>]) -> Result<LayerParams<E>> {
    let last = preceding
        .last()
        .ok_or_else(|| DloError::Init("copy policy needs a preceding layer".into()))?;
    Ok(last.deep_copy())
}

/// Copy of the preceding layer with the attention output projection and the
/// MLP down-projection zeroed, making the new layer an exact identity.
pub fn init_identity<E: Scalar>(preceding: &[&LayerParams<E>]) -> Result<LayerParams<E>> {
    let layer = init_copy(preceding)?;
    layer.attn.w_out.data_mut().iter_mut().for_each(|v| *v = E::zero());
    layer.mlp.w_down.data_mut().iter_mut().for_each(|v| *v = E::zero());
    Ok(layer)
}

/// Weighted sum over the preceding `tau` layers, most recent first.
pub fn init_linear_merge<E: Scalar>(
    preceding: &[&LayerParams<E>],
    tau: usize,
    alphas: &[f64],
) -> Result<LayerParams<E>> {
    if preceding.len() < tau {
        return Err(DloError::Init(format!(
            "linear-merge needs {tau} preceding layers, have {}",
            preceding.len()
        )));
    }
    let sum: f64 = alphas.iter().sum();
    if alphas.len() != tau || (sum - 1.0).abs() > 1e-9 {
        return Err(DloError::Config(format!(
            "linear-merge weights must be {tau} values summing to 1"
        )));
    }
    let out = preceding[preceding.len() - 1].deep_copy();
    let out_tensors = out.named_tensors();
    for (slot, (_, dst)) in out_tensors.iter().enumerate() {
        let mut buf = dst.data_mut();
        buf.iter_mut().for_each(|v| *v = E::zero());
        for (k, &alpha) in alphas.iter().enumerate() {
            let src = &preceding[preceding.len() - 1 - k].named_tensors()[slot].1;
            let sd = src.data();
            let ae = E::from_double(alpha);
            for (d, &s) in buf.iter_mut().zip(sd.iter()) {
                *d = *d + ae * s;
            }
        }
    }
    Ok(out)
}

/// Spherical linear interpolation of two flattened weight vectors.
/// Falls back to plain linear interpolation when the vectors are close to
/// parallel (sin of the angle below 1e-7), which is the common case for
/// copied layers.
pub fn slerp<E: Scalar>(u: &[E], v: &[E], alpha: f64) -> Result<Vec<E>> {
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a.to_double() * b.to_double()).sum();
    let nu: f64 = u.iter().map(|&a| a.to_double().powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&b| b.to_double().powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(DloError::Init("slerp: zero-norm weight vector".into()));
    }
    let omega = (dot / (nu * nv)).clamp(-1.0, 1.0).acos();
    let (cu, cv) = if omega.sin() < 1e-7 {
        (1.0 - alpha, alpha)
    } else {
        (
            ((1.0 - alpha) * omega).sin() / omega.sin(),
            (alpha * omega).sin() / omega.sin(),
        )
    };
    Ok(u.iter()
        .zip(v)
        .map(|(&a, &b)| E::from_double(cu * a.to_double() + cv * b.to_double()))
        .collect())
}

/// Slerp between the immediate predecessor and the layer `tau` back,
/// applied per parameter tensor.
pub fn init_slerp<E: Scalar>(
    preceding: &[&LayerParams<E>],
    tau: usize,
    alpha: f64,
) -> Result<LayerParams<E>> {
    if preceding.len() < tau {
        return Err(DloError::Init(format!(
            "slerp needs {tau} preceding layers, have {}",
            preceding.len()
        )));
    }
    let near = preceding[preceding.len() - 1];
    let far = preceding[preceding.len() - tau];
    let out = near.deep_copy();
    for (slot, (_, dst)) in out.named_tensors().iter().enumerate() {
        let u = near.named_tensors()[slot].1.data().clone();
        let v = far.named_tensors()[slot].1.data().clone();
        let merged = slerp(&u, &v, alpha)?;
        dst.data_mut().copy_from_slice(&merged);
    }
    Ok(out)
}

/// Expand a model's layer stack per the spec. The source is never mutated;
/// originals are deep-copied in order, new layers appended per group.
pub fn expand<E: Scalar>(model: &ModelParams<E>, spec: &ExpansionSpec) -> Result<ModelParams<E>> {
    let q_layers = spec.validate(model.layers.len())?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let cfg = &model.config;
    let mut layers: Vec<LayerParams<E>> = Vec::new();
    for g in 0..spec.groups {
        let group_start = layers.len();
        for j in 0..q_layers {
            layers.push(model.layers[g * q_layers + j].deep_copy());
        }
        for _ in 0..spec.per_group {
            let preceding: Vec<&LayerParams<E>> = layers[group_start..].iter().collect();
            let new_layer = match spec.policy {
                Policy::Random => LayerParams {
                    attn: crate::model::AttnParams {
                        wq: init_random(&[cfg.d_model, cfg.d_model], &mut rng)?,
                        wk: init_random(&[cfg.d_model, cfg.d_model], &mut rng)?,
                        wv: init_random(&[cfg.d_model, cfg.d_model], &mut rng)?,
                        w_out: init_random(&[cfg.d_model, cfg.d_model], &mut rng)?,
                    },
                    mlp: crate::model::MlpParams {
                        w_gate: init_random(&[cfg.d_model, cfg.d_ff], &mut rng)?,
                        w_up: init_random(&[cfg.d_model, cfg.d_ff], &mut rng)?,
                        w_down: init_random(&[cfg.d_ff, cfg.d_model], &mut rng)?,
                    },
                    norm1: Tensor::param(&[cfg.d_model], vec![E::one(); cfg.d_model]),
                    norm2: Tensor::param(&[cfg.d_model], vec![E::one(); cfg.d_model]),
                },
                Policy::Copy => init_copy(&preceding)?,
                Policy::Identity => init_identity(&preceding)?,
                Policy::LinearMerge => init_linear_merge(&preceding, spec.tau, &spec.alphas)?,
                Policy::Slerp => init_slerp(&preceding, spec.tau, spec.alpha)?,
            };
            layers.push(new_layer);
        }
    }
    let mut config = cfg.clone();
    config.n_layers = layers.len();
    Ok(ModelParams {
        config,
        embed: Tensor::param(model.embed.shape(), model.embed.data().clone()),
        layers,
        final_norm: Tensor::param(model.final_norm.shape(), model.final_norm.data().clone()),
        head: Tensor::param(model.head.shape(), model.head.data().clone()),
    })
}

/// Routers for the expanded stack: original layers keep their trained
/// weights, new layers start from zero.
pub fn expand_routers<E: Scalar>(
    source: Option<&RouterParams<E>>,
    spec: &ExpansionSpec,
    source_layers: usize,
    d_model: usize,
    beta: f64,
    gamma: f64,
) -> Result<RouterParams<E>> {
    let q_layers = spec.validate(source_layers)?;
    let total = spec.groups * (q_layers + spec.per_group);
    let mut routers = RouterParams::zeros(total, d_model, beta, gamma)?;
    if let Some(src) = source {
        if src.n_layers() != source_layers {
            return Err(DloError::Config("source router count mismatch".into()));
        }
        let mut out_i = 0;
        for g in 0..spec.groups {
            for j in 0..q_layers {
                let w = &src.weights[g * q_layers + j];
                routers.weights[out_i] = Tensor::param(w.shape(), w.data().clone());
                out_i += 1;
            }
            out_i += spec.per_group;
        }
    }
    Ok(routers)
}
