//! Decoder-only transformer built from explicit attention and MLP sublayer
//! functions so the router can interpose between them. Residuals and
//! pre-normalization live inside the sublayers: skipping the MLP leaves a
//! valid residual stream and identity-initialized layers are exact
//! identities.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::router::{self, RouteTrace, RouterParams};
use crate::tensor::{ops, Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DloError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(DloError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

pub struct AttnParams<E: Scalar> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub w_out: Tensor<E>,
}

pub struct MlpParams<E: Scalar> {
    pub w_gate: Tensor<E>,
    pub w_up: Tensor<E>,
    pub w_down: Tensor<E>,
}

pub struct LayerParams<E: Scalar> {
    pub attn: AttnParams<E>,
    pub mlp: MlpParams<E>,
    pub norm1: Tensor<E>,
    pub norm2: Tensor<E>,
}

pub struct ModelParams<E: Scalar> {
    pub config: ModelConfig,
    pub embed: Tensor<E>,
    pub layers: Vec<LayerParams<E>>,
    pub final_norm: Tensor<E>,
    pub head: Tensor<E>,
}

/// Xavier-uniform sample on +-sqrt(6 / (n_in + n_out)).
pub fn xavier_uniform<E: Scalar>(n_in: usize, n_out: usize, rng: &mut ChaCha20Rng) -> Vec<E> {
    let bound = (6.0 / (n_in + n_out) as f64).sqrt();
    (0..n_in * n_out)
        .map(|_| E::from_double(rng.gen_range(-bound..bound)))
        .collect()
}

fn xavier_param<E: Scalar>(n_in: usize, n_out: usize, rng: &mut ChaCha20Rng) -> Tensor<E> {
    Tensor::param(&[n_in, n_out], xavier_uniform(n_in, n_out, rng))
}

impl<E: Scalar> LayerParams<E> {
    pub fn random(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let d = config.d_model;
        let f = config.d_ff;
        LayerParams {
            attn: AttnParams {
                wq: xavier_param(d, d, rng),
                wk: xavier_param(d, d, rng),
                wv: xavier_param(d, d, rng),
                w_out: xavier_param(d, d, rng),
            },
            mlp: MlpParams {
                w_gate: xavier_param(d, f, rng),
                w_up: xavier_param(d, f, rng),
                w_down: xavier_param(f, d, rng),
            },
            norm1: Tensor::param(&[d], vec![E::one(); d]),
            norm2: Tensor::param(&[d], vec![E::one(); d]),
        }
    }

    pub fn deep_copy(&self) -> Self {
        let cp = |t: &Tensor<E>| Tensor::param(t.shape(), t.data().clone());
        LayerParams {
            attn: AttnParams {
                wq: cp(&self.attn.wq),
                wk: cp(&self.attn.wk),
                wv: cp(&self.attn.wv),
                w_out: cp(&self.attn.w_out),
            },
            mlp: MlpParams {
                w_gate: cp(&self.mlp.w_gate),
                w_up: cp(&self.mlp.w_up),
                w_down: cp(&self.mlp.w_down),
            },
            norm1: cp(&self.norm1),
            norm2: cp(&self.norm2),
        }
    }

    /// Parameter tensors in a fixed order, with stable name suffixes.
    pub fn named_tensors(&self) -> Vec<(&'static str, Tensor<E>)> {
        vec![
            ("attn.wq", self.attn.wq.clone()),
            ("attn.wk", self.attn.wk.clone()),
            ("attn.wv", self.attn.wv.clone()),
            ("attn.w_out", self.attn.w_out.clone()),
            ("mlp.w_gate", self.mlp.w_gate.clone()),
            ("mlp.w_up", self.mlp.w_up.clone()),
            ("mlp.w_down", self.mlp.w_down.clone()),
            ("norm1", self.norm1.clone()),
            ("norm2", self.norm2.clone()),
        ]
    }
}

impl<E: Scalar> ModelParams<E> {
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::random(&config, &mut rng))
            .collect();
        Ok(ModelParams {
            embed: xavier_param(config.vocab, config.d_model, &mut rng),
            head: xavier_param(config.d_model, config.vocab, &mut rng),
            final_norm: Tensor::param(&[config.d_model], vec![E::one(); config.d_model]),
            layers,
            config,
        })
    }

    /// Clone sharing the underlying tensor buffers (no data copied).
    pub fn shallow_clone(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            embed: self.embed.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn: AttnParams {
                        wq: l.attn.wq.clone(),
                        wk: l.attn.wk.clone(),
                        wv: l.attn.wv.clone(),
                        w_out: l.attn.w_out.clone(),
                    },
                    mlp: MlpParams {
                        w_gate: l.mlp.w_gate.clone(),
                        w_up: l.mlp.w_up.clone(),
                        w_down: l.mlp.w_down.clone(),
                    },
                    norm1: l.norm1.clone(),
                    norm2: l.norm2.clone(),
                })
                .collect(),
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
        }
    }

    /// All parameters with checkpoint-stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, layer) in self.layers.iter().enumerate() {
            for (suffix, t) in layer.named_tensors() {
                out.push((format!("layers.{i}.{suffix}"), t));
            }
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        out.push(("head".to_string(), self.head.clone()));
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_tensors() {
            t.zero_grad();
        }
    }
}

/// Sinusoidal positional encoding rows for positions `0..s`.
pub fn positional_encoding<E: Scalar>(s: usize, d: usize) -> Tensor<E> {
    let mut data = vec![E::zero(); s * d];
    for pos in 0..s {
        for j in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * j as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + 2 * j] = E::from_double(angle.sin());
            data[pos * d + 2 * j + 1] = E::from_double(angle.cos());
        }
    }
    Tensor::new(&[s, d], data)
}

/// `h + MHSA(rms_norm(h))` — residual and pre-norm included.
pub fn attention_sublayer<E: Scalar>(
    h: &Tensor<E>,
    layer: &LayerParams<E>,
    n_heads: usize,
) -> Result<Tensor<E>> {
    let xn = ops::rms_norm(h, &layer.norm1, RMS_EPS)?;
    let q = ops::matmul(&xn, &layer.attn.wq)?;
    let k = ops::matmul(&xn, &layer.attn.wk)?;
    let v = ops::matmul(&xn, &layer.attn.wv)?;
    let mixed = ops::causal_softmax_attention(&q, &k, &v, n_heads)?;
    let proj = ops::matmul(&mixed, &layer.attn.w_out)?;
    ops::add(h, &proj)
}

/// `x + W_down(silu(W_gate xn) * W_up xn)` with `xn = rms_norm(x)`.
pub fn mlp_sublayer<E: Scalar>(x: &Tensor<E>, layer: &LayerParams<E>) -> Result<Tensor<E>> {
    let xn = ops::rms_norm(x, &layer.norm2, RMS_EPS)?;
    let gate = ops::silu(&ops::matmul(&xn, &layer.mlp.w_gate)?);
    let up = ops::matmul(&xn, &layer.mlp.w_up)?;
    let inner = ops::matmul(&ops::mul(&gate, &up)?, &layer.mlp.w_down)?;
    ops::add(x, &inner)
}

/// How the per-layer gate decides which tokens run their MLP.
#[derive(Debug, Clone)]
pub enum RoutingMode {
    /// Ungated dense forward; decision scores never touch the output.
    AlwaysOn,
    /// Threshold rule `r >= beta/2`; MLP computed only for activated tokens.
    Inference,
    /// Per-layer top-k on scores: exactly `floor((1-rho_i)*S)` tokens
    /// activate. The MLP is computed for every token (the similarity
    /// supervision needs it).
    TrainTopK { per_layer_rho: Vec<f64> },
    /// Ablation baseline: skip each (layer, token) MLP independently with
    /// the given per-layer probability, ignoring scores.
    Random { per_layer_rate: Vec<f64>, seed: u64 },
}

pub struct ForwardOutput<E: Scalar> {
    pub logits: Tensor<E>,
    /// Per-layer sigmoid probabilities `sigma(h W_i)`, shape `[S]` each;
    /// these feed the skip loss.
    pub router_probs: Vec<Tensor<E>>,
    pub trace: RouteTrace,
}

/// Full forward pass with per-layer gating.
pub fn forward<E: Scalar>(
    model: &ModelParams<E>,
    routers: &RouterParams<E>,
    tokens: &[usize],
    valid: &[bool],
    mode: &RoutingMode,
) -> Result<ForwardOutput<E>> {
    let cfg = &model.config;
    let s = tokens.len();
    if s == 0 || s > cfg.max_seq {
        return Err(DloError::Input(format!(
            "sequence length {s} outside 1..={}",
            cfg.max_seq
        )));
    }
    if valid.len() != s {
        return Err(DloError::Input("valid mask length mismatch".into()));
    }
    if routers.n_layers() != model.layers.len() {
        return Err(DloError::Config(format!(
            "router count {} != layer count {}",
            routers.n_layers(),
            model.layers.len()
        )));
    }
    if let RoutingMode::TrainTopK { per_layer_rho } = mode {
        if per_layer_rho.len() != model.layers.len() {
            return Err(DloError::Config("per-layer rho length mismatch".into()));
        }
    }
    let mut rand_rng = match mode {
        RoutingMode::Random {
            per_layer_rate,
            seed,
        } => {
            if per_layer_rate.len() != model.layers.len() {
                return Err(DloError::Config("per-layer rate length mismatch".into()));
            }
            Some(ChaCha20Rng::seed_from_u64(*seed))
        }
        _ => None,
    };

    let tok = ops::embedding(&model.embed, tokens)?;
    let mut h = ops::add(&tok, &positional_encoding(s, cfg.d_model))?;

    let mut router_probs = Vec::with_capacity(model.layers.len());
    let mut trace = RouteTrace {
        layers: Vec::with_capacity(model.layers.len()),
        valid: valid.to_vec(),
    };

    for (i, layer) in model.layers.iter().enumerate() {
        let scored =
            router::decision_score(&h, &routers.weights[i], routers.beta, routers.gamma)?;
        let score_vals: Vec<f64> = scored.scores.data().iter().map(|v| v.to_double()).collect();

        let attn = attention_sublayer(&h, layer, cfg.n_heads)?;

        let (h_next, predicted, similarity) = match mode {
            RoutingMode::AlwaysOn => {
                let full = mlp_sublayer(&attn, layer)?;
                let mu = row_cosines(&attn, &full);
                (full, valid.to_vec(), mu)
            }
            RoutingMode::TrainTopK { per_layer_rho } => {
                let full = mlp_sublayer(&attn, layer)?;
                let mu = row_cosines(&attn, &full);
                let labels = router::gate_train_topk(&score_vals, per_layer_rho[i], valid)?;
                let mask: Vec<E> = labels
                    .iter()
                    .map(|&l| if l { E::one() } else { E::zero() })
                    .collect();
                let inv: Vec<E> = mask.iter().map(|&m| E::one() - m).collect();
                let mask_t = Tensor::new(&[s], mask);
                let inv_t = Tensor::new(&[s], inv);
                let gated = ops::scale_rows(&ops::scale_rows(&full, &scored.scores)?, &mask_t)?;
                let kept = ops::scale_rows(&attn, &inv_t)?;
                (ops::add(&gated, &kept)?, labels, mu)
            }
            RoutingMode::Inference | RoutingMode::Random { .. } => {
                let labels: Vec<bool> = match (mode, rand_rng.as_mut()) {
                    (RoutingMode::Random { per_layer_rate, .. }, Some(rng)) => valid
                        .iter()
                        .map(|&v| v && rng.gen::<f64>() >= per_layer_rate[i])
                        .collect(),
                    _ => router::gate_inference(&score_vals, routers.beta)
                        .iter()
                        .zip(valid)
                        .map(|(&a, &v)| a && v)
                        .collect(),
                };
                let idx: Vec<usize> = (0..s).filter(|&t| labels[t]).collect();
                let mut mu = vec![f64::NAN; s];
                let h_next = if idx.is_empty() {
                    attn.clone()
                } else {
                    // MLP computed only for activated tokens.
                    let act_in = ops::gather_rows(&attn, &idx)?;
                    let act_out = mlp_sublayer(&act_in, layer)?;
                    for (r, &t) in idx.iter().enumerate() {
                        let d = cfg.d_model;
                        mu[t] = ops::cosine(
                            &act_in.data()[r * d..(r + 1) * d],
                            &act_out.data()[r * d..(r + 1) * d],
                        );
                    }
                    let r_act = Tensor::new(
                        &[idx.len()],
                        idx.iter().map(|&t| E::from_double(score_vals[t])).collect(),
                    );
                    let scaled = ops::scale_rows(&act_out, &r_act)?;
                    ops::scatter_rows(&attn, &scaled, &idx)?
                };
                (h_next, labels, mu)
            }
        };

        trace.layers.push(router::LayerTrace {
            scores: score_vals,
            predicted,
            supervised: Vec::new(),
            similarity,
        });
        router_probs.push(scored.probs);
        h = h_next;
    }

    let hn = ops::rms_norm(&h, &model.final_norm, RMS_EPS)?;
    let logits = ops::matmul(&hn, &model.head)?;
    Ok(ForwardOutput {
        logits,
        router_probs,
        trace,
    })
}

/// Per-token cosine similarity between two `[S, d]` activations, detached
/// from the gradient tape.
fn row_cosines<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Vec<f64> {
    let d = a.shape()[1];
    let ad = a.data();
    let bd = b.data();
    (0..a.shape()[0])
        .map(|r| ops::cosine(&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]))
        .collect()
}
