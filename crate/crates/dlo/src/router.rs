//! Per-layer, per-token decision scoring and gating.
//!
//! Each layer carries a linear scorer `W_i` mapping the layer input to a
//! logit; the decision score is a rescaled sigmoid kept strictly inside
//! `((beta-gamma)/2, (beta+gamma)/2)` so activated outputs are multiplied
//! by a near-identity factor.

use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::tensor::{ops, Scalar, Tensor};

pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_GAMMA: f64 = 0.05;

/// Per-layer router weight vectors plus the global score-range parameters.
pub struct RouterParams<E: Scalar> {
    /// One `[d, 1]` weight column per layer.
    pub weights: Vec<Tensor<E>>,
    pub beta: f64,
    pub gamma: f64,
}

impl<E: Scalar> RouterParams<E> {
    pub fn zeros(n_layers: usize, d_model: usize, beta: f64, gamma: f64) -> Result<Self> {
        if gamma <= 0.0 || beta <= gamma {
            return Err(DloError::Config(format!(
                "router requires gamma > 0 and beta > gamma, got beta={beta} gamma={gamma}"
            )));
        }
        let weights = (0..n_layers)
            .map(|_| Tensor::param(&[d_model, 1], vec![E::zero(); d_model]))
            .collect();
        Ok(RouterParams {
            weights,
            beta,
            gamma,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Activation threshold used at inference.
    pub fn threshold(&self) -> f64 {
        self.beta / 2.0
    }
}

/// Raw router outputs for one layer of one sequence.
pub struct LayerScores<E: Scalar> {
    /// Sigmoid probabilities, shape `[S]`; input to the skip loss.
    pub probs: Tensor<E>,
    /// Rescaled decision scores, shape `[S]`; multiply activated outputs.
    pub scores: Tensor<E>,
}

/// Decision score per token: `r = (beta + (2*sigmoid(hW) - 1)*gamma) / 2`.
pub fn decision_score<E: Scalar>(
    h: &Tensor<E>,
    w: &Tensor<E>,
    beta: f64,
    gamma: f64,
) -> Result<LayerScores<E>> {
    let s = h.shape()[0];
    let logits = ops::reshape(&ops::matmul(h, w)?, &[s])?;
    let probs = ops::sigmoid(&logits);
    // r = sigma*gamma + (beta - gamma)/2
    let scores = ops::affine(&probs, gamma, (beta - gamma) / 2.0);
    Ok(LayerScores { probs, scores })
}

/// Inference gate: a token activates its MLP iff `r >= beta/2`.
/// The boundary counts as activated so zero-initialized routers (r = 1.0
/// exactly with beta = 2) activate everything.
pub fn gate_inference(scores: &[f64], beta: f64) -> Vec<bool> {
    scores.iter().map(|&r| r >= beta / 2.0).collect()
}

/// Training gate: exactly `floor((1 - rho) * S_valid)` valid tokens with the
/// highest scores activate; ties break toward the lower token index.
/// Tokens outside `valid` never activate.
pub fn gate_train_topk(scores: &[f64], rho: f64, valid: &[bool]) -> Result<Vec<bool>> {
    // rho = 1 is reachable when Eq. (8) assigns a layer zero labels.
    if !(0.0..=1.0).contains(&rho) {
        return Err(DloError::Config(format!(
            "training sparsity must be in [0, 1], got {rho}"
        )));
    }
    debug_assert_eq!(scores.len(), valid.len());
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| valid[i]).collect();
    let k = ((1.0 - rho) * idx.len() as f64).floor() as usize;
    // Stable sort by descending score keeps ascending-index tie order.
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut labels = vec![false; scores.len()];
    for &i in idx.iter().take(k) {
        labels[i] = true;
    }
    Ok(labels)
}

/// Per-layer, per-token routing record for one sequence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Decision scores r.
    pub scores: Vec<f64>,
    /// Predicted labels (lambda-hat): did the gate activate the MLP.
    pub predicted: Vec<bool>,
    /// Similarity-induced supervision (lambda-tilde); empty outside training.
    pub supervised: Vec<bool>,
    /// Cosine similarity mu between the attention output and the full block
    /// output. NaN where the MLP was skipped and never computed.
    pub similarity: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RouteTrace {
    pub layers: Vec<LayerTrace>,
    /// Token validity mask (false = padding).
    pub valid: Vec<bool>,
}

impl RouteTrace {
    pub fn seq_len(&self) -> usize {
        self.valid.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Activated-token count per layer (valid tokens only).
    pub fn activation_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| {
                l.predicted
                    .iter()
                    .zip(&self.valid)
                    .filter(|(&p, &v)| p && v)
                    .count()
            })
            .collect()
    }
}
