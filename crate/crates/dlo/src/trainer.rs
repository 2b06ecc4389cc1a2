//! Similarity-induced supervision, skip loss, skip-rate dynamics, and the
//! AdamW step with layer-wise learning rates.
//!
//! One training step: forward with top-k gating at the current per-layer
//! skip rates, rank per-token cosine similarity mu globally to produce
//! labels lambda-tilde, add the router BCE to the task loss, backprop,
//! update with per-layer lr `zeta_i = base * (1 - rho_i) / (1 - rho_t)`,
//! then refresh each layer's skip rate from its label counts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::model::{forward, ModelParams, RoutingMode};
use crate::router::RouterParams;
use crate::tensor::{ops, Scalar, Tensor};

/// Global and per-layer skip-rate state (Eq. (8)-(9)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsitySchedule {
    /// Target skip rate rho.
    pub rho_target: f64,
    /// Warm-start rate rho-bar; annealing begins here.
    pub rho_start: f64,
    /// Anneal horizon T'.
    pub anneal_steps: u64,
    /// Planned total steps T (drives the cosine lr schedule).
    pub total_steps: u64,
    /// Steps taken so far.
    pub step: u64,
    /// Current per-layer skip rates rho_i.
    pub per_layer_rho: Vec<f64>,
}

impl SparsitySchedule {
    pub fn new(
        rho_target: f64,
        rho_start: f64,
        anneal_steps: u64,
        total_steps: u64,
        n_layers: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&rho_target) || !(0.0..1.0).contains(&rho_start) {
            return Err(DloError::Config(format!(
                "skip rates must be in [0, 1), got rho={rho_target} rho_start={rho_start}"
            )));
        }
        if rho_start > rho_target {
            return Err(DloError::Config(format!(
                "rho_start {rho_start} exceeds rho_target {rho_target}"
            )));
        }
        Ok(SparsitySchedule {
            rho_target,
            rho_start,
            anneal_steps,
            total_steps,
            step: 0,
            // Layers start at the warm-start rate so the first top-k gate
            // activates everything when rho_start = 0.
            per_layer_rho: vec![rho_start; n_layers],
        })
    }

    /// Eq. (9): linear ramp from rho_start to rho_target over `anneal_steps`.
    pub fn annealed_rho(&self, t: u64) -> f64 {
        if self.anneal_steps == 0 || t >= self.anneal_steps {
            return self.rho_target;
        }
        self.rho_start
            + (self.rho_target - self.rho_start) * t as f64 / self.anneal_steps as f64
    }
}

/// Eq. (4): per-token cosine between the attention output and the full
/// block output. Plain numbers, never on the gradient tape.
pub fn compute_similarity<E: Scalar>(h_attn: &Tensor<E>, h_full: &Tensor<E>) -> Result<Vec<f64>> {
    if h_attn.shape() != h_full.shape() || h_attn.shape().len() != 2 {
        return Err(DloError::Shape(format!(
            "similarity: shapes {:?} vs {:?}",
            h_attn.shape(),
            h_full.shape()
        )));
    }
    let d = h_attn.shape()[1];
    let a = h_attn.data();
    let b = h_full.data();
    Ok((0..h_attn.shape()[0])
        .map(|r| ops::cosine(&a[r * d..(r + 1) * d], &b[r * d..(r + 1) * d]))
        .collect())
}

/// Eq. (5): exactly `floor((1 - rho_t) * R' * S_valid)` (layer, token) cells
/// with the smallest mu get lambda-tilde = 1, ranked jointly across all
/// layers of one sequence. Ties break by (layer, token) ascending; padded
/// tokens never enter the pool.
pub fn similarity_labels(
    mu: &[Vec<f64>],
    valid: &[bool],
    rho_t: f64,
) -> Result<Vec<Vec<bool>>> {
    if !(0.0..1.0).contains(&rho_t) {
        return Err(DloError::Config(format!(
            "rho_t must be in [0, 1), got {rho_t}"
        )));
    }
    let s = valid.len();
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (i, row) in mu.iter().enumerate() {
        if row.len() != s {
            return Err(DloError::Shape(format!(
                "similarity row {i} has {} entries, expected {s}",
                row.len()
            )));
        }
        pool.extend((0..s).filter(|&t| valid[t]).map(|t| (i, t)));
    }
    let k = ((1.0 - rho_t) * pool.len() as f64).floor() as usize;
    // Stable ascending sort keeps (layer, token) order among equal mus.
    pool.sort_by(|&(i, t), &(j, u)| mu[i][t].partial_cmp(&mu[j][u]).unwrap());
    let mut labels = vec![vec![false; s]; mu.len()];
    for &(i, t) in pool.iter().take(k) {
        labels[i][t] = true;
    }
    Ok(labels)
}

/// Eq. (6): mean BCE between router probabilities and lambda-tilde over all
/// (layer, valid token) pairs.
pub fn skip_loss<E: Scalar>(
    probs: &[Tensor<E>],
    labels: &[Vec<bool>],
    valid: &[bool],
) -> Result<Tensor<E>> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(DloError::Shape(format!(
            "skip loss: {} probability rows vs {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    let mut acc: Option<Tensor<E>> = None;
    for (p, l) in probs.iter().zip(labels) {
        let layer = ops::bce_mean(p, l, valid)?;
        acc = Some(match acc {
            Some(a) => ops::add(&a, &layer)?,
            None => layer,
        });
    }
    Ok(ops::scale(&acc.unwrap(), 1.0 / probs.len() as f64))
}

/// Eq. (7): L = L_task + L_skip with unit weights. Non-finite input aborts
/// the step.
pub fn total_loss<E: Scalar>(task: &Tensor<E>, skip: &Tensor<E>) -> Result<Tensor<E>> {
    let (t, s) = (task.item().to_double(), skip.item().to_double());
    if !t.is_finite() || !s.is_finite() {
        return Err(DloError::Train(format!(
            "non-finite loss: task={t} skip={s}"
        )));
    }
    ops::add(task, skip)
}

/// Eq. (8), sign-corrected: the layer's next skip rate is the fraction of
/// valid tokens its labels left inactive.
pub fn update_layer_sparsity(labels: &[bool], valid: &[bool]) -> f64 {
    let total = valid.iter().filter(|&&v| v).count().max(1);
    let active = labels
        .iter()
        .zip(valid)
        .filter(|(&l, &v)| l && v)
        .count();
    1.0 - active as f64 / total as f64
}

/// Eq. (8) as printed (activated fraction). Kept only so the regression
/// suite can show it breaks the conservation invariant; never called by the
/// trainer.
pub fn update_layer_sparsity_uncorrected(labels: &[bool], valid: &[bool]) -> f64 {
    1.0 - update_layer_sparsity(labels, valid)
}

/// Eq. (10): layers that skip less than average get a larger step.
pub fn layer_lr(base: f64, rho_i: f64, rho_t: f64) -> f64 {
    assert!(rho_t < 1.0, "layer_lr: rho_t must be < 1");
    base * (1.0 - rho_i) / (1.0 - rho_t)
}

/// Cosine learning-rate multiplier with linear warmup, in [0, 1].
pub fn warmup_cosine(step: u64, total_steps: u64, warmup_ratio: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let warm = (warmup_ratio * total_steps as f64).ceil().max(1.0) as u64;
    if step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warm) as f64 / (total_steps - warm).max(1) as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            base_lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
        }
    }
}

/// AdamW first/second moments keyed by checkpoint tensor name.
pub struct OptimState<E: Scalar> {
    pub config: AdamWConfig,
    /// Completed optimizer steps; bias correction uses this 1-based.
    pub step: u64,
    pub m: HashMap<String, Vec<E>>,
    pub v: HashMap<String, Vec<E>>,
}

impl<E: Scalar> OptimState<E> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimState {
            config,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One AdamW update on a single parameter at an effective rate `lr`.
    /// No-op when the parameter holds no gradient.
    pub fn update_param(&mut self, name: &str, param: &Tensor<E>, lr: f64) {
        let Some(grad) = param.grad() else { return };
        let n = grad.len();
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![E::zero(); n]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![E::zero(); n]);
        debug_assert_eq!(m.len(), n, "moment shape drifted for {name}");
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut data = param.data_mut();
        for i in 0..n {
            let g = grad[i].to_double();
            let mi = c.beta1 * m[i].to_double() + (1.0 - c.beta1) * g;
            let vi = c.beta2 * v[i].to_double() + (1.0 - c.beta2) * g * g;
            m[i] = E::from_double(mi);
            v[i] = E::from_double(vi);
            let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            let p = data[i].to_double();
            data[i] = E::from_double(p - lr * (update + c.weight_decay * p));
        }
    }
}

/// One training example: `targets[s]` is what position `s` should predict;
/// `loss_mask` marks positions counted in the task loss; `valid` marks
/// non-padding tokens (the router pools).
#[derive(Debug, Clone)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub task_loss: f64,
    pub skip_loss: f64,
    pub rho_t: f64,
    pub per_layer_rho: Vec<f64>,
    /// Activated valid tokens per layer, summed over the batch.
    pub activation_counts: Vec<usize>,
    /// Mean similarity mu per layer over valid tokens of the batch.
    pub mean_similarity: Vec<f64>,
}

/// One full DLO step over a batch: forward with top-k gating, label and
/// loss computation per sequence, a single AdamW update on the accumulated
/// gradients, then the per-layer skip-rate refresh (batch-averaged).
pub fn train_step<E: Scalar>(
    model: &ModelParams<E>,
    routers: &RouterParams<E>,
    batch: &[Sequence],
    schedule: &mut SparsitySchedule,
    optim: &mut OptimState<E>,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(DloError::Train("empty batch".into()));
    }
    let n_layers = model.layers.len();
    if schedule.per_layer_rho.len() != n_layers || routers.n_layers() != n_layers {
        return Err(DloError::Config(
            "schedule/router layer count disagrees with model".into(),
        ));
    }
    let rho_t = schedule.annealed_rho(schedule.step);
    let inv_batch = 1.0 / batch.len() as f64;

    model.zero_grads();
    for w in &routers.weights {
        w.zero_grad();
    }

    let mut task_acc = 0.0;
    let mut skip_acc = 0.0;
    let mut rho_acc = vec![0.0; n_layers];
    let mut act_counts = vec![0usize; n_layers];
    let mut mu_sums = vec![0.0; n_layers];
    let mut mu_n = vec![0usize; n_layers];

    for seq in batch {
        let mode = RoutingMode::TrainTopK {
            per_layer_rho: schedule.per_layer_rho.clone(),
        };
        let out = forward(model, routers, &seq.tokens, &seq.valid, &mode)?;
        let task = ops::cross_entropy_masked(&out.logits, &seq.targets, &seq.loss_mask)?;
        let mu: Vec<Vec<f64>> = out
            .trace
            .layers
            .iter()
            .map(|l| l.similarity.clone())
            .collect();
        let labels = similarity_labels(&mu, &seq.valid, rho_t)?;
        let skip = skip_loss(&out.router_probs, &labels, &seq.valid)?;
        let total = total_loss(&task, &skip).inspect_err(|_e| {
            // Diagnostics for the aborted step; the trace pinpoints which
            // layer's routing went off the rails.
            if let Ok(json) = serde_json::to_string(&out.trace) {
                eprintln!("route trace at failing step {}: {json}", schedule.step);
            }
        })?;
        ops::scale(&total, inv_batch).backward()?;

        task_acc += task.item().to_double() * inv_batch;
        skip_acc += skip.item().to_double() * inv_batch;
        for i in 0..n_layers {
            rho_acc[i] += update_layer_sparsity(&labels[i], &seq.valid) * inv_batch;
            for (t, l) in out.trace.layers[i].predicted.iter().enumerate() {
                if *l && seq.valid[t] {
                    act_counts[i] += 1;
                }
            }
            for (t, &m) in out.trace.layers[i].similarity.iter().enumerate() {
                if seq.valid[t] && m.is_finite() {
                    mu_sums[i] += m;
                    mu_n[i] += 1;
                }
            }
        }
    }

    optim.step += 1;
    let mult = warmup_cosine(optim.step - 1, schedule.total_steps, optim.config.warmup_ratio);
    let base = optim.config.base_lr;
    for (i, layer) in model.layers.iter().enumerate() {
        // The router belongs to its layer and shares its rate.
        let lr = layer_lr(base, schedule.per_layer_rho[i], rho_t) * mult;
        for (suffix, t) in layer.named_tensors() {
            optim.update_param(&format!("layers.{i}.{suffix}"), &t, lr);
        }
        optim.update_param(&format!("router.{i}.w"), &routers.weights[i], lr);
    }
    let shared = base * mult;
    optim.update_param("embed", &model.embed, shared);
    optim.update_param("final_norm", &model.final_norm, shared);
    optim.update_param("head", &model.head, shared);

    schedule.per_layer_rho = rho_acc;
    schedule.step += 1;

    Ok(StepMetrics {
        step: schedule.step,
        task_loss: task_acc,
        skip_loss: skip_acc,
        rho_t,
        per_layer_rho: schedule.per_layer_rho.clone(),
        activation_counts: act_counts,
        mean_similarity: mu_sums
            .iter()
            .zip(&mu_n)
            .map(|(&s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect(),
    })
}
