//! Analytic inference-cost model.
//!
//! Per layer: `2*S*(P_attn + P_mlp) + 4*S^2*d` with `P_attn = 4*d^2` and
//! `P_mlp = 3*d*d_ff`; the output head adds `2*S*d*V`. Skipping saves
//! `rho_i * 2*S*P_mlp` per layer — attention, norms, and the head always
//! run. The attention quadratic term is counted without causal halving;
//! that convention is what the preset totals calibrate against.

use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::router::RouteTrace;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub n_heads: usize,
}

impl ArchSpec {
    /// Preset widths are public LLaMA2 architecture facts used as
    /// calibration inputs.
    pub fn preset(name: &str) -> Result<ArchSpec> {
        match name {
            "llama2-7b" => Ok(ArchSpec {
                name: name.into(),
                d_model: 4096,
                n_layers: 32,
                d_ff: 11008,
                vocab: 32000,
                n_heads: 32,
            }),
            "dlo-8b" => Ok(ArchSpec {
                name: name.into(),
                d_model: 4096,
                n_layers: 40,
                d_ff: 11008,
                vocab: 32000,
                n_heads: 32,
            }),
            other => Err(DloError::Config(format!(
                "unknown architecture preset '{other}' (expected llama2-7b|dlo-8b)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.n_layers, self.d_ff, self.vocab, self.n_heads].contains(&0)
        {
            return Err(DloError::Config("architecture fields must be positive".into()));
        }
        Ok(())
    }

    fn attn_params(&self) -> f64 {
        4.0 * (self.d_model * self.d_model) as f64
    }

    fn mlp_params(&self) -> f64 {
        3.0 * (self.d_model * self.d_ff) as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopsReport {
    pub arch: String,
    pub seq_len: usize,
    /// Projection + quadratic attention FLOPs for one layer.
    pub attn_per_layer: f64,
    /// MLP FLOPs for one layer (the skippable part).
    pub mlp_per_layer: f64,
    pub head_flops: f64,
    pub dense_total: f64,
    pub sparse_total: f64,
    pub per_layer_sparsity: Vec<f64>,
}

/// FLOPs of the ungated dense model for one sequence.
pub fn flops_dense(arch: &ArchSpec, seq_len: usize) -> Result<FlopsReport> {
    arch.validate()?;
    let s = seq_len as f64;
    let attn = 2.0 * s * arch.attn_params() + 4.0 * s * s * arch.d_model as f64;
    let mlp = 2.0 * s * arch.mlp_params();
    let head = 2.0 * s * (arch.d_model * arch.vocab) as f64;
    let dense = arch.n_layers as f64 * (attn + mlp) + head;
    Ok(FlopsReport {
        arch: arch.name.clone(),
        seq_len,
        attn_per_layer: attn,
        mlp_per_layer: mlp,
        head_flops: head,
        dense_total: dense,
        sparse_total: dense,
        per_layer_sparsity: vec![0.0; arch.n_layers],
    })
}

/// FLOPs under per-layer realized MLP sparsity; only the MLP term shrinks.
pub fn flops_sparse(arch: &ArchSpec, seq_len: usize, rho_hat: &[f64]) -> Result<FlopsReport> {
    let mut report = flops_dense(arch, seq_len)?;
    if rho_hat.len() != arch.n_layers {
        return Err(DloError::Config(format!(
            "need {} per-layer sparsities, got {}",
            arch.n_layers,
            rho_hat.len()
        )));
    }
    for &r in rho_hat {
        if !(0.0..=1.0).contains(&r) {
            return Err(DloError::Config(format!("sparsity {r} outside [0, 1]")));
        }
    }
    let saved: f64 = rho_hat.iter().map(|&r| r * report.mlp_per_layer).sum();
    report.sparse_total = report.dense_total - saved;
    report.per_layer_sparsity = rho_hat.to_vec();
    Ok(report)
}

/// Fraction of valid tokens whose MLP was skipped, per layer.
pub fn realized_sparsity(trace: &RouteTrace) -> Vec<f64> {
    let valid = trace.valid_count().max(1) as f64;
    trace
        .layers
        .iter()
        .map(|l| {
            let skipped = l
                .predicted
                .iter()
                .zip(&trace.valid)
                .filter(|(&p, &v)| v && !p)
                .count();
            skipped as f64 / valid
        })
        .collect()
}

/// Average `realized_sparsity` over a batch of traces.
pub fn mean_realized_sparsity(traces: &[RouteTrace]) -> Vec<f64> {
    if traces.is_empty() {
        return Vec::new();
    }
    let n_layers = traces[0].layers.len();
    let mut acc = vec![0.0; n_layers];
    for t in traces {
        for (a, r) in acc.iter_mut().zip(realized_sparsity(t)) {
            *a += r;
        }
    }
    for a in &mut acc {
        *a /= traces.len() as f64;
    }
    acc
}

pub const TERA: f64 = 1e12;
