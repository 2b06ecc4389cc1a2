//! Training/evaluation harness shared by the CLI and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{DloError, Result};
use crate::expand;
use crate::flops::{self, ArchSpec};
use crate::io::{self, Checkpoint, Provenance};
use crate::metrics::{JsonlWriter, MetricsRecord, TraceRecord};
use crate::model::{forward, ModelConfig, ModelParams, RoutingMode};
use crate::router::RouterParams;
use crate::tasks::{self, TaskData};
use crate::tensor::{ops, Scalar};
use crate::trainer::{train_step, OptimState, Sequence, SparsitySchedule};

pub fn arch_of(cfg: &ModelConfig) -> ArchSpec {
    ArchSpec {
        name: "custom".into(),
        d_model: cfg.d_model,
        n_layers: cfg.n_layers,
        d_ff: cfg.d_ff,
        vocab: cfg.vocab,
        n_heads: cfg.n_heads,
    }
}

pub struct TrainState<E: Scalar> {
    pub model: ModelParams<E>,
    pub routers: RouterParams<E>,
    pub schedule: SparsitySchedule,
    pub optim: OptimState<E>,
    pub provenance: Provenance,
}

/// Build the starting state: random init (or a loaded checkpoint), then the
/// configured expansion with fresh zero routers on the new layers.
pub fn init_state<E: Scalar>(cfg: &RunConfig) -> Result<TrainState<E>> {
    cfg.validate()?;
    let (mut model, mut routers, mut provenance) = match &cfg.init_checkpoint {
        Some(path) => {
            let ckpt: Checkpoint<E> = io::load(path)?;
            if ckpt.model.config != cfg.model {
                return Err(DloError::Config(format!(
                    "checkpoint model config {:?} disagrees with run config",
                    ckpt.model.config
                )));
            }
            let routers = match ckpt.routers {
                Some(r) => r,
                None => RouterParams::zeros(
                    cfg.model.n_layers,
                    cfg.model.d_model,
                    cfg.router.beta,
                    cfg.router.gamma,
                )?,
            };
            (ckpt.model, routers, ckpt.provenance)
        }
        None => (
            ModelParams::random(cfg.model.clone(), cfg.seed)?,
            RouterParams::zeros(
                cfg.model.n_layers,
                cfg.model.d_model,
                cfg.router.beta,
                cfg.router.gamma,
            )?,
            Provenance {
                seed: Some(cfg.seed),
                ..Default::default()
            },
        ),
    };
    if let Some(spec) = &cfg.expansion {
        let source_layers = model.layers.len();
        model = expand::expand(&model, spec)?;
        routers = expand::expand_routers(
            Some(&routers),
            spec,
            source_layers,
            cfg.model.d_model,
            cfg.router.beta,
            cfg.router.gamma,
        )?;
        provenance.expansion = Some(format!(
            "{} groups={} per_group={}",
            serde_json::to_string(&spec.policy).unwrap_or_default(),
            spec.groups,
            spec.per_group
        ));
    }
    let schedule = SparsitySchedule::new(
        cfg.schedule.rho,
        cfg.schedule.rho_start,
        cfg.schedule.anneal_steps,
        cfg.total_steps,
        model.layers.len(),
    )?;
    Ok(TrainState {
        model,
        routers,
        schedule,
        optim: OptimState::new(cfg.optim.clone()),
        provenance,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean task cross-entropy over all loss-mask positions.
    pub loss: f64,
    /// Fraction of loss-mask positions where argmax(logits) hits the target.
    pub accuracy: f64,
    /// Realized per-layer MLP skip rates.
    pub per_layer_sparsity: Vec<f64>,
    pub flops_dense: f64,
    pub flops_sparse: f64,
    pub sequences: usize,
    pub scored_tokens: usize,
}

/// Evaluate without touching gradients; FLOPs reflect the observed routing.
pub fn evaluate<E: Scalar>(
    model: &ModelParams<E>,
    routers: &RouterParams<E>,
    data: &[Sequence],
    mode: &RoutingMode,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(DloError::Input("empty evaluation set".into()));
    }
    let mut loss_sum = 0.0;
    let mut scored = 0usize;
    let mut hits = 0usize;
    let mut traces = Vec::with_capacity(data.len());
    for seq in data {
        let out = forward(model, routers, &seq.tokens, &seq.valid, mode)?;
        let n = seq.loss_mask.iter().filter(|&&m| m).count();
        if n > 0 {
            let ce = ops::cross_entropy_masked(&out.logits, &seq.targets, &seq.loss_mask)?;
            loss_sum += ce.item().to_double() * n as f64;
            scored += n;
            let v = model.config.vocab;
            let logits = out.logits.data();
            for (pos, &m) in seq.loss_mask.iter().enumerate() {
                if !m {
                    continue;
                }
                let row = &logits[pos * v..(pos + 1) * v];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if argmax == seq.targets[pos] {
                    hits += 1;
                }
            }
        }
        traces.push(out.trace);
    }
    let rho_hat = flops::mean_realized_sparsity(&traces);
    let arch = arch_of(&model.config);
    let seq_len = data[0].tokens.len();
    let dense = flops::flops_dense(&arch, seq_len)?;
    let sparse = flops::flops_sparse(&arch, seq_len, &rho_hat)?;
    Ok(EvalReport {
        loss: loss_sum / scored.max(1) as f64,
        accuracy: hits as f64 / scored.max(1) as f64,
        per_layer_sparsity: rho_hat,
        flops_dense: dense.dense_total,
        flops_sparse: sparse.sparse_total,
        sequences: data.len(),
        scored_tokens: scored,
    })
}

/// Holds the output-directory lock for the life of a training run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(DloError::Train(
                format!("output directory {} is locked by another run", dir.display()),
            )),
            Err(e) => Err(DloError::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct RunOutputs {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

fn save_state<E: Scalar>(state: &TrainState<E>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        model: state.model.shallow_clone(),
        routers: Some(RouterParams {
            weights: state.routers.weights.clone(),
            beta: state.routers.beta,
            gamma: state.routers.gamma,
        }),
        schedule: state.schedule.clone(),
        optim: Some(OptimState {
            config: state.optim.config.clone(),
            step: state.optim.step,
            m: state.optim.m.clone(),
            v: state.optim.v.clone(),
        }),
        provenance: state.provenance.clone(),
    };
    io::save(&ckpt, path)
}

/// Full training run per the config: deterministic batch sampling, one
/// metrics record per step, periodic + final checkpoints.
pub fn run_training<E: Scalar>(cfg: &RunConfig) -> Result<(TrainState<E>, RunOutputs)> {
    cfg.validate()?;
    let data = tasks::generate(&cfg.task)?;
    check_task_fits(&cfg.model, &data)?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| DloError::io(cfg.out_dir.display().to_string(), e))?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;

    let mut state = init_state::<E>(cfg)?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics = JsonlWriter::create(&metrics_path)?;
    let mut batch_rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    for step in 0..cfg.total_steps {
        let batch: Vec<Sequence> = (0..cfg.batch_size)
            .map(|_| data.train[batch_rng.gen_range(0..data.train.len())].clone())
            .collect();
        let t0 = Instant::now();
        let result = train_step(
            &state.model,
            &state.routers,
            &batch,
            &mut state.schedule,
            &mut state.optim,
        );
        let stats = match result {
            Ok(stats) => stats,
            Err(e) => {
                dump_failure_trace(&state, &batch[0], &cfg.out_dir);
                return Err(e);
            }
        };
        metrics.append(&MetricsRecord::new(stats, t0.elapsed().as_secs_f64() * 1e3))?;
        if cfg.checkpoint_every > 0
            && (step + 1) % cfg.checkpoint_every == 0
            && step + 1 != cfg.total_steps
        {
            save_state(&state, &cfg.out_dir.join(format!("step_{:06}.dlo", step + 1)))?;
        }
    }
    let final_checkpoint = cfg.out_dir.join("final.dlo");
    save_state(&state, &final_checkpoint)?;
    Ok((
        state,
        RunOutputs {
            final_checkpoint,
            metrics_path,
        },
    ))
}

fn check_task_fits(model: &ModelConfig, data: &TaskData) -> Result<()> {
    if data.vocab > model.vocab {
        return Err(DloError::Config(format!(
            "task vocabulary {} exceeds model vocab {}",
            data.vocab, model.vocab
        )));
    }
    if data.seq_len > model.max_seq {
        return Err(DloError::Config(format!(
            "task sequence length {} exceeds model max_seq {}",
            data.seq_len, model.max_seq
        )));
    }
    Ok(())
}

fn dump_failure_trace<E: Scalar>(state: &TrainState<E>, seq: &Sequence, dir: &Path) {
    let mode = RoutingMode::TrainTopK {
        per_layer_rho: state.schedule.per_layer_rho.clone(),
    };
    if let Ok(out) = forward(&state.model, &state.routers, &seq.tokens, &seq.valid, &mode) {
        if let Ok(json) = serde_json::to_string_pretty(&out.trace) {
            let _ = fs::write(dir.join("failed_route_trace.json"), json);
        }
    }
}

/// Export per-layer activation counts, mean similarity, and a sampled
/// per-token activation map for each evaluated batch; returns the record
/// count (n_layers per batch).
pub fn export_trace<E: Scalar>(
    model: &ModelParams<E>,
    routers: &RouterParams<E>,
    data: &[Sequence],
    mode: &RoutingMode,
    batch_size: usize,
    out_path: &Path,
) -> Result<usize> {
    if data.is_empty() || batch_size == 0 {
        return Err(DloError::Input("trace export needs data and batch_size >= 1".into()));
    }
    let mut writer = JsonlWriter::create(out_path)?;
    let mut written = 0usize;
    for (batch_idx, chunk) in data.chunks(batch_size).enumerate() {
        let n_layers = model.layers.len();
        let mut counts = vec![0usize; n_layers];
        let mut valid_tokens = 0usize;
        let mut mu_sum = vec![0.0; n_layers];
        let mut mu_n = vec![0usize; n_layers];
        let mut sample: Vec<Vec<bool>> = Vec::new();
        for (s_idx, seq) in chunk.iter().enumerate() {
            let out = forward(model, routers, &seq.tokens, &seq.valid, mode)?;
            valid_tokens += out.trace.valid_count();
            for (i, c) in out.trace.activation_counts().iter().enumerate() {
                counts[i] += c;
            }
            for (i, layer) in out.trace.layers.iter().enumerate() {
                for (t, &m) in layer.similarity.iter().enumerate() {
                    if seq.valid[t] && m.is_finite() {
                        mu_sum[i] += m;
                        mu_n[i] += 1;
                    }
                }
            }
            if s_idx == 0 {
                sample = out.trace.layers.iter().map(|l| l.predicted.clone()).collect();
            }
        }
        for layer in 0..n_layers {
            writer.append(&TraceRecord {
                batch: batch_idx,
                layer,
                activation_count: counts[layer],
                valid_tokens,
                mean_similarity: if mu_n[layer] == 0 {
                    f64::NAN
                } else {
                    mu_sum[layer] / mu_n[layer] as f64
                },
                sample_activations: sample[layer].clone(),
            })?;
            written += 1;
        }
    }
    Ok(written)
}

/// Parse `--routing` values: `inference`, `always-on`, or `random:<rate>`.
pub fn parse_routing(s: &str, n_layers: usize, seed: u64) -> Result<RoutingMode> {
    match s {
        "inference" => Ok(RoutingMode::Inference),
        "always-on" => Ok(RoutingMode::AlwaysOn),
        other => {
            if let Some(spec) = other.strip_prefix("random:") {
                let rates: Vec<f64> = spec
                    .split(',')
                    .map(|r| {
                        r.parse()
                            .map_err(|_| DloError::Config(format!("bad random rate '{r}'")))
                    })
                    .collect::<Result<_>>()?;
                if let Some(&bad) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                    return Err(DloError::Config(format!("random rate {bad} outside [0, 1]")));
                }
                let per_layer_rate = match rates.len() {
                    1 => vec![rates[0]; n_layers],
                    n if n == n_layers => rates,
                    n => {
                        return Err(DloError::Config(format!(
                            "random routing needs 1 rate or one per layer ({n_layers}), got {n}"
                        )))
                    }
                };
                Ok(RoutingMode::Random { per_layer_rate, seed })
            } else {
                Err(DloError::Config(format!(
                    "unknown routing mode '{other}' (expected inference|always-on|random:<rate>[,<rate>...])"
                )))
            }
        }
    }
}
