use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dlo::config::{load_config, load_task_spec};
use dlo::error::{DloError, Result};
use dlo::expand::{expand, expand_routers, ExpansionSpec, Policy};
use dlo::flops::{flops_dense, flops_sparse, ArchSpec, TERA};
use dlo::io::{self, Checkpoint};
use dlo::router::RouterParams;
use dlo::run::{evaluate, export_trace, parse_routing, run_training};
use dlo::tasks;
use dlo::tensor::{Dtype, Scalar};

#[derive(Parser)]
#[command(name = "dlo", about = "Dynamic Layer Operations: layer expansion and learned MLP skipping")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Expand a checkpoint's layer stack group-by-group.
    Expand {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Group count P; layer count must be divisible by it.
        #[arg(long)]
        groups: usize,
        /// New layers appended per group, q.
        #[arg(long = "per-group")]
        per_group: usize,
        /// random | copy | identity | linear-merge | slerp
        #[arg(long)]
        policy: Policy,
        /// Merge window for linear-merge / slerp.
        #[arg(long, default_value_t = 2)]
        tau: usize,
        /// linear-merge weights (most recent first, must sum to 1).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// slerp interpolation parameter in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Seed for the random policy.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full training job from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a task split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// TOML task spec file.
        #[arg(long)]
        task: PathBuf,
        /// inference | always-on | random:<rate> (one rate, or comma-separated per layer)
        #[arg(long, default_value = "inference")]
        routing: String,
        /// Seed for random routing.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic FLOPs report for a named architecture.
    Flops {
        /// llama2-7b | dlo-8b
        #[arg(long)]
        arch: String,
        #[arg(long)]
        seq: usize,
        /// Uniform per-layer MLP skip rate.
        #[arg(long)]
        sparsity: Option<f64>,
    },
    /// Export per-layer routing traces for external plotting.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "inference")]
        routing: String,
        #[arg(long = "batch-size", default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Expand {
            input,
            output,
            groups,
            per_group,
            policy,
            tau,
            alphas,
            alpha,
            seed,
        } => {
            let mut spec = ExpansionSpec::new(groups, per_group, policy);
            spec.tau = tau;
            spec.alpha = alpha;
            spec.seed = seed;
            if let Some(a) = alphas {
                spec.alphas = a;
            } else if policy == Policy::LinearMerge && tau != 2 {
                spec.alphas = vec![1.0 / tau as f64; tau];
            }
            match io::read_manifest(&input)?.dtype {
                Dtype::F32 => cmd_expand::<f32>(&input, &output, &spec),
                Dtype::F64 => cmd_expand::<f64>(&input, &output, &spec),
            }
        }
        Cmd::Train { config } => {
            let cfg = load_config(&config)?;
            match cfg.dtype {
                Dtype::F32 => {
                    let (_, out) = run_training::<f32>(&cfg)?;
                    println!("final checkpoint: {}", out.final_checkpoint.display());
                }
                Dtype::F64 => {
                    let (_, out) = run_training::<f64>(&cfg)?;
                    println!("final checkpoint: {}", out.final_checkpoint.display());
                }
            }
            Ok(())
        }
        Cmd::Eval {
            ckpt,
            task,
            routing,
            seed,
        } => match io::read_manifest(&ckpt)?.dtype {
            Dtype::F32 => cmd_eval::<f32>(&ckpt, &task, &routing, seed),
            Dtype::F64 => cmd_eval::<f64>(&ckpt, &task, &routing, seed),
        },
        Cmd::Flops { arch, seq, sparsity } => {
            let arch = ArchSpec::preset(&arch)?;
            let dense = flops_dense(&arch, seq)?;
            println!(
                "{} @ S={}: dense {:.4}T FLOPs",
                arch.name,
                seq,
                dense.dense_total / TERA
            );
            if let Some(rho) = sparsity {
                let sparse = flops_sparse(&arch, seq, &vec![rho; arch.n_layers])?;
                println!(
                    "  sparsity {:.2}: {:.4}T FLOPs ({:.1}% of dense)",
                    rho,
                    sparse.sparse_total / TERA,
                    100.0 * sparse.sparse_total / sparse.dense_total
                );
            }
            Ok(())
        }
        Cmd::Trace {
            ckpt,
            task,
            out,
            routing,
            batch_size,
            seed,
        } => match io::read_manifest(&ckpt)?.dtype {
            Dtype::F32 => cmd_trace::<f32>(&ckpt, &task, &out, &routing, batch_size, seed),
            Dtype::F64 => cmd_trace::<f64>(&ckpt, &task, &out, &routing, batch_size, seed),
        },
    }
}

/// Routers are optional in pre-expansion checkpoints; materialize zeros.
fn routers_or_zeros<E: Scalar>(ckpt: &Checkpoint<E>, beta: f64, gamma: f64) -> Result<RouterParams<E>> {
    match &ckpt.routers {
        Some(r) => Ok(RouterParams {
            weights: r.weights.clone(),
            beta: r.beta,
            gamma: r.gamma,
        }),
        None => RouterParams::zeros(
            ckpt.model.config.n_layers,
            ckpt.model.config.d_model,
            beta,
            gamma,
        ),
    }
}

fn cmd_expand<E: Scalar>(input: &Path, output: &Path, spec: &ExpansionSpec) -> Result<()> {
    let manifest = io::read_manifest(input)?;
    let ckpt: Checkpoint<E> = io::load(input)?;
    let old_layers = ckpt.model.layers.len();
    let routers = routers_or_zeros(&ckpt, manifest.router.beta, manifest.router.gamma)?;
    let model = expand(&ckpt.model, spec)?;
    let routers = expand_routers(
        Some(&routers),
        spec,
        old_layers,
        model.config.d_model,
        routers.beta,
        routers.gamma,
    )?;
    let mut schedule = ckpt.schedule.clone();
    schedule.per_layer_rho = vec![schedule.rho_start; model.layers.len()];
    let mut provenance = ckpt.provenance.clone();
    provenance.expansion = Some(format!(
        "policy={:?} groups={} per_group={} tau={} alpha={}",
        spec.policy, spec.groups, spec.per_group, spec.tau, spec.alpha
    ));
    let new_layers = model.layers.len();
    io::save(
        &Checkpoint {
            model,
            routers: Some(routers),
            schedule,
            optim: None,
            provenance,
        },
        output,
    )?;
    println!("expanded {old_layers} -> {new_layers} layers: {}", output.display());
    Ok(())
}

fn cmd_eval<E: Scalar>(ckpt: &Path, task: &Path, routing: &str, seed: u64) -> Result<()> {
    let ckpt: Checkpoint<E> = io::load(ckpt)?;
    let data = tasks::generate(&load_task_spec(task)?)?;
    if data.vocab > ckpt.model.config.vocab {
        return Err(DloError::Config(format!(
            "task vocabulary {} exceeds model vocab {}",
            data.vocab, ckpt.model.config.vocab
        )));
    }
    let routers = routers_or_zeros(&ckpt, dlo::router::DEFAULT_BETA, dlo::router::DEFAULT_GAMMA)?;
    let mode = parse_routing(routing, ckpt.model.layers.len(), seed)?;
    let report = evaluate(&ckpt.model, &routers, &data.eval, &mode)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn cmd_trace<E: Scalar>(
    ckpt: &Path,
    task: &Path,
    out: &Path,
    routing: &str,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let ckpt: Checkpoint<E> = io::load(ckpt)?;
    let data = tasks::generate(&load_task_spec(task)?)?;
    let routers = routers_or_zeros(&ckpt, dlo::router::DEFAULT_BETA, dlo::router::DEFAULT_GAMMA)?;
    let mode = parse_routing(routing, ckpt.model.layers.len(), seed)?;
    let n = export_trace(&ckpt.model, &routers, &data.eval, &mode, batch_size, out)?;
    println!("wrote {n} trace records to {}", out.display());
    Ok(())
}
