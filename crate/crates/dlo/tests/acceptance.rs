//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL` line (visible with `--nocapture`, and always
//! shown for failures). Criterion 1 documents a known discrepancy in one
//! published FLOPs value and is expected to stay red; see its test comment.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use dlo::config::{RouterConfig, RunConfig, ScheduleConfig};
use dlo::expand::{expand, expand_routers, ExpansionSpec, Policy};
use dlo::flops::{flops_dense, flops_sparse, ArchSpec, TERA};
use dlo::metrics::read_metrics;
use dlo::model::{forward, ModelConfig, ModelParams, RoutingMode};
use dlo::router::{decision_score, gate_inference, gate_train_topk, RouterParams};
use dlo::run::{evaluate, run_training};
use dlo::tasks::{self, TaskSpec};
use dlo::tensor::{ops, Dtype, Tensor};
use dlo::trainer::{
    layer_lr, similarity_labels, skip_loss, update_layer_sparsity,
    update_layer_sparsity_uncorrected, SparsitySchedule,
};

struct Criterion {
    number: u32,
    summary: &'static str,
    failures: Vec<String>,
}

impl Criterion {
    fn new(number: u32, summary: &'static str) -> Self {
        Criterion {
            number,
            summary,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(detail());
        }
    }

    fn finish(self) {
        if self.failures.is_empty() {
            println!("criterion {}: PASS — {}", self.number, self.summary);
        } else {
            println!(
                "criterion {}: FAIL — {} [{}]",
                self.number,
                self.summary,
                self.failures.join("; ")
            );
            panic!(
                "criterion {} failed: {}",
                self.number,
                self.failures.join("; ")
            );
        }
    }
}

/// Criterion 1 — FLOPs golden values at S=2048.
///
/// Known red: the published 7B @ 30% figure (24.1T) is not reachable from
/// the published dense figure (29.3T) with a saving linear in the skip rate
/// (10%/20% imply 29.3 − 3×1.77 ≈ 23.9T); the analytic count lands at 23.94T,
/// just outside the ±0.15T tolerance. The other eight values pass. The
/// accountant is implemented faithfully rather than tuned to this one cell.
#[test]
fn criterion_1_flops_golden_values() {
    let mut c = Criterion::new(1, "FLOPs accountant reproduces the published table");
    let s = 2048;
    let b7 = ArchSpec::preset("llama2-7b").unwrap();
    let b40 = ArchSpec::preset("dlo-8b").unwrap();
    let mut check = |arch: &ArchSpec, rho: Option<f64>, want: f64, label: &str| {
        let got = match rho {
            None => flops_dense(arch, s).unwrap().dense_total,
            Some(r) => {
                flops_sparse(arch, s, &vec![r; arch.n_layers])
                    .unwrap()
                    .sparse_total
            }
        } / TERA;
        c.check((got - want).abs() <= 0.15, || {
            format!("{label}: computed {got:.4}T, published {want}T")
        });
    };
    check(&b7, None, 29.3, "7B dense");
    check(&b7, Some(0.1), 27.5, "7B @10%");
    check(&b7, Some(0.2), 25.8, "7B @20%");
    check(&b7, Some(0.3), 24.1, "7B @30%");
    check(&b40, None, 36.5, "40-layer dense");
    check(&b40, None, 36.4, "40-layer preset vs LLaMA-Pro");
    check(&b40, Some(0.1), 34.2, "40-layer @10%");
    check(&b40, Some(0.2), 32.0, "40-layer @20%");
    check(&b40, Some(0.3), 29.8, "40-layer @30%");
    c.finish();
}

/// Criterion 2 — identity expansion preserves every logit to 1e-5 (f32).
#[test]
fn criterion_2_identity_expansion_preserves_function() {
    let mut c = Criterion::new(2, "identity expansion changes no logit by more than 1e-5");
    let config = ModelConfig {
        d_model: 64,
        n_heads: 4,
        d_ff: 128,
        n_layers: 8,
        vocab: 128,
        max_seq: 16,
    };
    let model = ModelParams::<f32>::random(config, 11).unwrap();
    let routers = RouterParams::zeros(8, 64, 2.0, 0.05).unwrap();
    let spec = ExpansionSpec::new(2, 1, Policy::Identity);
    let expanded = expand(&model, &spec).unwrap();
    let expanded_routers =
        expand_routers(Some(&routers), &spec, 8, 64, 2.0, 0.05).unwrap();
    c.check(expanded.layers.len() == 10, || {
        format!("expected 10 layers, got {}", expanded.layers.len())
    });

    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let tokens: Vec<usize> = (0..8).map(|_| rng.gen_range(0..128)).collect();
        let valid = vec![true; 8];
        let before = forward(&model, &routers, &tokens, &valid, &RoutingMode::Inference).unwrap();
        let after = forward(
            &expanded,
            &expanded_routers,
            &tokens,
            &valid,
            &RoutingMode::Inference,
        )
        .unwrap();
        for (a, b) in before.logits.data().iter().zip(after.logits.data().iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    c.check(worst <= 1e-5, || format!("max logit drift {worst}"));
    c.finish();
}

/// Criterion 3 — router init contract and score range.
#[test]
fn criterion_3_router_initialization_contract() {
    let mut c = Criterion::new(3, "zero-init scores are exactly 1.0 and always in (0.975, 1.025)");
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let d = 32;
    let zero = RouterParams::<f64>::zeros(1, d, 2.0, 0.05).unwrap();
    for _ in 0..50 {
        let h = Tensor::new(
            &[5, d],
            (0..5 * d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        );
        let out = decision_score(&h, &zero.weights[0], 2.0, 0.05).unwrap();
        let scores: Vec<f64> = out.scores.data().to_vec();
        c.check(scores.iter().all(|&r| r == 1.0), || {
            format!("zero-init scores {scores:?} not exactly 1.0")
        });
        let gates = gate_inference(&scores, 2.0);
        c.check(gates.iter().all(|&g| g), || {
            "zero-init first pass left a token inactive".into()
        });
    }
    // Arbitrary weights: strict open range. Logits are bounded to +/- 32,
    // deep into saturation but where gamma * (1 - sigmoid) still exceeds an
    // ulp of 1.025; past that the score rounds onto the clamp value itself,
    // which the score_saturation unit test covers separately.
    for trial in 0..50 {
        let w = Tensor::param(&[d, 1], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let h = Tensor::new(
            &[5, d],
            (0..5 * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let out = decision_score(&h, &w, 2.0, 0.05).unwrap();
        for &r in out.scores.data().iter() {
            c.check(r > 0.975 && r < 1.025, || {
                format!("trial {trial}: score {r} outside (0.975, 1.025)")
            });
        }
    }
    let w1 = Tensor::param(&[1, 1], vec![1.0f64]);
    for logit in [-32.0, -8.0, -1e-9, 1e-9, 8.0, 32.0] {
        let h = Tensor::new(&[1, 1], vec![logit]);
        let r = decision_score(&h, &w1, 2.0, 0.05).unwrap().scores.item();
        c.check(r > 0.975 && r < 1.025, || {
            format!("logit {logit}: score {r} not strictly inside the range")
        });
    }
    c.finish();
}

/// Criterion 4 — exact activation combinatorics vs brute-force oracles,
/// 10^3 randomized instances.
#[test]
fn criterion_4_exact_combinatorics() {
    let mut c = Criterion::new(4, "top-k counts and global label counts are exact");
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    for trial in 0..1000 {
        let s = rng.gen_range(1..20);
        let layers = rng.gen_range(1..8);
        let rho_i: f64 = rng.gen_range(0.0..=1.0);
        let rho_t: f64 = rng.gen_range(0.0..0.999);
        let valid = vec![true; s];

        // Per-layer training gate.
        let scores: Vec<f64> = (0..s).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let gate = gate_train_topk(&scores, rho_i, &valid).unwrap();
        let k = ((1.0 - rho_i) * s as f64).floor() as usize;
        c.check(gate.iter().filter(|&&g| g).count() == k, || {
            format!("trial {trial}: gate count != floor((1-rho_i)S)")
        });
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let oracle: Vec<bool> = {
            let mut o = vec![false; s];
            for &i in order.iter().take(k) {
                o[i] = true;
            }
            o
        };
        c.check(gate == oracle, || format!("trial {trial}: gate != sort oracle"));

        // Global similarity labels.
        let mu: Vec<Vec<f64>> = (0..layers)
            .map(|_| (0..s).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = similarity_labels(&mu, &valid, rho_t).unwrap();
        let k_global = ((1.0 - rho_t) * (layers * s) as f64).floor() as usize;
        let active: usize = labels
            .iter()
            .map(|row| row.iter().filter(|&&l| l).count())
            .sum();
        c.check(active == k_global, || {
            format!("trial {trial}: label count {active} != floor((1-rho_t)R'S) = {k_global}")
        });
        let mut cells: Vec<(usize, usize)> = (0..layers)
            .flat_map(|i| (0..s).map(move |t| (i, t)))
            .collect();
        cells.sort_by(|&(i, t), &(j, u)| {
            mu[i][t].partial_cmp(&mu[j][u]).unwrap().then((i, t).cmp(&(j, u)))
        });
        let oracle_ok = cells
            .iter()
            .enumerate()
            .all(|(rank, &(i, t))| labels[i][t] == (rank < k_global));
        c.check(oracle_ok, || format!("trial {trial}: labels != sort oracle"));
    }
    c.finish();
}

/// Criterion 5 — schedule formulas vs closed forms at 100 random points.
#[test]
fn criterion_5_schedule_formulas() {
    let mut c = Criterion::new(5, "annealing and layer-wise LR match closed forms to 1e-12");
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    for trial in 0..100 {
        let rho: f64 = rng.gen_range(0.01..0.95);
        let rho_bar: f64 = rng.gen_range(0.0..rho);
        let t_prime = rng.gen_range(1u64..10_000);
        let t = rng.gen_range(0u64..20_000);
        let sched = SparsitySchedule::new(rho, rho_bar, t_prime, 20_000, 1).unwrap();
        let expect = if t >= t_prime {
            rho
        } else {
            rho_bar + (rho - rho_bar) * t as f64 / t_prime as f64
        };
        c.check((sched.annealed_rho(t) - expect).abs() <= 1e-12, || {
            format!("trial {trial}: Eq. (9) off by more than 1e-12")
        });

        let rho_i: f64 = rng.gen_range(0.0..=1.0);
        let rho_t: f64 = rng.gen_range(0.0..0.99);
        let base: f64 = rng.gen_range(1e-6..1e-2);
        let expect_lr = base * (1.0 - rho_i) / (1.0 - rho_t);
        c.check((layer_lr(base, rho_i, rho_t) - expect_lr).abs() <= 1e-12, || {
            format!("trial {trial}: Eq. (10) off by more than 1e-12")
        });
    }
    c.finish();
}

/// Criterion 6 — full-loss gradient vs central finite differences (f64),
/// every parameter including router weights, rel. err <= 1e-4.
#[test]
fn criterion_6_gradient_correctness() {
    let mut c = Criterion::new(6, "analytic gradients match finite differences to 1e-4");
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 2,
        vocab: 16,
        max_seq: 8,
    };
    let model = ModelParams::<f64>::random(config, 51).unwrap();
    let mut routers = RouterParams::zeros(2, 8, 2.0, 0.05).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(52);
    for w in &mut routers.weights {
        *w = Tensor::param(&[8, 1], (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect());
    }
    let tokens = [2usize, 9, 14, 5];
    let targets = [9usize, 14, 5, 1];
    let valid = [true; 4];
    // All tokens stay activated so the top-k mask is constant under
    // perturbation; labels are detached targets, frozen at the base point.
    let mode = RoutingMode::TrainTopK {
        per_layer_rho: vec![0.0, 0.0],
    };
    let base = forward(&model, &routers, &tokens, &valid, &mode).unwrap();
    let mu: Vec<Vec<f64>> = base
        .trace
        .layers
        .iter()
        .map(|l| l.similarity.clone())
        .collect();
    let labels = similarity_labels(&mu, &valid, 0.25).unwrap();

    let loss_value = || {
        let out = forward(&model, &routers, &tokens, &valid, &mode).unwrap();
        let task = ops::cross_entropy_masked(&out.logits, &targets, &valid).unwrap();
        let skip = skip_loss(&out.router_probs, &labels, &valid).unwrap();
        ops::add(&task, &skip).unwrap().item()
    };
    let out = forward(&model, &routers, &tokens, &valid, &mode).unwrap();
    let task = ops::cross_entropy_masked(&out.logits, &targets, &valid).unwrap();
    let skip = skip_loss(&out.router_probs, &labels, &valid).unwrap();
    ops::add(&task, &skip).unwrap().backward().unwrap();

    let mut params = model.named_tensors();
    for (i, w) in routers.weights.iter().enumerate() {
        params.push((format!("router.{i}.w"), w.clone()));
    }
    let eps = 1e-5;
    for (name, p) in &params {
        let grad = p.grad().unwrap();
        for (i, &g) in grad.iter().enumerate() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + eps;
            let up = loss_value();
            p.data_mut()[i] = orig - eps;
            let down = loss_value();
            p.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let scale = g.abs().max(fd.abs());
            let err = if scale < 1e-7 {
                (g - fd).abs()
            } else {
                (g - fd).abs() / scale
            };
            c.check(err <= 1e-4, || {
                format!("{name}[{i}]: rel err {err} (analytic {g} vs fd {fd})")
            });
        }
    }
    c.finish();
}

fn criterion_7_config(out_dir: std::path::PathBuf, seed: u64) -> RunConfig {
    RunConfig {
        version: 1,
        seed,
        out_dir,
        batch_size: 128,
        total_steps: 5000,
        checkpoint_every: 0,
        dtype: Dtype::F32,
        model: ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_layers: 4,
            vocab: 100,
            max_seq: 8,
        },
        expansion: None,
        init_checkpoint: None,
        schedule: ScheduleConfig {
            rho: 0.0,
            rho_start: 0.0,
            anneal_steps: 0,
        },
        optim: dlo::trainer::AdamWConfig {
            base_lr: 2e-3,
            weight_decay: 0.01,
            ..Default::default()
        },
        router: RouterConfig::default(),
        task: TaskSpec::modular_addition(97, 80_000, 500, 2),
    }
}

/// Criterion 7 — end-to-end desk-scale DLO training: 4 -> 6 layers via
/// identity expansion, mod-97 addition, rho = 0.25, T' = 10% of steps,
/// base LR 2e-3, <= 5k DLO steps.
///
/// The base model is pretrained densely first (the expansion operates on a
/// trained model, as in the source setting): 5000 + 3000 steps with an LR
/// restart between them (modular addition sits on a long plateau before the
/// loss breaks; the restart lets the post-break descent finish). The DLO run
/// itself — expansion, routing, annealing — is 1500 steps.
#[test]
fn criterion_7_end_to_end_training() {
    let mut c = Criterion::new(
        7,
        "expanded model reaches 90% accuracy at the target sparsity, beating random routing",
    );
    let dir = tempfile::tempdir().unwrap();

    // Phase 1: dense pretraining of the 4-layer toy model.
    let base_cfg = criterion_7_config(dir.path().join("pretrain"), 2);
    run_training::<f32>(&base_cfg).unwrap();

    // Phase 2: continue densely with a fresh warmup+cosine cycle.
    let mut cont_cfg = criterion_7_config(dir.path().join("pretrain2"), 2);
    cont_cfg.total_steps = 3000;
    cont_cfg.init_checkpoint = Some(base_cfg.out_dir.join("final.dlo"));
    run_training::<f32>(&cont_cfg).unwrap();

    // Phase 3: expand 4 -> 6 with identity layers and train with DLO routing.
    let mut cfg = criterion_7_config(dir.path().join("dlo"), 7);
    cfg.total_steps = 1500;
    cfg.init_checkpoint = Some(cont_cfg.out_dir.join("final.dlo"));
    cfg.expansion = Some(ExpansionSpec::new(2, 1, Policy::Identity));
    cfg.schedule = ScheduleConfig {
        rho: 0.25,
        rho_start: 0.0,
        anneal_steps: 150,
    };
    let (state, _) = run_training::<f32>(&cfg).unwrap();
    let data = tasks::generate(&cfg.task).unwrap();
    let report = evaluate(
        &state.model,
        &state.routers,
        &data.eval,
        &RoutingMode::Inference,
    )
    .unwrap();
    println!(
        "  criterion 7 detail: accuracy {:.3}, loss {:.4}, per-layer sparsity {:?}",
        report.accuracy, report.loss, report.per_layer_sparsity
    );
    c.check(report.accuracy >= 0.90, || {
        format!("eval accuracy {:.3} < 0.90", report.accuracy)
    });
    let mean_sparsity: f64 =
        report.per_layer_sparsity.iter().sum::<f64>() / report.per_layer_sparsity.len() as f64;
    c.check((mean_sparsity - 0.25).abs() <= 0.10, || {
        format!("realized sparsity {mean_sparsity:.3} not within 0.25 +/- 0.10")
    });

    // Random routing at matched per-layer rates, five seeds.
    let mut random_losses = Vec::new();
    for seed in 0..5 {
        let r = evaluate(
            &state.model,
            &state.routers,
            &data.eval,
            &RoutingMode::Random {
                per_layer_rate: report.per_layer_sparsity.clone(),
                seed,
            },
        )
        .unwrap();
        random_losses.push(r.loss);
    }
    let random_mean = random_losses.iter().sum::<f64>() / random_losses.len() as f64;
    println!(
        "  criterion 7 detail: learned loss {:.4} vs random routing mean {:.4}",
        report.loss, random_mean
    );
    c.check(report.loss <= random_mean, || {
        format!(
            "learned routing loss {:.4} worse than random mean {:.4}",
            report.loss, random_mean
        )
    });
    c.finish();
}

/// Criterion 8 — conservation regression: the corrected Eq. (8) keeps the
/// layer-mean skip rate equal to rho^t within 1/(R'S); the printed form
/// must fail the same invariant (documented negative test).
#[test]
fn criterion_8_sparsity_conservation_regression() {
    let mut c = Criterion::new(8, "corrected Eq. (8) conserves the budget; printed form fails");
    let mut rng = ChaCha20Rng::seed_from_u64(81);
    let mut printed_failed_somewhere = false;
    for trial in 0..200 {
        let s = rng.gen_range(4..24);
        let layers = rng.gen_range(2..8);
        let rho_t: f64 = rng.gen_range(0.05..0.9);
        let valid = vec![true; s];
        let mu: Vec<Vec<f64>> = (0..layers)
            .map(|_| (0..s).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = similarity_labels(&mu, &valid, rho_t).unwrap();
        let tol = 1.0 / (layers * s) as f64;

        let corrected: f64 = labels
            .iter()
            .map(|row| update_layer_sparsity(row, &valid))
            .sum::<f64>()
            / layers as f64;
        c.check((corrected - rho_t).abs() <= tol, || {
            format!(
                "trial {trial}: corrected mean {corrected:.4} vs rho_t {rho_t:.4} (tol {tol:.4})"
            )
        });

        let printed: f64 = labels
            .iter()
            .map(|row| update_layer_sparsity_uncorrected(row, &valid))
            .sum::<f64>()
            / layers as f64;
        if (printed - rho_t).abs() > tol {
            printed_failed_somewhere = true;
        }
    }
    c.check(printed_failed_somewhere, || {
        "the uncorrected form never violated the invariant".into()
    });
    c.finish();
}

/// Criterion 9 — bitwise-identical metrics streams for identical config+seed.
#[test]
fn criterion_9_determinism() {
    let mut c = Criterion::new(9, "identical config+seed give identical metrics streams");
    let dir = tempfile::tempdir().unwrap();
    let make = |out: std::path::PathBuf| RunConfig {
        version: 1,
        seed: 9,
        out_dir: out,
        batch_size: 8,
        total_steps: 60,
        checkpoint_every: 25,
        dtype: Dtype::F32,
        model: ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_layers: 2,
            vocab: 16,
            max_seq: 8,
        },
        expansion: Some(ExpansionSpec::new(1, 1, Policy::Identity)),
        init_checkpoint: None,
        schedule: ScheduleConfig {
            rho: 0.25,
            rho_start: 0.0,
            anneal_steps: 6,
        },
        optim: dlo::trainer::AdamWConfig {
            base_lr: 1e-3,
            ..Default::default()
        },
        router: RouterConfig::default(),
        task: TaskSpec::modular_addition(13, 400, 30, 5),
    };
    let (_, out_a) = run_training::<f32>(&make(dir.path().join("a"))).unwrap();
    let (_, out_b) = run_training::<f32>(&make(dir.path().join("b"))).unwrap();
    let ma = read_metrics(&out_a.metrics_path).unwrap();
    let mb = read_metrics(&out_b.metrics_path).unwrap();
    c.check(ma.len() == mb.len() && !ma.is_empty(), || {
        format!("stream lengths differ: {} vs {}", ma.len(), mb.len())
    });
    for (a, b) in ma.iter().zip(&mb) {
        c.check(a.deterministic_key() == b.deterministic_key(), || {
            format!("step {} diverged between runs", a.step)
        });
    }
    // The final checkpoints must also agree bit-for-bit on the payload.
    let ca = dlo::io::load::<f32>(&out_a.final_checkpoint).unwrap();
    let cb = dlo::io::load::<f32>(&out_b.final_checkpoint).unwrap();
    for ((n1, t1), (_, t2)) in ca
        .model
        .named_tensors()
        .iter()
        .zip(cb.model.named_tensors().iter())
    {
        c.check(*t1.data() == *t2.data(), || format!("tensor {n1} diverged"));
    }
    c.finish();
}
