//! Cross-module flows: checkpoint round-trips through expansion, resuming
//! from a saved state, and manifest bookkeeping.

use dlo::expand::{expand, expand_routers, ExpansionSpec, Policy};
use dlo::io::{self, Checkpoint, Provenance};
use dlo::model::{forward, ModelConfig, ModelParams, RoutingMode};
use dlo::router::RouterParams;
use dlo::trainer::SparsitySchedule;

fn toy_checkpoint(n_layers: usize, seed: u64) -> Checkpoint<f32> {
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers,
        vocab: 11,
        max_seq: 8,
    };
    let model = ModelParams::random(config, seed).unwrap();
    let routers = RouterParams::zeros(n_layers, 16, 2.0, 0.05).unwrap();
    Checkpoint {
        model,
        routers: Some(routers),
        schedule: SparsitySchedule::new(0.25, 0.0, 10, 100, n_layers).unwrap(),
        optim: None,
        provenance: Provenance::default(),
    }
}

#[test]
fn expansion_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let base_path = dir.path().join("base.dlo");
    let grown_path = dir.path().join("grown.dlo");

    let base = toy_checkpoint(4, 7);
    io::save(&base, &base_path).unwrap();

    let loaded: Checkpoint<f32> = io::load(&base_path).unwrap();
    let spec = ExpansionSpec::new(2, 1, Policy::Identity);
    let grown = expand(&loaded.model, &spec).unwrap();
    let grown_routers = expand_routers(
        loaded.routers.as_ref(),
        &spec,
        4,
        16,
        2.0,
        0.05,
    )
    .unwrap();
    let mut schedule = loaded.schedule.clone();
    schedule.per_layer_rho = vec![0.0; grown.layers.len()];
    io::save(
        &Checkpoint {
            model: grown,
            routers: Some(grown_routers),
            schedule,
            optim: None,
            provenance: loaded.provenance.clone(),
        },
        &grown_path,
    )
    .unwrap();

    // The grown file carries one router entry per expanded layer.
    let manifest = io::read_manifest(&grown_path).unwrap();
    assert_eq!(manifest.model.n_layers, 6);
    let router_entries: Vec<&str> = manifest
        .entries
        .iter()
        .map(|e| e.name.as_str())
        .filter(|n| n.starts_with("router."))
        .collect();
    assert_eq!(router_entries.len(), 6);
    for i in 0..6 {
        assert!(router_entries.contains(&format!("router.{i}.w").as_str()));
    }

    // And the function is preserved through both file hops.
    let reloaded: Checkpoint<f32> = io::load(&grown_path).unwrap();
    let tokens = [1usize, 5, 9, 2];
    let valid = [true; 4];
    let before = forward(
        &base.model,
        base.routers.as_ref().unwrap(),
        &tokens,
        &valid,
        &RoutingMode::Inference,
    )
    .unwrap();
    let after = forward(
        &reloaded.model,
        reloaded.routers.as_ref().unwrap(),
        &tokens,
        &valid,
        &RoutingMode::Inference,
    )
    .unwrap();
    for (a, b) in before.logits.data().iter().zip(after.logits.data().iter()) {
        assert!((a - b).abs() <= 1e-5, "logit drift {a} vs {b}");
    }
}

#[test]
fn schedule_state_survives_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sched.dlo");
    let mut ckpt = toy_checkpoint(2, 3);
    ckpt.schedule.step = 42;
    ckpt.schedule.per_layer_rho = vec![0.1, 0.4];
    io::save(&ckpt, &path).unwrap();
    let loaded: Checkpoint<f32> = io::load(&path).unwrap();
    assert_eq!(loaded.schedule.step, 42);
    assert_eq!(loaded.schedule.per_layer_rho, vec![0.1, 0.4]);
    assert_eq!(loaded.schedule.rho_target, 0.25);
}
