//! Property tests: gating and labeling against brute-force oracles, plus
//! structural invariants of the schedules and the FLOPs accountant.

use proptest::prelude::*;

use dlo::flops::{flops_dense, flops_sparse, ArchSpec};
use dlo::router::gate_train_topk;
use dlo::trainer::{
    layer_lr, similarity_labels, update_layer_sparsity, update_layer_sparsity_uncorrected,
    warmup_cosine, SparsitySchedule,
};

/// Independent oracle for the training gate: enumerate valid indices, sort
/// by (score descending, index ascending), keep the first k.
fn topk_oracle(scores: &[f64], rho: f64, valid: &[bool]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| valid[i]).collect();
    let k = ((1.0 - rho) * idx.len() as f64).floor() as usize;
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![false; scores.len()];
    for &i in idx.iter().take(k) {
        out[i] = true;
    }
    out
}

/// Independent oracle for Eq. (5): rank every valid (layer, token) cell by
/// (mu ascending, layer, token) and label the first k.
fn labels_oracle(mu: &[Vec<f64>], valid: &[bool], rho_t: f64) -> Vec<Vec<bool>> {
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (i, row) in mu.iter().enumerate() {
        for (t, _) in row.iter().enumerate() {
            if valid[t] {
                pool.push((i, t));
            }
        }
    }
    let k = ((1.0 - rho_t) * pool.len() as f64).floor() as usize;
    pool.sort_by(|&(i, t), &(j, u)| {
        mu[i][t]
            .partial_cmp(&mu[j][u])
            .unwrap()
            .then((i, t).cmp(&(j, u)))
    });
    let mut out = vec![vec![false; valid.len()]; mu.len()];
    for &(i, t) in pool.iter().take(k) {
        out[i][t] = true;
    }
    out
}

fn arb_scores(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #[test]
    fn topk_matches_oracle(
        scores in arb_scores(12),
        valid in prop::collection::vec(any::<bool>(), 12),
        rho in 0.0..=1.0f64,
    ) {
        let got = gate_train_topk(&scores, rho, &valid).unwrap();
        prop_assert_eq!(got, topk_oracle(&scores, rho, &valid));
    }

    #[test]
    fn topk_count_and_validity(
        scores in arb_scores(16),
        valid in prop::collection::vec(any::<bool>(), 16),
        rho in 0.0..=1.0f64,
    ) {
        let got = gate_train_topk(&scores, rho, &valid).unwrap();
        let n_valid = valid.iter().filter(|&&v| v).count();
        let k = ((1.0 - rho) * n_valid as f64).floor() as usize;
        prop_assert_eq!(got.iter().filter(|&&l| l).count(), k);
        for (l, v) in got.iter().zip(&valid) {
            prop_assert!(!(*l && !v), "activated an invalid token");
        }
    }

    #[test]
    fn labels_match_oracle(
        mu in prop::collection::vec(prop::collection::vec(-1.0..=1.0f64, 9), 1..6),
        valid in prop::collection::vec(any::<bool>(), 9),
        rho_t in 0.0..0.999f64,
    ) {
        let got = similarity_labels(&mu, &valid, rho_t).unwrap();
        prop_assert_eq!(got, labels_oracle(&mu, &valid, rho_t));
    }

    #[test]
    fn labels_global_count_conserved(
        mu in prop::collection::vec(prop::collection::vec(-1.0..=1.0f64, 8), 1..6),
        valid in prop::collection::vec(any::<bool>(), 8),
        rho_t in 0.0..0.999f64,
    ) {
        let labels = similarity_labels(&mu, &valid, rho_t).unwrap();
        let n_valid = valid.iter().filter(|&&v| v).count();
        let k = ((1.0 - rho_t) * (mu.len() * n_valid) as f64).floor() as usize;
        let active: usize = labels
            .iter()
            .map(|row| row.iter().filter(|&&l| l).count())
            .sum();
        prop_assert_eq!(active, k);
    }

    /// The corrected Eq. (8) conserves the budget: averaging per-layer skip
    /// rates recovers the global label sparsity. The printed form does not.
    #[test]
    fn sparsity_update_conserves_budget(
        mu in prop::collection::vec(prop::collection::vec(-1.0..=1.0f64, 8), 2..6),
        rho_t in 0.0..0.999f64,
    ) {
        let valid = vec![true; 8];
        let labels = similarity_labels(&mu, &valid, rho_t).unwrap();
        let n = mu.len() as f64;
        let mean: f64 = labels
            .iter()
            .map(|row| update_layer_sparsity(row, &valid))
            .sum::<f64>() / n;
        let k = ((1.0 - rho_t) * (mu.len() * 8) as f64).floor() as usize;
        let expect = 1.0 - k as f64 / (mu.len() * 8) as f64;
        prop_assert!((mean - expect).abs() < 1e-12);

        let mean_raw: f64 = labels
            .iter()
            .map(|row| update_layer_sparsity_uncorrected(row, &valid))
            .sum::<f64>() / n;
        // The uncorrected mean equals the *activated* fraction instead.
        prop_assert!((mean_raw - (1.0 - expect)).abs() < 1e-12);
    }

    #[test]
    fn anneal_is_monotone_and_clamped(
        rho in 0.01..0.9f64,
        rho_start_frac in 0.0..1.0f64,
        anneal in 1u64..500,
    ) {
        let rho_start = rho * rho_start_frac;
        let s = SparsitySchedule::new(rho, rho_start, anneal, 1000, 2).unwrap();
        prop_assert!((s.annealed_rho(0) - rho_start).abs() < 1e-12);
        let mut prev = -1.0;
        for t in 0..=anneal + 5 {
            let r = s.annealed_rho(t);
            prop_assert!(r >= prev - 1e-12);
            prop_assert!(r <= rho + 1e-12);
            prev = r;
        }
        prop_assert_eq!(s.annealed_rho(anneal), rho);
    }

    #[test]
    fn warmup_cosine_bounded_and_peaks_after_warmup(
        total in 10u64..2000,
        ratio in 0.0..0.3f64,
    ) {
        let warm = (ratio * total as f64).ceil().max(1.0) as u64;
        for step in 0..total {
            let m = warmup_cosine(step, total, ratio);
            prop_assert!((0.0..=1.0).contains(&m));
        }
        prop_assert!((warmup_cosine(warm, total, ratio) - 1.0).abs() < 1e-12);
        prop_assert!(warmup_cosine(total - 1, total, ratio) < 0.5);
    }

    #[test]
    fn layer_lr_scales_with_activity(
        base in 1e-6..1e-2f64,
        rho_i in 0.0..=1.0f64,
        rho_t in 0.0..0.99f64,
    ) {
        let lr = layer_lr(base, rho_i, rho_t);
        prop_assert!((lr - base * (1.0 - rho_i) / (1.0 - rho_t)).abs() < 1e-15);
        // A layer at exactly the target rate keeps the base rate.
        prop_assert!((layer_lr(base, rho_t, rho_t) - base).abs() < 1e-15);
    }

    #[test]
    fn sparse_flops_bounded_and_monotone(
        d_exp in 4u32..8,
        layers in 1usize..12,
        seq in 1usize..128,
        rho in 0.0..=1.0f64,
    ) {
        let d = 1usize << d_exp;
        let arch = ArchSpec {
            name: "prop".into(),
            d_model: d,
            n_layers: layers,
            d_ff: d * 3,
            vocab: 64,
            n_heads: 4,
        };
        let dense = flops_dense(&arch, seq).unwrap();
        let sparse = flops_sparse(&arch, seq, &vec![rho; layers]).unwrap();
        prop_assert!(sparse.sparse_total <= dense.dense_total + 1e-6);
        prop_assert!(sparse.sparse_total > 0.0);
        // More skipping never costs more.
        let denser = flops_sparse(&arch, seq, &vec![rho * 0.5; layers]).unwrap();
        prop_assert!(sparse.sparse_total <= denser.sparse_total + 1e-6);
        // rho = 0 recovers the dense count exactly.
        let zero = flops_sparse(&arch, seq, &vec![0.0; layers]).unwrap();
        prop_assert!((zero.sparse_total - dense.dense_total).abs() < 1e-6);
    }
}
