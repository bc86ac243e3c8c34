use proptest::prelude::*;
use slmkit::matcal::{embed_rows, reconstruction_error, DenseMatrix, LayerCalibration};
use slmkit::prune::{
    brute_force_prune, gradual_schedule, prune_groups, prune_heads, prune_mlp, GroupPartition, PruneConfig, StepKind,
};
use slmkit::random::{correlated_gram, gaussian_matrix, rng};
use slmkit::toylm::{KVCache, ModelConfig, ToyModel};

fn instance(seed: u64, d: usize, p: usize) -> (LayerCalibration, DenseMatrix) {
    let mut r = rng(seed);
    let h = correlated_gram(&mut r, d, 3 * d);
    let w = gaussian_matrix(&mut r, d, p, 1.0);
    (LayerCalibration::from_gram(h, 3 * d).unwrap(), w)
}

fn cfg(k_remove: usize) -> PruneConfig {
    PruneConfig {
        k_remove,
        ..PruneConfig::default()
    }
}

fn greedy_only(k_remove: usize) -> PruneConfig {
    PruneConfig {
        k_remove,
        swap_iters_max: 0,
        ..PruneConfig::default()
    }
}

#[test]
fn near_optimal_on_random_instances() {
    let mut within = 0;
    for seed in 0..60 {
        let (calib, w) = instance(seed, 10, 4);
        let part = GroupPartition::singletons(10);
        let res = prune_groups(&calib, &w, &part, &cfg(3)).unwrap();
        let greedy = prune_groups(&calib, &w, &part, &greedy_only(3)).unwrap();
        let best = brute_force_prune(&calib, &w, &part, 3, 0.01).unwrap();
        assert!(best.objective <= res.objective * (1.0 + 1e-9), "seed {seed}");
        assert!(res.objective <= greedy.objective * (1.0 + 1e-12), "seed {seed}");
        assert!((res.greedy_objective - greedy.objective).abs() <= 1e-12 * greedy.objective.max(1e-300));
        if res.objective <= 1.05 * best.objective {
            within += 1;
        }
    }
    assert!(within >= 57, "{within}/60");
}

#[test]
fn brute_force_bounds_solver_d8() {
    let (calib, w) = instance(13, 8, 4);
    let part = GroupPartition::singletons(8);
    let res = prune_groups(&calib, &w, &part, &cfg(3)).unwrap();
    let best = brute_force_prune(&calib, &w, &part, 3, 0.01).unwrap();
    assert!(best.objective <= res.objective * (1.0 + 1e-12));
}

#[test]
fn identity_gram_matches_brute_force_exactly() {
    let calib = LayerCalibration::from_gram(DenseMatrix::identity(9), 9).unwrap();
    for seed in 0..10 {
        let w = gaussian_matrix(&mut rng(seed), 9, 3, 1.0);
        let part = GroupPartition::singletons(9);
        let res = prune_groups(&calib, &w, &part, &cfg(4)).unwrap();
        let best = brute_force_prune(&calib, &w, &part, 4, 0.01).unwrap();
        assert_eq!(res.kept, best.kept);
        assert_eq!(res.objective, best.objective);
        // H = I drops the smallest-norm rows
        let mut norms: Vec<(f64, usize)> = (0..9).map(|i| (w.select_rows(&[i]).frobenius_sq(), i)).collect();
        norms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut expect: Vec<usize> = norms[4..].iter().map(|x| x.1).collect();
        expect.sort_unstable();
        assert_eq!(res.kept, expect);
    }
}

#[test]
fn head_groups_and_independent_objective() {
    let (calib, w) = instance(3, 12, 5);
    let part = GroupPartition::heads(4, 3);
    let res = prune_groups(&calib, &w, &part, &cfg(2)).unwrap();
    assert_eq!(res.kept.len(), 2);
    assert_eq!(res.kept_rows.len(), 6);
    let recomputed = reconstruction_error(&calib, &w, &embed_rows(&res.w_hat, &res.kept_rows, 12)).unwrap();
    assert!((res.objective - recomputed).abs() <= 1e-8 * recomputed.max(1e-300));
    let best = brute_force_prune(&calib, &w, &part, 2, 0.01).unwrap();
    assert!(best.objective <= res.objective * (1.0 + 1e-12));
}

#[test]
fn exact_refit_path_agrees_with_downdates() {
    for seed in 0..10 {
        let (calib, w) = instance(100 + seed, 10, 3);
        let part = GroupPartition::singletons(10);
        let fast = prune_groups(&calib, &w, &part, &greedy_only(4)).unwrap();
        let exact = prune_groups(
            &calib,
            &w,
            &part,
            &PruneConfig {
                exact_refit_every_step: true,
                ..greedy_only(4)
            },
        )
        .unwrap();
        assert_eq!(fast.kept, exact.kept, "seed {seed}");
    }
}

fn model() -> ToyModel {
    let cfg = ModelConfig {
        vocab_size: 20,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        head_dim: 4,
        d_intermediate: 24,
        max_seq_len: 16,
        norm_eps: 1e-6,
    };
    ToyModel::new_random(cfg, 21).unwrap()
}

fn calib_seqs(n: usize) -> Vec<Vec<usize>> {
    use rand::Rng;
    let mut r = rng(4);
    (0..n).map(|_| (0..12).map(|_| r.gen_range(0..20)).collect()).collect()
}

#[test]
fn mlp_zero_removal_is_noop() {
    let m = model();
    let (pruned, _) = prune_mlp(&m, &[0, 1], 0, &calib_seqs(8), &PruneConfig::default()).unwrap();
    for ((name, a), (_, b)) in m.params.named().into_iter().zip(pruned.params.named()) {
        assert!(a.rel_diff(b) <= 1e-6, "{name}");
    }
}

#[test]
fn mlp_degenerate_single_neuron_survives() {
    let m = model();
    let (pruned, res) = prune_mlp(&m, &[1], 23, &calib_seqs(8), &PruneConfig::default()).unwrap();
    assert_eq!(pruned.layer_shapes()[1].d_intermediate, 1);
    assert_eq!(res[0].kept.len(), 1);
    let out = pruned.forward(&[1, 2, 3, 4], &[], None).unwrap();
    assert!(out.logits.is_finite());
}

#[test]
fn mlp_pruning_reduces_params_and_keeps_invariants() {
    let m = model();
    let (pruned, res) = prune_mlp(&m, &[0, 1], 9, &calib_seqs(16), &PruneConfig::default()).unwrap();
    assert_eq!(m.count_params() - pruned.count_params(), 2 * 3 * 16 * 9);
    for r in &res {
        let objs: Vec<f64> = r.trace.iter().filter(|s| s.kind == StepKind::Swap).map(|s| s.objective).collect();
        assert!(objs.windows(2).all(|w| w[1] < w[0]));
    }
    // cache equivalence
    let toks = [3, 7, 1, 9, 12, 4, 4, 0];
    let full = pruned.forward(&toks, &[], None).unwrap().logits;
    let mut cache = KVCache::new(&pruned);
    pruned.forward(&toks[..5], &[], Some(&mut cache)).unwrap();
    let tail = pruned.forward(&toks[5..], &[], Some(&mut cache)).unwrap().logits;
    assert!(tail.rel_diff(&full.select_rows(&[5, 6, 7])) <= 1e-6);
    // causality
    let mut other = toks;
    other[7] = 15;
    let alt = pruned.forward(&other, &[], None).unwrap().logits;
    for t in 0..7 {
        assert_eq!(full.row(t), alt.row(t));
    }
}

#[test]
fn halving_heads_halves_attention_params() {
    let m = model();
    let attn = |m: &ToyModel| -> usize {
        m.params
            .layers
            .iter()
            .map(|b| b.attn_q.data().len() + b.attn_k.data().len() + b.attn_v.data().len() + b.attn_o.data().len())
            .sum()
    };
    let (pruned, _) = prune_heads(&m, &[0, 1], 2, &calib_seqs(8), &PruneConfig::default()).unwrap();
    assert_eq!(2 * attn(&pruned), attn(&m));
    assert!(pruned.layer_shapes().iter().all(|s| s.n_heads == 2));
    let (same, _) = prune_heads(&m, &[0], 0, &calib_seqs(8), &PruneConfig::default()).unwrap();
    assert!(same.params.layers[0].attn_o.rel_diff(&m.params.layers[0].attn_o) <= 1e-6);
    assert!(prune_heads(&m, &[0], 4, &calib_seqs(8), &PruneConfig::default()).is_err());
}

#[test]
fn pruned_model_gradients_match_finite_differences() {
    let m = model();
    let (pruned, _) = prune_heads(&m, &[0], 1, &calib_seqs(8), &PruneConfig::default()).unwrap();
    let (pruned, _) = prune_mlp(&pruned, &[1], 10, &calib_seqs(8), &PruneConfig::default()).unwrap();
    let toks = [1, 5, 9, 2, 7];
    // loss: sum of logits ⊙ fixed weights
    let weights = gaussian_matrix(&mut rng(9), toks.len(), 20, 1.0);
    let loss = |mm: &ToyModel| -> f64 {
        let l = mm.forward(&toks, &[], None).unwrap().logits;
        l.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let grads = pruned.backward(&toks, &weights).unwrap();
    for (name, g) in grads.named() {
        let dir = gaussian_matrix(&mut rng(name.len() as u64), g.rows(), g.cols(), 1.0);
        let analytic: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        let h = 1e-5;
        let mut plus = pruned.clone();
        plus.params.get_mut(&name).unwrap().axpy(h, &dir);
        let mut minus = pruned.clone();
        minus.params.get_mut(&name).unwrap().axpy(-h, &dir);
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        assert!((fd - analytic).abs() <= 1e-5 * fd.abs().max(1.0), "{name}: {fd} vs {analytic}");
    }
}

proptest! {
    #[test]
    fn schedule_sums_and_balances(total in 1usize..500, steps in 1usize..20) {
        prop_assume!(steps <= total);
        let s = gradual_schedule(total, steps).unwrap();
        prop_assert_eq!(s.len(), steps);
        prop_assert_eq!(s.iter().sum::<usize>(), total);
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }

    #[test]
    fn solver_result_invariants(seed in 0u64..1000, k in 0usize..6) {
        let (calib, w) = instance(seed, 7, 3);
        let part = GroupPartition::singletons(7);
        let res = prune_groups(&calib, &w, &part, &cfg(k)).unwrap();
        prop_assert_eq!(res.kept.len(), 7 - k);
        let recomputed = reconstruction_error(&calib, &w, &res.embedded(7)).unwrap();
        prop_assert!((res.objective - recomputed).abs() <= 1e-8 * recomputed.max(1e-12));
        prop_assert!(res.objective <= res.greedy_objective * (1.0 + 1e-12));
    }

    #[test]
    fn partition_rejects_overlap(d in 2usize..12, dup in 0usize..12) {
        let dup = dup % d;
        let mut groups: Vec<Vec<usize>> = (0..d).map(|i| vec![i]).collect();
        groups[(dup + 1) % d].push(dup);
        prop_assert!(GroupPartition::new(d, groups, slmkit::prune::GroupKind::MlpNeuron).is_err());
    }
}
