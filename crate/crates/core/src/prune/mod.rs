//! Structured pruning of MLP neurons and attention heads by layerwise
//! reconstruction.

mod solver;

pub use solver::{
    brute_force_prune, gradual_schedule, obs_group_score, prune_groups, GroupKind, GroupPartition, PruneConfig,
    PruneResult, PruneStep, StepKind,
};

use crate::error::{invalid, Result};
use crate::toylm::{Tap, ToyModel};

/// Removes `n_remove` intermediate neurons from each listed layer.
///
/// Calibration taps for all layers are collected from `model` before any
/// layer is touched. The surviving `mlp_down` rows are refit; `mlp_gate` and
/// `mlp_up` keep the matching columns unchanged.
pub fn prune_mlp(
    model: &ToyModel,
    layers: &[usize],
    n_remove: usize,
    calib_seqs: &[Vec<usize>],
    cfg: &PruneConfig,
) -> Result<(ToyModel, Vec<PruneResult>)> {
    check_layers(model, layers)?;
    let taps: Vec<Tap> = layers.iter().map(|&l| Tap::MlpDown(l)).collect();
    let calibs = model.calibrate(calib_seqs, &taps)?;
    let mut out = model.clone();
    let mut results = Vec::with_capacity(layers.len());
    for (&l, calib) in layers.iter().zip(&calibs) {
        let block = &mut out.params.layers[l];
        let inter = block.mlp_down.rows();
        let layer_cfg = PruneConfig {
            k_remove: n_remove,
            ..cfg.clone()
        };
        let res = prune_groups(calib, &block.mlp_down, &GroupPartition::singletons(inter), &layer_cfg)?;
        block.mlp_gate = block.mlp_gate.select_cols(&res.kept_rows);
        block.mlp_up = block.mlp_up.select_cols(&res.kept_rows);
        block.mlp_down = res.w_hat.clone();
        results.push(res);
    }
    out.validate()?;
    Ok((out, results))
}

/// Removes `n_remove` whole attention heads from each listed layer; the
/// surviving `attn_o` rows are refit and `attn_q/k/v` keep the matching
/// columns.
pub fn prune_heads(
    model: &ToyModel,
    layers: &[usize],
    n_remove: usize,
    calib_seqs: &[Vec<usize>],
    cfg: &PruneConfig,
) -> Result<(ToyModel, Vec<PruneResult>)> {
    check_layers(model, layers)?;
    let taps: Vec<Tap> = layers.iter().map(|&l| Tap::AttnOut(l)).collect();
    let calibs = model.calibrate(calib_seqs, &taps)?;
    let hd = model.config.head_dim;
    let mut out = model.clone();
    let mut results = Vec::with_capacity(layers.len());
    for (&l, calib) in layers.iter().zip(&calibs) {
        let block = &mut out.params.layers[l];
        let n_heads = block.attn_o.rows() / hd;
        let layer_cfg = PruneConfig {
            k_remove: n_remove,
            ..cfg.clone()
        };
        let res = prune_groups(calib, &block.attn_o, &GroupPartition::heads(n_heads, hd), &layer_cfg)?;
        block.attn_q = block.attn_q.select_cols(&res.kept_rows);
        block.attn_k = block.attn_k.select_cols(&res.kept_rows);
        block.attn_v = block.attn_v.select_cols(&res.kept_rows);
        block.attn_o = res.w_hat.clone();
        results.push(res);
    }
    out.validate()?;
    Ok((out, results))
}

fn check_layers(model: &ToyModel, layers: &[usize]) -> Result<()> {
    if let Some(&bad) = layers.iter().find(|&&l| l >= model.config.n_layers) {
        return Err(invalid!("layer {bad} out of range ({} layers)", model.config.n_layers));
    }
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != layers.len() {
        return Err(invalid!("duplicate layer index"));
    }
    Ok(())
}
