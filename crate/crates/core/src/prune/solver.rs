use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric_err, shape_err, Result};
use crate::matcal::{
    cholesky, cholesky_solve, damp_and_factor, embed_rows, reconstruction_error, refit_support, DampedFactor,
    DenseMatrix, LayerCalibration, DEFAULT_LAMBDA_REL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    MlpNeuron,
    AttnHead,
}

/// Partition of a weight matrix's input rows into removable groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    dim: usize,
    groups: Vec<Vec<usize>>,
    kind: GroupKind,
}

impl GroupPartition {
    pub fn new(dim: usize, groups: Vec<Vec<usize>>, kind: GroupKind) -> Result<Self> {
        let mut seen = vec![false; dim];
        for g in &groups {
            if g.is_empty() {
                return Err(invalid!("empty group"));
            }
            for &i in g {
                if i >= dim {
                    return Err(invalid!("group index {i} out of range for dim {dim}"));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(invalid!("index {i} appears in two groups"));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(invalid!("index {missing} is not covered by any group"));
        }
        if kind == GroupKind::AttnHead {
            let size = groups[0].len();
            if groups.iter().any(|g| g.len() != size) {
                return Err(invalid!("attention head groups must all have the same size"));
            }
        }
        Ok(Self { dim, groups, kind })
    }

    /// One group per row; used for MLP neurons.
    pub fn singletons(dim: usize) -> Self {
        Self {
            dim,
            groups: (0..dim).map(|i| vec![i]).collect(),
            kind: GroupKind::MlpNeuron,
        }
    }

    /// Contiguous blocks of `head_dim` rows, one per attention head.
    pub fn heads(n_heads: usize, head_dim: usize) -> Self {
        Self {
            dim: n_heads * head_dim,
            groups: (0..n_heads)
                .map(|h| (h * head_dim..(h + 1) * head_dim).collect())
                .collect(),
            kind: GroupKind::AttnHead,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Sorted row indices covered by the listed groups.
    pub fn rows_of(&self, group_ids: &[usize]) -> Vec<usize> {
        let mut rows: Vec<usize> = group_ids.iter().flat_map(|&g| self.groups[g].iter().copied()).collect();
        rows.sort_unstable();
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub k_remove: usize,
    /// Number of gradual stages; consumed by the model-level pipeline.
    pub n_steps: usize,
    pub swap_iters_max: usize,
    pub lambda_rel: f64,
    /// Re-factorize from scratch after every greedy removal instead of
    /// applying the rank-|g| inverse downdate.
    pub exact_refit_every_step: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            k_remove: 0,
            n_steps: 1,
            swap_iters_max: 20,
            lambda_rel: DEFAULT_LAMBDA_REL,
            exact_refit_every_step: false,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, kind: GroupKind) -> Result<()> {
        if !(self.lambda_rel > 0.0) {
            return Err(invalid!("lambda_rel must be positive"));
        }
        if self.n_steps == 0 {
            return Err(invalid!("n_steps must be >= 1"));
        }
        if kind == GroupKind::MlpNeuron && self.k_remove > 0 && self.n_steps > self.k_remove {
            return Err(invalid!(
                "n_steps ({}) cannot exceed k_remove ({})",
                self.n_steps,
                self.k_remove
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepKind {
    Greedy,
    Swap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    pub kind: StepKind,
    /// Groups removed by this step.
    pub removed: Vec<usize>,
    /// Groups restored by a swap.
    pub restored: Vec<usize>,
    /// Greedy: OBS score of the removed group. Swap: objective decrease.
    pub score: f64,
    /// Reconstruction error of the exact refit on the support after this
    /// step.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    /// Surviving group ids, ascending.
    pub kept: Vec<usize>,
    /// Rows of the weight matrix covered by `kept`, ascending.
    pub kept_rows: Vec<usize>,
    /// Refit weights on `kept_rows` (`|kept_rows| × p`).
    pub w_hat: DenseMatrix,
    /// Reconstruction error of `w_hat` placed on its support.
    pub objective: f64,
    /// Reconstruction error of the exact refit on the greedy-only support.
    pub greedy_objective: f64,
    pub trace: Vec<PruneStep>,
}

impl PruneResult {
    fn build(
        calib: &LayerCalibration,
        w: &DenseMatrix,
        partition: &GroupPartition,
        kept: Vec<usize>,
        lambda_rel: f64,
        greedy_objective: Option<f64>,
        trace: Vec<PruneStep>,
    ) -> Result<Self> {
        let kept_rows = partition.rows_of(&kept);
        let w_hat = refit_support(calib, w, &kept_rows, lambda_rel)?;
        let objective = reconstruction_error(calib, w, &embed_rows(&w_hat, &kept_rows, w.rows()))?;
        Ok(Self {
            kept,
            kept_rows,
            w_hat,
            objective,
            greedy_objective: greedy_objective.unwrap_or(objective),
            trace,
        })
    }

    /// `w_hat` scattered back into a full-size matrix with zeros elsewhere.
    pub fn embedded(&self, dim: usize) -> DenseMatrix {
        embed_rows(&self.w_hat, &self.kept_rows, dim)
    }
}

/// Exact increase of the damped objective when group `group` is zeroed and
/// the remaining rows are optimally compensated:
/// `tr(W_gᵀ [(H⁻¹)_gg]⁻¹ W_g)`.
pub fn obs_group_score(factor: &DampedFactor, w: &DenseMatrix, group: &[usize]) -> Result<f64> {
    if w.rows() != factor.dim {
        return Err(shape_err!("W has {} rows, factor dim is {}", w.rows(), factor.dim));
    }
    if let Some(&bad) = group.iter().find(|&&g| g >= factor.dim) {
        return Err(invalid!("group index {bad} out of range"));
    }
    group_score(&factor.inverse, w, group)
}

fn group_score(hinv: &DenseMatrix, w: &DenseMatrix, group: &[usize]) -> Result<f64> {
    let block = hinv.select(group, group);
    let l = cholesky(&block).map_err(|e| numeric_err!("singular inverse block for group {group:?}: {e}"))?;
    let w_g = w.select_rows(group);
    let x = cholesky_solve(&l, &w_g);
    let s: f64 = w_g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    Ok(s.max(0.0))
}

/// Reconstruction error of the exact refit on the complement of
/// `removed_rows`, from the damped inverse `G`. The refit residual is
/// `D = G_{:,R} Z` with `Z = (G_RR)⁻¹ W_R`, its damped error is
/// `tr(W_Rᵀ Z)`, and the undamped error drops the `λ‖D‖²` term.
fn removal_objective(factor: &DampedFactor, w: &DenseMatrix, removed_rows: &[usize]) -> Result<f64> {
    if removed_rows.is_empty() {
        return Ok(0.0);
    }
    let g = &factor.inverse;
    let block = g.select(removed_rows, removed_rows);
    let l = cholesky(&block).map_err(|e| numeric_err!("singular inverse block: {e}"))?;
    let w_r = w.select_rows(removed_rows);
    let z = cholesky_solve(&l, &w_r);
    let damped: f64 = w_r.data().iter().zip(z.data()).map(|(a, b)| a * b).sum();
    let all: Vec<usize> = (0..g.rows()).collect();
    let residual = g.select(&all, removed_rows).matmul(&z);
    Ok((damped - factor.lambda * residual.frobenius_sq()).max(0.0))
}

struct GreedyState {
    hinv: DenseMatrix,
    w: DenseMatrix,
    live: Vec<bool>,
}

impl GreedyState {
    fn refactor(calib: &LayerCalibration, w0: &DenseMatrix, partition: &GroupPartition, live: &[bool], lambda_rel: f64) -> Result<(DenseMatrix, DenseMatrix)> {
        let live_groups: Vec<usize> = (0..partition.len()).filter(|&g| live[g]).collect();
        let rows = partition.rows_of(&live_groups);
        let d = partition.dim();
        let lambda = calib.damping(lambda_rel);
        let h = calib.damped_gram(lambda).select(&rows, &rows);
        let l = cholesky(&h)?;
        let inv = cholesky_solve(&l, &DenseMatrix::identity(rows.len()));
        let mut hinv = DenseMatrix::zeros(d, d);
        for (i, &ri) in rows.iter().enumerate() {
            for (j, &rj) in rows.iter().enumerate() {
                hinv.set(ri, rj, inv.get(i, j));
            }
        }
        let w = embed_rows(&refit_support(calib, w0, &rows, lambda_rel)?, &rows, d);
        Ok((hinv, w))
    }

    /// OBS removal of `group` with compensation of the remaining rows.
    fn remove(&mut self, group: &[usize]) -> Result<()> {
        let block = self.hinv.select(group, group);
        let l = cholesky(&block)?;
        let d = self.hinv.rows();
        let all: Vec<usize> = (0..d).collect();
        let h_cols = self.hinv.select(&all, group); // d × |g|
        let coef_w = cholesky_solve(&l, &self.w.select_rows(group)); // |g| × p
        let coef_h = cholesky_solve(&l, &h_cols.transpose()); // |g| × d
        self.w.axpy(-1.0, &h_cols.matmul(&coef_w));
        self.hinv.axpy(-1.0, &h_cols.matmul(&coef_h));
        self.hinv.symmetrize();
        for &r in group {
            self.w.row_mut(r).fill(0.0);
            self.hinv.row_mut(r).fill(0.0);
            for c in 0..d {
                self.hinv.set(c, r, 0.0);
            }
        }
        Ok(())
    }
}

/// Structured pruning by greedy group-OBS elimination followed by
/// best-improvement swap local search.
///
/// Phase 1 removes `k_remove` groups one at a time, always the live group
/// with the smallest OBS score (ties to the lowest id), compensating the
/// remaining rows after each removal. Phase 2 repeatedly tries exchanging a
/// removed group with a kept one, scoring each candidate support with the
/// exact refit objective, and applies the best strictly improving exchange.
/// When no single exchange improves and the two-for-two neighborhood is
/// small, that neighborhood is searched before stopping.
/// The returned weights are the exact refit on the final support.
pub fn prune_groups(
    calib: &LayerCalibration,
    w: &DenseMatrix,
    partition: &GroupPartition,
    cfg: &PruneConfig,
) -> Result<PruneResult> {
    cfg.validate(partition.kind())?;
    check_inputs(calib, w, partition)?;
    let n_groups = partition.len();
    if cfg.k_remove >= n_groups {
        return Err(invalid!(
            "k_remove ({}) must be smaller than the number of groups ({n_groups})",
            cfg.k_remove
        ));
    }
    let factor = damp_and_factor(calib, cfg.lambda_rel)?;
    let (greedy_removed, mut trace) = greedy_eliminate(calib, w, partition, cfg, &factor)?;
    let greedy_kept: Vec<usize> = (0..n_groups).filter(|g| !greedy_removed.contains(g)).collect();
    let greedy = PruneResult::build(calib, w, partition, greedy_kept, cfg.lambda_rel, None, Vec::new())?;
    let mut current = removal_objective(&factor, w, &partition.rows_of(&greedy_removed))?;
    let removed = local_search(&factor, w, partition, greedy_removed, &mut current, cfg.swap_iters_max, &mut trace)?;

    let kept: Vec<usize> = (0..n_groups).filter(|g| !removed.contains(g)).collect();
    PruneResult::build(calib, w, partition, kept, cfg.lambda_rel, Some(greedy.objective), trace)
}

/// Backward elimination of `k_remove` groups by smallest OBS score.
fn greedy_eliminate(
    calib: &LayerCalibration,
    w: &DenseMatrix,
    partition: &GroupPartition,
    cfg: &PruneConfig,
    factor: &DampedFactor,
) -> Result<(Vec<usize>, Vec<PruneStep>)> {
    let n_groups = partition.len();
    let mut state = GreedyState {
        hinv: factor.inverse.clone(),
        w: w.clone(),
        live: vec![true; n_groups],
    };
    let mut trace = Vec::new();
    for _ in 0..cfg.k_remove {
        let mut best: Option<(usize, f64)> = None;
        for g in (0..n_groups).filter(|&g| state.live[g]) {
            let s = match group_score(&state.hinv, &state.w, &partition.groups()[g]) {
                Ok(s) => s,
                Err(_) => {
                    let (hinv, wc) = GreedyState::refactor(calib, w, partition, &state.live, cfg.lambda_rel)?;
                    state.hinv = hinv;
                    state.w = wc;
                    group_score(&state.hinv, &state.w, &partition.groups()[g])?
                }
            };
            if best.map_or(true, |(_, b)| s < b) {
                best = Some((g, s));
            }
        }
        let (g, score) = best.expect("at least one live group");
        state.live[g] = false;
        let group = &partition.groups()[g];
        if cfg.exact_refit_every_step || state.remove(group).is_err() {
            let (hinv, wc) = GreedyState::refactor(calib, w, partition, &state.live, cfg.lambda_rel)?;
            state.hinv = hinv;
            state.w = wc;
        }
        let removed: Vec<usize> = (0..n_groups).filter(|&g| !state.live[g]).collect();
        let objective = removal_objective(factor, w, &partition.rows_of(&removed))?;
        trace.push(PruneStep {
            kind: StepKind::Greedy,
            removed: vec![g],
            restored: Vec::new(),
            score,
            objective,
        });
    }
    let removed = (0..n_groups).filter(|&g| !state.live[g]).collect();
    Ok((removed, trace))
}

/// Best-improvement exchange search from `removed`; updates `current` and
/// appends accepted moves to `trace`.
fn local_search(
    factor: &DampedFactor,
    w: &DenseMatrix,
    partition: &GroupPartition,
    mut removed: Vec<usize>,
    current: &mut f64,
    iters: usize,
    trace: &mut Vec<PruneStep>,
) -> Result<Vec<usize>> {
    let n_groups = partition.len();
    if removed.is_empty() {
        return Ok(removed);
    }
    for _ in 0..iters {
        let mut mv = best_exchange(factor, w, partition, &removed, *current, 1)?;
        if mv.is_none() && exchange_count(removed.len(), n_groups - removed.len(), 2) <= PAIR_EXCHANGE_BUDGET {
            mv = best_exchange(factor, w, partition, &removed, *current, 2)?;
        }
        let Some(mv) = mv else { break };
        trace.push(PruneStep {
            kind: StepKind::Swap,
            removed: mv.added_to_removed.clone(),
            restored: mv.restored.clone(),
            score: *current - mv.objective,
            objective: mv.objective,
        });
        removed = mv.removed;
        *current = mv.objective;
    }
    Ok(removed)
}

/// Largest neighborhood of two-for-two exchanges searched when no single
/// exchange improves.
const PAIR_EXCHANGE_BUDGET: u128 = 20_000;

struct Exchange {
    removed: Vec<usize>,
    added_to_removed: Vec<usize>,
    restored: Vec<usize>,
    objective: f64,
}

fn exchange_count(n_removed: usize, n_kept: usize, size: usize) -> u128 {
    if size > n_removed || size > n_kept {
        return 0;
    }
    binomial(n_removed, size) * binomial(n_kept, size)
}

/// Best strictly improving exchange of `size` removed groups for `size` kept
/// ones; candidates are visited in lexicographic order and ties keep the
/// first.
fn best_exchange(
    factor: &DampedFactor,
    w: &DenseMatrix,
    partition: &GroupPartition,
    removed: &[usize],
    current: f64,
    size: usize,
) -> Result<Option<Exchange>> {
    let n = partition.len();
    if size > removed.len() || size > n - removed.len() {
        return Ok(None);
    }
    let kept: Vec<usize> = (0..n).filter(|g| !removed.contains(g)).collect();
    let mut out_idx: Vec<usize> = (0..size).collect();
    let mut best: Option<Exchange> = None;
    loop {
        let mut in_idx: Vec<usize> = (0..size).collect();
        loop {
            let restored: Vec<usize> = out_idx.iter().map(|&i| removed[i]).collect();
            let added: Vec<usize> = in_idx.iter().map(|&i| kept[i]).collect();
            let mut cand: Vec<usize> = removed.iter().copied().filter(|r| !restored.contains(r)).collect();
            cand.extend_from_slice(&added);
            cand.sort_unstable();
            let obj = removal_objective(factor, w, &partition.rows_of(&cand))?;
            let threshold = best.as_ref().map_or(current, |b| b.objective);
            if obj < threshold && obj < current * (1.0 - 1e-12) {
                best = Some(Exchange {
                    removed: cand,
                    added_to_removed: added,
                    restored,
                    objective: obj,
                });
            }
            if !next_combination(&mut in_idx, kept.len()) {
                break;
            }
        }
        if !next_combination(&mut out_idx, removed.len()) {
            break;
        }
    }
    Ok(best)
}

/// Exhaustive search over every support keeping `|groups| − k_remove`
/// groups; ties go to the lexicographically smallest kept set.
pub fn brute_force_prune(
    calib: &LayerCalibration,
    w: &DenseMatrix,
    partition: &GroupPartition,
    k_remove: usize,
    lambda_rel: f64,
) -> Result<PruneResult> {
    check_inputs(calib, w, partition)?;
    let n = partition.len();
    if k_remove >= n {
        return Err(invalid!("k_remove ({k_remove}) must be smaller than the number of groups ({n})"));
    }
    let keep = n - k_remove;
    let count = binomial(n, k_remove);
    if count > 200_000 {
        return Err(invalid!("brute force needs {count} supports, budget is 200000"));
    }
    let mut combo: Vec<usize> = (0..keep).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let rows = partition.rows_of(&combo);
        let fit = refit_support(calib, w, &rows, lambda_rel)?;
        let obj = reconstruction_error(calib, w, &embed_rows(&fit, &rows, w.rows()))?;
        if best.as_ref().map_or(true, |(_, b)| obj < *b) {
            best = Some((combo.clone(), obj));
        }
        if !next_combination(&mut combo, n) {
            break;
        }
    }
    let (kept, _) = best.expect("at least one support");
    PruneResult::build(calib, w, partition, kept, lambda_rel, None, Vec::new())
}

/// Per-step removal counts: as equal as possible, earlier steps take the
/// remainder.
pub fn gradual_schedule(total_remove: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 {
        return Err(invalid!("n_steps must be >= 1"));
    }
    if n_steps > total_remove {
        return Err(invalid!("n_steps ({n_steps}) exceeds total_remove ({total_remove})"));
    }
    let base = total_remove / n_steps;
    let extra = total_remove % n_steps;
    Ok((0..n_steps).map(|i| base + usize::from(i < extra)).collect())
}

fn check_inputs(calib: &LayerCalibration, w: &DenseMatrix, partition: &GroupPartition) -> Result<()> {
    if calib.dim() != partition.dim() || w.rows() != partition.dim() {
        return Err(shape_err!(
            "calibration dim {}, W rows {} and partition dim {} must agree",
            calib.dim(),
            w.rows(),
            partition.dim()
        ));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Advances `combo` to the next k-subset of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in (i + 1)..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
