use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric_err, Result};
use crate::matcal::DenseMatrix;
use crate::random::{derive_seed, rng};
use crate::toylm::{auc, p_yes, SynthDataset, ToyModel};

use super::batch::{build_batch_for, BatchItem, SamplingSchedule};
use super::loss::{masked_sequence_loss, KDLossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_frac: f64,
    /// Global gradient-norm clip; `inf` disables it.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 0.1,
            warmup_steps: 20,
            min_lr_frac: 0.1,
            clip_norm: 1.0,
            seed: 21,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(invalid!("min_lr_frac must be in [0, 1]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid!("clip_norm must be positive (inf disables clipping)"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// Plain SGD with linear warmup, cosine decay and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: TrainConfig,
    total_steps: usize,
    step: usize,
    last_finite: Option<(usize, f64)>,
}

impl Sgd {
    pub fn new(cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            total_steps,
            step: 0,
            last_finite: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.cfg;
        if step < c.warmup_steps {
            return c.lr * (step + 1) as f64 / c.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(c.warmup_steps).max(1);
        let progress = ((step - c.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        c.lr * (c.min_lr_frac + (1.0 - c.min_lr_frac) * cos)
    }

    fn diverged(&self, what: &str) -> crate::Error {
        let last = match self.last_finite {
            Some((s, l)) => format!("last finite step {s} had loss {l:.6e}"),
            None => "no earlier finite step".to_string(),
        };
        numeric_err!("training diverged at step {} ({what}); {last}", self.step)
    }

    /// Applies one update, or fails without touching `model` when the loss
    /// or gradient is not finite.
    fn apply(&mut self, model: &mut ToyModel, mut grads: crate::toylm::Params, loss: f64) -> Result<f64> {
        let norm = grads.norm_sq().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(self.diverged(&format!("loss {loss}, gradient norm {norm}")));
        }
        if norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / norm);
        }
        let lr = self.lr_at(self.step);
        if lr != 0.0 {
            model.params.axpy(-lr, &grads);
        }
        self.last_finite = Some((self.step, loss));
        self.step += 1;
        Ok(lr)
    }
}

/// Teacher model plus its logits on ground-truth sequences, computed once.
pub struct Teacher<'a> {
    model: &'a ToyModel,
    cache: HashMap<usize, DenseMatrix>,
}

impl<'a> Teacher<'a> {
    pub fn new(model: &'a ToyModel) -> Self {
        Self {
            model,
            cache: HashMap::new(),
        }
    }

    pub fn model(&self) -> &ToyModel {
        self.model
    }

    fn logits(&mut self, item: &BatchItem) -> Result<DenseMatrix> {
        let inputs = &item.tokens[..item.tokens.len() - 1];
        if item.on_policy {
            return Ok(self.model.forward(inputs, &[], None)?.logits);
        }
        if let Some(l) = self.cache.get(&item.index) {
            return Ok(l.clone());
        }
        let l = self.model.forward(inputs, &[], None)?.logits;
        self.cache.insert(item.index, l.clone());
        Ok(l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean cross-entropy over ground-truth response tokens.
    pub loss: f64,
    /// AUC of `P(YES)` at the decision position.
    pub auc: f64,
}

/// Single forward per sequence; no generation.
pub fn evaluate(model: &ToyModel, ds: &SynthDataset) -> Result<EvalMetrics> {
    ds.validate(model.config.vocab_size)?;
    let (loss, scores) = score(model, ds)?;
    Ok(EvalMetrics {
        loss,
        auc: auc(&scores, &ds.labels)?,
    })
}

/// Mean response cross-entropy and the decision-position `P(YES)` scores.
/// Labels are not consulted.
pub fn score(model: &ToyModel, ds: &SynthDataset) -> Result<(f64, Vec<f64>)> {
    if ds.is_empty() {
        return Err(invalid!("evaluation dataset is empty"));
    }
    let vocab = model.config.vocab_size;
    for (i, (seq, &pl)) in ds.sequences.iter().zip(&ds.prompt_lens).enumerate() {
        if pl == 0 || pl >= seq.len() || seq.iter().any(|&t| t >= vocab) {
            return Err(invalid!("sequence {i} has a bad prompt_len or out-of-vocabulary token"));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut scores = Vec::with_capacity(ds.len());
    for (seq, &pl) in ds.sequences.iter().zip(&ds.prompt_lens) {
        let logits = model.forward(&seq[..seq.len() - 1], &[], None)?.logits;
        for t in pl - 1..seq.len() - 1 {
            let z = logits.row(t);
            let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - z[seq[t + 1]];
            count += 1;
        }
        scores.push(p_yes(logits.row(pl - 1)));
    }
    Ok((total / count as f64, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    /// Observed share of on-policy items this epoch.
    pub on_policy_fraction: f64,
    pub steps: usize,
}

/// One pass over `train` in seeded random order, then evaluation on `val`.
#[allow(clippy::too_many_arguments)]
pub fn distill_epoch(
    student: &mut ToyModel,
    mut teacher: Option<&mut Teacher<'_>>,
    train: &SynthDataset,
    val: &SynthDataset,
    loss_cfg: &KDLossConfig,
    schedule: &SamplingSchedule,
    opt: &mut Sgd,
    stage: usize,
    epoch: usize,
) -> Result<EpochMetrics> {
    loss_cfg.validate()?;
    schedule.validate()?;
    if train.is_empty() {
        return Err(invalid!("training dataset is empty"));
    }
    if loss_cfg.needs_teacher() {
        let t = teacher.as_deref().ok_or_else(|| invalid!("kd_weight > 0 requires a teacher"))?;
        if t.model.config.vocab_size != student.config.vocab_size {
            return Err(invalid!(
                "teacher vocabulary {} differs from student vocabulary {}",
                t.model.config.vocab_size,
                student.config.vocab_size
            ));
        }
    }
    let seed = opt.cfg.seed;
    let bs = opt.cfg.batch_size;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng(derive_seed(seed, (stage * 100_000 + epoch) as u64)));

    let (mut loss_sum, mut n_items, mut n_on, mut steps) = (0.0, 0usize, 0usize, 0usize);
    for chunk in order.chunks(bs) {
        let batch_seed = derive_seed(seed ^ schedule.seed, opt.step as u64);
        let batch = build_batch_for(train, chunk, student, schedule, batch_seed)?;
        let mut grads = student.params.zeros_like();
        let mut batch_loss = 0.0;
        for item in &batch {
            let inputs = &item.tokens[..item.tokens.len() - 1];
            let (logits, trace) = student.forward_train(inputs)?;
            let t_logits = match (&mut teacher, loss_cfg.needs_teacher()) {
                (Some(t), true) => Some(t.logits(item)?),
                _ => None,
            };
            let l = masked_sequence_loss(t_logits.as_ref(), &logits, &item.labels, item.prompt_rows(), loss_cfg)?;
            let g = match student.backward_trace(&trace, &l.grad) {
                Err(crate::Error::Numeric(msg)) => return Err(opt.diverged(&msg)),
                other => other?,
            };
            grads.axpy(1.0 / batch.len() as f64, &g);
            batch_loss += l.loss / batch.len() as f64;
            n_on += usize::from(item.on_policy);
        }
        opt.apply(student, grads, batch_loss)?;
        loss_sum += batch_loss * batch.len() as f64;
        n_items += batch.len();
        steps += 1;
    }
    let eval = evaluate(student, val)?;
    Ok(EpochMetrics {
        stage,
        epoch,
        train_loss: loss_sum / n_items as f64,
        val_loss: eval.loss,
        val_auc: eval.auc,
        on_policy_fraction: n_on as f64 / n_items as f64,
        steps,
    })
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Best checkpoint (minimum validation loss) of the last stage that ran.
    pub model: ToyModel,
    pub best: EvalMetrics,
    /// `(stage, epoch)` of `model`; epoch 0 means the untrained input.
    pub best_at: (usize, usize),
    pub history: Vec<EpochMetrics>,
}

/// Trains for `tc.epochs` epochs, keeping the checkpoint with the lowest
/// validation loss (ties go to the earlier epoch).
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    student: ToyModel,
    teacher: Option<&ToyModel>,
    train: &SynthDataset,
    val: &SynthDataset,
    loss_cfg: &KDLossConfig,
    schedule: &SamplingSchedule,
    tc: &TrainConfig,
    stage: usize,
) -> Result<TrainResult> {
    let mut opt = Sgd::new(tc.clone(), tc.epochs * tc.steps_per_epoch(train.len()))?;
    let mut teacher = teacher.map(Teacher::new);
    let mut model = student;
    let mut best: Option<(ToyModel, EvalMetrics, usize)> = None;
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let m = distill_epoch(&mut model, teacher.as_mut(), train, val, loss_cfg, schedule, &mut opt, stage, epoch)?;
        if best.as_ref().is_none_or(|(_, b, _)| m.val_loss < b.loss) {
            let ev = EvalMetrics {
                loss: m.val_loss,
                auc: m.val_auc,
            };
            best = Some((model.clone(), ev, epoch));
        }
        history.push(m);
    }
    let (model, best, epoch) = match best {
        Some(b) => b,
        None => {
            let ev = evaluate(&model, val)?;
            (model, ev, 0)
        }
    };
    Ok(TrainResult {
        model,
        best,
        best_at: (stage, epoch),
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub loss: KDLossConfig,
    pub schedule: SamplingSchedule,
    pub train: TrainConfig,
}

/// Word-level stage 1 (`on_policy_fraction = 0`) followed by an on-policy
/// stage 2 that starts from the best stage-1 checkpoint. The result is the
/// best stage-2 checkpoint, or the stage-1 result when stage 2 has no epochs.
pub fn two_stage_train(
    student: ToyModel,
    teacher: Option<&ToyModel>,
    train: &SynthDataset,
    val: &SynthDataset,
    stage1: &StageSpec,
    stage2: &StageSpec,
) -> Result<TrainResult> {
    if stage1.schedule.on_policy_fraction != 0.0 {
        return Err(invalid!("stage 1 must be word-level (on_policy_fraction = 0)"));
    }
    if !(stage2.schedule.on_policy_fraction > 0.0) {
        return Err(invalid!("stage 2 needs on_policy_fraction > 0"));
    }
    for s in [stage1, stage2] {
        s.loss.validate()?;
        s.schedule.validate()?;
        s.train.validate()?;
    }
    let first = train_stage(student, teacher, train, val, &stage1.loss, &stage1.schedule, &stage1.train, 1)?;
    if stage2.train.epochs == 0 {
        return Ok(first);
    }
    let mut second = train_stage(first.model, teacher, train, val, &stage2.loss, &stage2.schedule, &stage2.train, 2)?;
    let mut history = first.history;
    history.append(&mut second.history);
    second.history = history;
    Ok(second)
}
