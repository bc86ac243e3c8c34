use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::matcal::DenseMatrix;

use super::divergence::{raw_divergence, raw_grad, Divergence, DEFAULT_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KDLossConfig {
    pub divergence: Divergence,
    pub kd_weight: f64,
    pub ce_weight: f64,
    /// Share of the total given to prompt positions.
    pub prompt_weight: f64,
    /// Softmax temperature of the divergence term; cross-entropy always uses 1.
    pub temperature: f64,
    pub epsilon_floor: f64,
}

impl Default for KDLossConfig {
    fn default() -> Self {
        Self {
            divergence: Divergence::Fkl,
            kd_weight: 0.9,
            ce_weight: 0.1,
            prompt_weight: 0.05,
            temperature: 1.0,
            epsilon_floor: DEFAULT_FLOOR,
        }
    }
}

impl KDLossConfig {
    /// Cross-entropy only on response tokens: the SFT baseline.
    pub fn sft() -> Self {
        Self {
            kd_weight: 0.0,
            ce_weight: 1.0,
            prompt_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn with_divergence(divergence: Divergence) -> Self {
        Self {
            divergence,
            ..Self::default()
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.kd_weight > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.divergence.validate()?;
        if !(self.kd_weight >= 0.0 && self.ce_weight >= 0.0) || (self.kd_weight + self.ce_weight - 1.0).abs() > 1e-12 {
            return Err(invalid!(
                "kd_weight ({}) and ce_weight ({}) must be non-negative and sum to 1",
                self.kd_weight,
                self.ce_weight
            ));
        }
        if !(0.0..=1.0).contains(&self.prompt_weight) {
            return Err(invalid!("prompt_weight must be in [0, 1], got {}", self.prompt_weight));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid!("temperature must be positive"));
        }
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor < 1e-3) {
            return Err(invalid!("epsilon_floor must be in (0, 1e-3)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLoss {
    pub loss: f64,
    /// `∂loss/∂student_logits`.
    pub grad: DenseMatrix,
    /// Set when a prompt term was requested but there are no prompt rows;
    /// the total is then the response loss alone.
    pub prompt_term_missing: bool,
}

/// Mixed distillation loss over one sequence.
///
/// Row `t` of the logits predicts `labels[t]`; rows `0..prompt_len` are
/// prompt rows and the rest are response rows. Each row contributes
/// `kd_weight·D(p_t‖q_t) + ce_weight·CE(q_t, label_t)`; the response rows
/// are averaged and weighted `1 − prompt_weight`, the prompt rows averaged
/// and weighted `prompt_weight`.
pub fn kd_sequence_loss(
    teacher_logits: &DenseMatrix,
    student_logits: &DenseMatrix,
    labels: &[usize],
    prompt_len: usize,
    cfg: &KDLossConfig,
) -> Result<SequenceLoss> {
    let labels: Vec<Option<usize>> = labels.iter().copied().map(Some).collect();
    masked_sequence_loss(Some(teacher_logits), student_logits, &labels, prompt_len, cfg)
}

/// [`kd_sequence_loss`] with optional labels: rows labelled `None` carry
/// only the divergence term. A missing teacher is allowed when
/// `kd_weight = 0`.
pub fn masked_sequence_loss(
    teacher_logits: Option<&DenseMatrix>,
    student_logits: &DenseMatrix,
    labels: &[Option<usize>],
    prompt_len: usize,
    cfg: &KDLossConfig,
) -> Result<SequenceLoss> {
    cfg.validate()?;
    let (t_len, vocab) = student_logits.shape();
    if let Some(t) = teacher_logits {
        if t.shape() != (t_len, vocab) {
            return Err(shape_err!(
                "teacher logits {}x{} vs student {}x{}",
                t.rows(),
                t.cols(),
                t_len,
                vocab
            ));
        }
    } else if cfg.needs_teacher() {
        return Err(invalid!("kd_weight > 0 requires teacher logits"));
    }
    if labels.len() != t_len {
        return Err(shape_err!("{} labels for {t_len} rows", labels.len()));
    }
    if prompt_len >= t_len {
        return Err(invalid!("prompt_len {prompt_len} leaves no response rows out of {t_len}"));
    }
    if let Some(bad) = labels.iter().flatten().find(|&&l| l >= vocab) {
        return Err(invalid!("label {bad} outside vocabulary {vocab}"));
    }
    let n_resp = (t_len - prompt_len) as f64;
    let missing = prompt_len == 0 && cfg.prompt_weight > 0.0;
    let (resp_w, prompt_w) = if prompt_len == 0 {
        (1.0 / n_resp, 0.0)
    } else {
        ((1.0 - cfg.prompt_weight) / n_resp, cfg.prompt_weight / prompt_len as f64)
    };

    let tau = cfg.temperature;
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(t_len, vocab);
    for t in 0..t_len {
        let w = if t < prompt_len { prompt_w } else { resp_w };
        if w == 0.0 {
            continue;
        }
        let z = student_logits.row(t);
        let g = grad.row_mut(t);
        if cfg.kd_weight > 0.0 {
            let teacher = teacher_logits.expect("checked above").row(t);
            let p = softmax(teacher, tau);
            let q = softmax(z, tau);
            loss += w * cfg.kd_weight * raw_divergence(cfg.divergence, &p, &q, cfg.epsilon_floor);
            let dz = raw_grad(cfg.divergence, &p, &q, cfg.epsilon_floor);
            for (gi, di) in g.iter_mut().zip(dz) {
                *gi += w * cfg.kd_weight * di / tau;
            }
        }
        if let (Some(label), true) = (labels[t], cfg.ce_weight > 0.0) {
            let q = softmax(z, 1.0);
            let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += w * cfg.ce_weight * (lse - z[label]);
            for (i, (gi, qi)) in g.iter_mut().zip(q).enumerate() {
                *gi += w * cfg.ce_weight * (qi - f64::from(u8::from(i == label)));
            }
        }
    }
    Ok(SequenceLoss {
        loss,
        grad,
        prompt_term_missing: missing,
    })
}

pub(crate) fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out: Vec<f64> = z.iter().map(|v| ((v - max) / tau).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}
