use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

pub const DEFAULT_FLOOR: f64 = 1e-12;

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// `softmax(logits / temperature)`. Entries of `-∞` get probability 0.
    pub fn from_logits(logits: &[f64], temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(invalid!("temperature must be positive, got {temperature}"));
        }
        if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(invalid!("logits must be finite or -inf"));
        }
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if max == f64::NEG_INFINITY {
            return Err(invalid!("all logits are -inf"));
        }
        Ok(Self {
            probs: softmax(logits, temperature, max),
        })
    }

    /// Validated probability vector (non-negative, sums to 1 within 1e-9).
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(invalid!("probabilities must be finite and non-negative"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(invalid!("probabilities sum to {s}"));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn softmax(logits: &[f64], temperature: f64, max: f64) -> Vec<f64> {
    let mut out: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Divergence from the teacher `p` to the student `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    /// `Σ p log(p/q)`
    Fkl,
    /// `Σ q log(q/p)`
    Rkl,
    /// `β·KL(p‖m) + (1−β)·KL(q‖m)` with `m = βp + (1−β)q`, `0 < β < 1`.
    Jsd(f64),
}

impl Divergence {
    pub fn validate(self) -> Result<()> {
        match self {
            Divergence::Jsd(b) if !(b > 0.0 && b < 1.0) => Err(invalid!("JSD beta must be in (0, 1), got {b}")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Divergence::Fkl => f.write_str("fkl"),
            Divergence::Rkl => f.write_str("rkl"),
            Divergence::Jsd(b) => write!(f, "jsd:{b}"),
        }
    }
}

impl FromStr for Divergence {
    type Err = Error;

    /// `fkl`, `rkl`, `jsd` (β = 0.5) or `jsd:<beta>`.
    fn from_str(s: &str) -> Result<Self> {
        let d = match s {
            "fkl" => Divergence::Fkl,
            "rkl" => Divergence::Rkl,
            "jsd" => Divergence::Jsd(0.5),
            _ => match s.strip_prefix("jsd:") {
                Some(b) => Divergence::Jsd(b.parse().map_err(|_| invalid!("bad JSD beta {b:?}"))?),
                None => return Err(invalid!("unknown divergence {s:?}")),
            },
        };
        d.validate()?;
        Ok(d)
    }
}

/// `Σ a log(a / max(b, floor))`, skipping `a = 0` terms.
fn kl(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(ai, _)| **ai > 0.0)
        .map(|(ai, bi)| ai * (ai.ln() - bi.max(floor).ln()))
        .sum()
}

pub fn divergence(kind: Divergence, p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    divergence_with_floor(kind, p, q, DEFAULT_FLOOR)
}

pub fn divergence_with_floor(kind: Divergence, p: &TokenDistribution, q: &TokenDistribution, floor: f64) -> Result<f64> {
    kind.validate()?;
    if p.len() != q.len() {
        return Err(shape_err!("vocabulary mismatch: {} vs {}", p.len(), q.len()));
    }
    Ok(raw_divergence(kind, p.probs(), q.probs(), floor))
}

pub(crate) fn raw_divergence(kind: Divergence, p: &[f64], q: &[f64], floor: f64) -> f64 {
    let v = match kind {
        Divergence::Fkl => kl(p, q, floor),
        Divergence::Rkl => kl(q, p, floor),
        Divergence::Jsd(beta) => {
            let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| beta * a + (1.0 - beta) * b).collect();
            beta * kl(p, &m, floor) + (1.0 - beta) * kl(q, &m, floor)
        }
    };
    v.max(0.0)
}

/// `∂D(p ‖ softmax(z)) / ∂z`.
pub fn divergence_grad(kind: Divergence, p: &TokenDistribution, student_logits: &[f64]) -> Result<Vec<f64>> {
    kind.validate()?;
    if p.len() != student_logits.len() {
        return Err(shape_err!("vocabulary mismatch: {} vs {}", p.len(), student_logits.len()));
    }
    let q = TokenDistribution::from_logits(student_logits, 1.0)?;
    Ok(raw_grad(kind, p.probs(), q.probs(), DEFAULT_FLOOR))
}

/// Gradient with respect to the logits of `q`, given `q` itself.
///
/// FKL is `q − p`. Otherwise `g = ∂D/∂q` is pushed through the softmax
/// Jacobian: `∂D/∂z_i = q_i (g_i − Σ_j q_j g_j)`. For RKL
/// `g_i = log q_i − log p_i` (+1, which cancels); for JSD
/// `g_i = (1−β) log(q_i / m_i)`.
pub(crate) fn raw_grad(kind: Divergence, p: &[f64], q: &[f64], floor: f64) -> Vec<f64> {
    let g: Vec<f64> = match kind {
        Divergence::Fkl => return q.iter().zip(p).map(|(a, b)| a - b).collect(),
        Divergence::Rkl => q
            .iter()
            .zip(p)
            .map(|(qi, pi)| if *qi > 0.0 { qi.ln() - pi.max(floor).ln() } else { 0.0 })
            .collect(),
        Divergence::Jsd(beta) => q
            .iter()
            .zip(p)
            .map(|(qi, pi)| {
                if *qi > 0.0 {
                    let m = beta * pi + (1.0 - beta) * qi;
                    (1.0 - beta) * (qi.ln() - m.max(floor).ln())
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let mean: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
    q.iter().zip(&g).map(|(qi, gi)| qi * (gi - mean)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::from_probs(p.to_vec()).unwrap()
    }

    #[test]
    fn closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((divergence(Divergence::Fkl, &dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap() - ln2).abs() < 1e-15);
        assert!((divergence(Divergence::Jsd(0.5), &dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap() - ln2).abs() < 1e-15);
        for k in [Divergence::Fkl, Divergence::Rkl, Divergence::Jsd(0.3)] {
            let p = dist(&[0.2, 0.5, 0.3]);
            assert!(divergence(k, &p, &p).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn fkl_grad_example() {
        let g = divergence_grad(Divergence::Fkl, &dist(&[1.0, 0.0]), &[0.0, 0.0]).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn softmax_construction_allows_exact_zeros() {
        let d = TokenDistribution::from_logits(&[0.0, f64::NEG_INFINITY], 1.0).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0]);
        assert!(TokenDistribution::from_logits(&[f64::NAN], 1.0).is_err());
        assert!(TokenDistribution::from_logits(&[1.0], 0.0).is_err());
    }

    #[test]
    fn parse_and_validate() {
        assert_eq!("fkl".parse::<Divergence>().unwrap(), Divergence::Fkl);
        assert_eq!("jsd:0.25".parse::<Divergence>().unwrap(), Divergence::Jsd(0.25));
        assert!("jsd:1".parse::<Divergence>().is_err());
        assert!("tvd".parse::<Divergence>().is_err());
        assert!(divergence(Divergence::Fkl, &dist(&[1.0]), &dist(&[0.5, 0.5])).is_err());
    }
}
