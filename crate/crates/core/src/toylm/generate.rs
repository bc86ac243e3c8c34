use rand::Rng;

use crate::error::{invalid, Result};
use crate::random::rng;

use super::forward::KVCache;
use super::model::{ToyModel, EOS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Newly generated tokens, excluding the prompt.
    pub tokens: Vec<usize>,
    /// Set when decoding stopped because the context window filled up.
    pub truncated: bool,
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `probs` with one uniform variate.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative total
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl ToyModel {
    /// Autoregressive decoding with an incremental KV cache.
    ///
    /// Temperature 0 is greedy argmax; otherwise tokens are sampled from
    /// `softmax(logits / temperature)`. Stops after EOS or `max_tokens`.
    pub fn generate(&self, prompt: &[usize], temperature: f64, max_tokens: usize, seed: u64) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(invalid!("prompt must be nonempty"));
        }
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(invalid!("temperature must be finite and >= 0, got {temperature}"));
        }
        let mut r = rng(seed);
        let mut cache = KVCache::new(self);
        let mut out = Vec::new();
        if max_tokens == 0 {
            return Ok(Generation { tokens: out, truncated: false });
        }
        if prompt.len() > self.config.max_seq_len {
            return Err(invalid!(
                "prompt of {} tokens exceeds max_seq_len {}",
                prompt.len(),
                self.config.max_seq_len
            ));
        }
        let mut logits = {
            let f = self.forward(prompt, &[], Some(&mut cache))?;
            f.logits.row(f.logits.rows() - 1).to_vec()
        };
        loop {
            let next = if temperature == 0.0 {
                argmax(&logits)
            } else {
                sample_index(&softmax_with_temperature(&logits, temperature), &mut r)
            };
            out.push(next);
            if next == EOS || out.len() >= max_tokens {
                return Ok(Generation { tokens: out, truncated: false });
            }
            if cache.len() >= self.config.max_seq_len {
                return Ok(Generation { tokens: out, truncated: true });
            }
            let f = self.forward(&[next], &[], Some(&mut cache))?;
            logits = f.logits.row(0).to_vec();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::ModelConfig;

    fn model() -> ToyModel {
        let cfg = ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            head_dim: 4,
            d_intermediate: 8,
            max_seq_len: 12,
            norm_eps: 1e-6,
        };
        ToyModel::new_random(cfg, 9).unwrap()
    }

    #[test]
    fn greedy_repeats_dominant_token() {
        let mut m = model();
        // every hidden state collapses to the all-ones vector; only column 3 reads it
        m.params.token_embedding.fill(1.0);
        m.params.positional_embedding.fill(0.0);
        for b in &mut m.params.layers {
            b.attn_o.fill(0.0);
            b.mlp_down.fill(0.0);
        }
        let un = &mut m.params.unembedding;
        un.fill(0.0);
        for r in 0..un.rows() {
            un.set(r, 3, 1.0);
        }
        let g = m.generate(&[4, 5], 0.0, 5, 0).unwrap();
        assert_eq!(g.tokens, vec![3; 5]);
        assert!(!g.truncated);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let m = model();
        let a = m.generate(&[4, 5, 2], 0.9, 6, 17).unwrap();
        let b = m.generate(&[4, 5, 2], 0.9, 6, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_overflow_truncates() {
        let mut m = model();
        m.params.unembedding.fill(0.0);
        let g = m.generate(&[4; 10], 0.0, 10, 0).unwrap();
        assert!(g.truncated);
        assert_eq!(g.tokens.len(), 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = model();
        assert!(m.generate(&[], 0.0, 3, 0).is_err());
        assert!(m.generate(&[1], -1.0, 3, 0).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
