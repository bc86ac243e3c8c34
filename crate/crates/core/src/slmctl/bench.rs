//! Prefill/decode latency harness over shared-prefix prompt sets.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::random::rng;
use crate::toylm::{argmax, KVCache, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub context_len: usize,
    pub k_candidates: usize,
    pub hot: bool,
    /// Timed repetitions; one extra warmup round is discarded.
    pub repeats: usize,
    /// Share of each prompt taken by the common prefix.
    pub prefix_frac: f64,
    pub decode_tokens: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            context_len: 256,
            k_candidates: 4,
            hot: true,
            repeats: 5,
            prefix_frac: 0.9,
            decode_tokens: 8,
            seed: 21,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        if self.context_len < 2 || self.context_len > model.config.max_seq_len {
            return Err(invalid!(
                "context_len {} must be in 2..={}",
                self.context_len,
                model.config.max_seq_len
            ));
        }
        if self.k_candidates == 0 || self.repeats == 0 {
            return Err(invalid!("k_candidates and repeats must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.prefix_frac) {
            return Err(invalid!("prefix_frac must be in [0, 1)"));
        }
        if self.context_len + self.decode_tokens > model.config.max_seq_len {
            return Err(invalid!("context_len + decode_tokens exceeds max_seq_len"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTiming {
    pub prompt: usize,
    /// Served from the cached shared prefix.
    pub hot: bool,
    /// Median time to first token over the repeats.
    pub ttft_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySplit {
    pub attention_ms: f64,
    pub mlp_ms: f64,
    pub other_ms: f64,
    /// Wall time of the instrumented forward, measured independently.
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub context_len: usize,
    pub k_candidates: usize,
    pub hot: bool,
    pub p50_ttft_ms: f64,
    pub p99_ttft_ms: f64,
    pub tpot_ms: f64,
    /// Full-prompt prefill split from the repeat with the median total.
    pub split: LatencySplit,
    pub entries: Vec<PromptTiming>,
}

impl BenchReport {
    /// Mean TTFT over prompts `2..=k`.
    pub fn mean_followup_ttft_ms(&self) -> Option<f64> {
        let rest = &self.entries[1..];
        (!rest.is_empty()).then(|| rest.iter().map(|e| e.ttft_ms).sum::<f64>() / rest.len() as f64)
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Nearest-rank percentile of a sorted sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `k` prompts of `context_len` tokens sharing their first
/// `prefix_frac · context_len` tokens.
pub fn shared_prefix_prompts(model: &ToyModel, cfg: &BenchConfig) -> (usize, Vec<Vec<usize>>) {
    let mut r = rng(cfg.seed);
    let vocab = model.config.vocab_size;
    let prefix_len = ((cfg.prefix_frac * cfg.context_len as f64).round() as usize).min(cfg.context_len - 1);
    let prefix: Vec<usize> = (0..prefix_len).map(|_| r.gen_range(0..vocab)).collect();
    let prompts = (0..cfg.k_candidates)
        .map(|_| {
            let mut p = prefix.clone();
            p.extend((prefix_len..cfg.context_len).map(|_| r.gen_range(0..vocab)));
            p
        })
        .collect();
    (prefix_len, prompts)
}

pub fn bench(model: &ToyModel, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate(model)?;
    let (prefix_len, prompts) = shared_prefix_prompts(model, cfg);
    let k = prompts.len();
    let mut per_prompt: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.repeats); k];
    let mut tpot = Vec::with_capacity(cfg.repeats);
    let mut splits: Vec<LatencySplit> = Vec::with_capacity(cfg.repeats);

    for round in 0..=cfg.repeats {
        let timed = round > 0;
        let mut prefix_cache: Option<KVCache> = None;
        let mut last_cache = None;
        for (i, prompt) in prompts.iter().enumerate() {
            let last = i + 1 == k;
            let start = Instant::now();
            let (logits, mut cache) = match prefix_cache.take() {
                Some(mut c) if cfg.hot => {
                    let out = model.forward(&prompt[prefix_len..], &[], Some(&mut c))?;
                    (out.logits, c)
                }
                _ => {
                    let mut c = KVCache::new(model);
                    let out = model.forward(prompt, &[], Some(&mut c))?;
                    (out.logits, c)
                }
            };
            let first = argmax(logits.row(logits.rows() - 1));
            let elapsed = start.elapsed();
            if timed {
                per_prompt[i].push(ms(elapsed));
            }
            // cache bookkeeping stays outside the timed region
            if last {
                last_cache = Some((cache.clone(), first));
            }
            if cfg.hot {
                cache.truncate(prefix_len);
                prefix_cache = Some(cache);
            }
        }
        // decode from the last prompt
        let (mut cache, mut tok) = last_cache.expect("k >= 1");
        let start = Instant::now();
        for _ in 0..cfg.decode_tokens {
            let out = model.forward(&[tok], &[], Some(&mut cache))?;
            tok = argmax(out.logits.row(0));
        }
        if timed && cfg.decode_tokens > 0 {
            tpot.push(ms(start.elapsed()) / cfg.decode_tokens as f64);
        }
        let start = Instant::now();
        let out = model.forward_timed(&prompts[0], None)?;
        let total = start.elapsed();
        if timed {
            let t = out.timings.expect("timed forward records a split");
            splits.push(LatencySplit {
                attention_ms: ms(t.attention),
                mlp_ms: ms(t.mlp),
                other_ms: ms(t.other),
                total_ms: ms(total),
            });
        }
    }

    let mut all: Vec<f64> = per_prompt.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let entries = per_prompt
        .iter_mut()
        .enumerate()
        .map(|(i, v)| PromptTiming {
            prompt: i,
            hot: cfg.hot && i > 0,
            ttft_ms: median(v),
        })
        .collect();
    Ok(BenchReport {
        context_len: cfg.context_len,
        k_candidates: k,
        hot: cfg.hot,
        p50_ttft_ms: percentile(&all, 50.0),
        p99_ttft_ms: percentile(&all, 99.0),
        tpot_ms: if tpot.is_empty() { 0.0 } else { median(&mut tpot) },
        split: {
            // components of the run with the median total, so they stay consistent
            splits.sort_by(|a, b| a.total_ms.total_cmp(&b.total_ms));
            splits[(splits.len() - 1) / 2]
        },
        entries,
    })
}
