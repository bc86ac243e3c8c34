//! Synthetic recommendation task.
//!
//! Each sequence is
//! `BOS, descriptor × C, (item, YES|NO) × H, SEP, candidate, YES|NO, EOS`.
//! A hidden per-user preference vector over item categories plus a per-item
//! bias decide every interaction: `label = [pref[cat(i)] + bias(i) + noise > τ]`
//! with `τ` set from the requested class balance. Descriptor tokens reveal the
//! sign of each category preference. Everything up to and including the
//! candidate item is the prompt; the decision token and EOS are the response.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Result};
use crate::random::{normal, rng};

use super::model::{EOS, NO, YES};

pub const BOS: usize = 4;
pub const SEP: usize = 5;
pub const FIRST_DESCRIPTOR: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    #[default]
    InDomain,
    /// Different item popularity, uninformative descriptors and a preference
    /// model keyed on item parity instead of category.
    OffDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub n_categories: usize,
    pub n_items: usize,
    pub history_len: usize,
    pub balance: f64,
    pub label_noise: f64,
    pub item_bias_std: f64,
    /// Seeds item categories and biases; shared by train and validation data.
    pub world_seed: u64,
    pub domain: Domain,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_categories: 4,
            n_items: 50,
            history_len: 6,
            balance: 0.5,
            label_noise: 0.3,
            item_bias_std: 0.5,
            world_seed: 1_000,
            domain: Domain::InDomain,
        }
    }
}

impl SynthConfig {
    pub fn first_item(&self) -> usize {
        FIRST_DESCRIPTOR + 2 * self.n_categories
    }

    pub fn seq_len(&self) -> usize {
        1 + self.n_categories + 2 * self.history_len + 2 + 2
    }

    pub fn prompt_len(&self) -> usize {
        self.seq_len() - 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 || self.n_items == 0 {
            return Err(invalid!("synth needs at least one category and one item"));
        }
        if self.first_item() + self.n_items > self.vocab_size {
            return Err(invalid!(
                "vocab_size {} too small for {} categories and {} items (needs {})",
                self.vocab_size,
                self.n_categories,
                self.n_items,
                self.first_item() + self.n_items
            ));
        }
        if !(self.balance > 0.0 && self.balance < 1.0) {
            return Err(invalid!("balance must be in (0, 1), got {}", self.balance));
        }
        if !(self.label_noise > 0.0) || !(self.item_bias_std >= 0.0) {
            return Err(invalid!("label_noise must be positive and item_bias_std non-negative"));
        }
        Ok(())
    }

    pub fn off_domain(&self) -> Self {
        Self {
            domain: Domain::OffDomain,
            world_seed: self.world_seed ^ 0x5eed_0ff0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthDataset {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<bool>,
    pub prompt_lens: Vec<usize>,
    /// Noise-free generator score of each candidate, empty for data read
    /// back from disk. Ranking by it is Bayes-optimal.
    pub latent_scores: Vec<f64>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l).count() as f64 / self.len().max(1) as f64
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            sequences: self.sequences[range.clone()].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            prompt_lens: self.prompt_lens[range.clone()].to_vec(),
            latent_scores: if self.latent_scores.is_empty() {
                Vec::new()
            } else {
                self.latent_scores[range].to_vec()
            },
        }
    }

    /// Checks token range and decision-token/label consistency.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.labels.len() != self.len() || self.prompt_lens.len() != self.len() {
            return Err(invalid!("dataset columns have different lengths"));
        }
        for (i, seq) in self.sequences.iter().enumerate() {
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab_size) {
                return Err(invalid!("sequence {i} has token {t} outside vocabulary {vocab_size}"));
            }
            let pl = self.prompt_lens[i];
            if pl == 0 || pl >= seq.len() {
                return Err(invalid!("sequence {i} has prompt_len {pl} but length {}", seq.len()));
            }
            let expected = if self.labels[i] { YES } else { NO };
            if seq[pl] != expected {
                return Err(invalid!("sequence {i}: decision token does not match label"));
            }
        }
        Ok(())
    }
}

struct World {
    category: Vec<usize>,
    bias: Vec<f64>,
    popularity: Vec<f64>,
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut r = rng(cfg.world_seed);
        let n = cfg.n_items;
        let category = (0..n).map(|i| i % cfg.n_categories).collect();
        let bias = (0..n).map(|_| cfg.item_bias_std * normal(&mut r)).collect();
        let popularity = match cfg.domain {
            Domain::InDomain => vec![1.0; n],
            Domain::OffDomain => {
                // Zipf-like popularity over a shuffled item order
                let mut order: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    order.swap(i, r.gen_range(0..=i));
                }
                let mut pop = vec![0.0; n];
                for (rank, &item) in order.iter().enumerate() {
                    pop[item] = 1.0 / (rank as f64 + 1.0).powf(1.5);
                }
                pop
            }
        };
        Self {
            category,
            bias,
            popularity,
        }
    }

    fn draw_item<R: Rng>(&self, r: &mut R) -> usize {
        let total: f64 = self.popularity.iter().sum();
        let mut u = r.gen::<f64>() * total;
        for (i, &p) in self.popularity.iter().enumerate() {
            if u < p {
                return i;
            }
            u -= p;
        }
        self.popularity.len() - 1
    }
}

/// Generates `n_users × items_per_user` labeled sequences.
pub fn synth_data(seed: u64, n_users: usize, items_per_user: usize, cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    if n_users == 0 || items_per_user == 0 {
        return Err(invalid!("n_users and items_per_user must be >= 1"));
    }
    let world = World::new(cfg);
    let n_pref = match cfg.domain {
        Domain::InDomain => cfg.n_categories,
        Domain::OffDomain => 2,
    };
    let sigma_total = (1.0 + cfg.item_bias_std.powi(2) + cfg.label_noise.powi(2)).sqrt();
    let tau = Normal::new(0.0, sigma_total)
        .expect("positive sigma")
        .inverse_cdf(1.0 - cfg.balance);
    let first_item = cfg.first_item();

    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut ds = SynthDataset::default();
    for _ in 0..n_users {
        let pref: Vec<f64> = (0..n_pref).map(|_| normal(&mut r)).collect();
        let pref_key = |item: usize| match cfg.domain {
            Domain::InDomain => world.category[item],
            Domain::OffDomain => item % 2,
        };
        let descriptors: Vec<usize> = (0..cfg.n_categories)
            .map(|c| {
                let positive = match cfg.domain {
                    Domain::InDomain => pref[c] > 0.0,
                    Domain::OffDomain => r.gen::<bool>(),
                };
                FIRST_DESCRIPTOR + 2 * c + usize::from(!positive)
            })
            .collect();
        for _ in 0..items_per_user {
            let interact = |r: &mut rand_chacha::ChaCha8Rng| {
                let item = world.draw_item(r);
                let score = pref[pref_key(item)] + world.bias[item];
                let label = score + cfg.label_noise * normal(r) > tau;
                (item, score, label)
            };
            let mut seq = Vec::with_capacity(cfg.seq_len());
            seq.push(BOS);
            seq.extend_from_slice(&descriptors);
            for _ in 0..cfg.history_len {
                let (item, _, label) = interact(&mut r);
                seq.push(first_item + item);
                seq.push(if label { YES } else { NO });
            }
            seq.push(SEP);
            let (item, score, label) = interact(&mut r);
            seq.push(first_item + item);
            let prompt_len = seq.len();
            seq.push(if label { YES } else { NO });
            seq.push(EOS);
            ds.sequences.push(seq);
            ds.labels.push(label);
            ds.prompt_lens.push(prompt_len);
            ds.latent_scores.push(score);
        }
    }
    Ok(ds)
}
