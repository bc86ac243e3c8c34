use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::random::rng;
use crate::toylm::{SynthDataset, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSchedule {
    /// Probability that a sequence's response is regenerated by the student.
    pub on_policy_fraction: f64,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        Self::off_policy()
    }
}

impl SamplingSchedule {
    pub fn off_policy() -> Self {
        Self {
            on_policy_fraction: 0.0,
            max_new_tokens: 4,
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn on_policy(fraction: f64) -> Self {
        Self {
            on_policy_fraction: fraction,
            ..Self::off_policy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.on_policy_fraction) {
            return Err(invalid!("on_policy_fraction must be in [0, 1], got {}", self.on_policy_fraction));
        }
        if self.max_new_tokens == 0 {
            return Err(invalid!("max_new_tokens must be >= 1"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid!("sampling temperature must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    /// Index into the source dataset.
    pub index: usize,
    /// Prompt followed by the (ground-truth or generated) response.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// Cross-entropy targets for logits rows `0..tokens.len()-1`. Rows after
    /// a generated token that departs from the ground truth have none.
    pub labels: Vec<Option<usize>>,
    pub on_policy: bool,
    pub label: bool,
}

impl BatchItem {
    fn ground_truth(ds: &SynthDataset, index: usize) -> Self {
        let seq = &ds.sequences[index];
        Self {
            index,
            tokens: seq.clone(),
            prompt_len: ds.prompt_lens[index],
            labels: seq[1..].iter().copied().map(Some).collect(),
            on_policy: false,
            label: ds.labels[index],
        }
    }

    /// Logits rows that belong to the prompt (they predict prompt tokens).
    pub fn prompt_rows(&self) -> usize {
        self.prompt_len - 1
    }
}

/// One batch over the whole dataset. See [`build_batch_for`].
pub fn build_batch(ds: &SynthDataset, student: &ToyModel, schedule: &SamplingSchedule, seed: u64) -> Result<Vec<BatchItem>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    build_batch_for(ds, &idx, student, schedule, seed)
}

/// Each listed sequence keeps its ground-truth response, or with probability
/// `on_policy_fraction` has it replaced by a student generation from the
/// prompt. One coin and one generation seed are drawn per item from `seed`.
pub fn build_batch_for(
    ds: &SynthDataset,
    indices: &[usize],
    student: &ToyModel,
    schedule: &SamplingSchedule,
    seed: u64,
) -> Result<Vec<BatchItem>> {
    schedule.validate()?;
    if ds.is_empty() || indices.is_empty() {
        return Err(invalid!("cannot build a batch from an empty dataset"));
    }
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= ds.len() {
            return Err(invalid!("batch index {i} out of range for {} sequences", ds.len()));
        }
        let coin: f64 = r.gen();
        let gen_seed: u64 = r.gen();
        let mut item = BatchItem::ground_truth(ds, i);
        if coin < schedule.on_policy_fraction {
            let prompt = &ds.sequences[i][..item.prompt_len];
            let g = student.generate(prompt, schedule.temperature, schedule.max_new_tokens, gen_seed)?;
            if !g.tokens.is_empty() {
                item = on_policy_item(ds, i, g.tokens);
            }
        }
        out.push(item);
    }
    Ok(out)
}

fn on_policy_item(ds: &SynthDataset, index: usize, generated: Vec<usize>) -> BatchItem {
    let truth = &ds.sequences[index];
    let pl = ds.prompt_lens[index];
    let mut tokens = truth[..pl].to_vec();
    tokens.extend(generated);
    let mut labels = Vec::with_capacity(tokens.len() - 1);
    let mut on_track = true;
    for t in 0..tokens.len() - 1 {
        // a row has a target while its whole prefix matches the ground truth
        if t >= pl && tokens.get(t) != truth.get(t) {
            on_track = false;
        }
        labels.push(if on_track { truth.get(t + 1).copied() } else { None });
    }
    BatchItem {
        index,
        tokens,
        prompt_len: pl,
        labels,
        on_policy: true,
        label: ds.labels[index],
    }
}
