//! Toy pre-norm decoder-only transformer with exact gradients.
//!
//! Blocks are `RMSNorm → causal multi-head attention → residual → RMSNorm →
//! gated MLP (SiLU(gate) ⊙ up → down) → residual`, with learned absolute
//! positional embeddings. All arithmetic is 64-bit.

mod auc;
mod calib;
mod forward;
mod generate;
mod model;
mod synth;

pub use auc::auc;
pub use forward::{BlockTimings, ForwardOutput, KVCache, Tap, Trace};
pub use generate::{argmax, sample_index, softmax_with_temperature, Generation};
pub use model::{ActivationQuant, Block, LayerShape, ModelConfig, Params, ToyModel, EOS, NO, PAD, YES};
pub use synth::{synth_data, Domain, SynthConfig, SynthDataset, BOS, FIRST_DESCRIPTOR, SEP};

/// `P(YES)` from a logits row, with softmax restricted to {YES, NO}.
pub fn p_yes(logits_row: &[f64]) -> f64 {
    let (y, n) = (logits_row[YES], logits_row[NO]);
    1.0 / (1.0 + (n - y).exp())
}
