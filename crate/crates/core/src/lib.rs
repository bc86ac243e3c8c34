//! Desk-scale model compression: knowledge distillation, structured pruning
//! and post-training quantization of a toy decoder-only transformer, all
//! built around the layerwise reconstruction objective `‖XW − XŴ‖²_F`.

pub mod distill;
pub mod error;
pub mod matcal;
pub mod prune;
pub mod quant;
pub mod random;
pub mod slmctl;
pub mod toylm;

pub use error::{Error, Result};
