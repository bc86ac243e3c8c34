use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matcal::DenseMatrix;
use crate::random::{gaussian_matrix, rng};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const YES: usize = 2;
pub const NO: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_intermediate: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Compact default used throughout the experiments.
    pub fn toy(vocab_size: usize, d_model: usize) -> Self {
        let n_heads = 4;
        Self {
            vocab_size,
            d_model,
            n_layers: 2,
            n_heads,
            head_dim: d_model / n_heads,
            d_intermediate: 4 * d_model,
            max_seq_len: 32,
            norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(invalid!(
                "vocab_size {} too small: YES, NO, PAD and EOS need ids",
                self.vocab_size
            ));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(invalid!(
                "n_heads ({}) x head_dim ({}) must equal d_model ({})",
                self.n_heads,
                self.head_dim,
                self.d_model
            ));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.d_intermediate == 0 || self.max_seq_len == 0 {
            return Err(invalid!("model dimensions must be positive"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(invalid!("norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Live shape of one block; differs from the config after pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_heads: usize,
    pub d_intermediate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: DenseMatrix,
    pub attn_q: DenseMatrix,
    pub attn_k: DenseMatrix,
    pub attn_v: DenseMatrix,
    pub attn_o: DenseMatrix,
    pub mlp_norm: DenseMatrix,
    pub mlp_gate: DenseMatrix,
    pub mlp_up: DenseMatrix,
    pub mlp_down: DenseMatrix,
}

impl Block {
    fn tensors(&self) -> [(&'static str, &DenseMatrix); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("attn_q", &self.attn_q),
            ("attn_k", &self.attn_k),
            ("attn_v", &self.attn_v),
            ("attn_o", &self.attn_o),
            ("mlp_norm", &self.mlp_norm),
            ("mlp_gate", &self.mlp_gate),
            ("mlp_up", &self.mlp_up),
            ("mlp_down", &self.mlp_down),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut DenseMatrix); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("attn_q", &mut self.attn_q),
            ("attn_k", &mut self.attn_k),
            ("attn_v", &mut self.attn_v),
            ("attn_o", &mut self.attn_o),
            ("mlp_norm", &mut self.mlp_norm),
            ("mlp_gate", &mut self.mlp_gate),
            ("mlp_up", &mut self.mlp_up),
            ("mlp_down", &mut self.mlp_down),
        ]
    }
}

/// Every trainable tensor of the model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub token_embedding: DenseMatrix,
    pub positional_embedding: DenseMatrix,
    pub layers: Vec<Block>,
    pub final_norm: DenseMatrix,
    pub unembedding: DenseMatrix,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, t| t.fill(0.0));
        out
    }

    /// `(name, tensor)` pairs in a fixed canonical order.
    pub fn named(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("positional_embedding".to_string(), &self.positional_embedding),
        ];
        for (i, b) in self.layers.iter().enumerate() {
            for (n, t) in b.tensors() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut DenseMatrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("positional_embedding".to_string(), &mut self.positional_embedding),
        ];
        for (i, b) in self.layers.iter_mut().enumerate() {
            for (n, t) in b.tensors_mut() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("unembedding".to_string(), &mut self.unembedding));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut DenseMatrix)) {
        for (name, t) in self.named_mut() {
            f(&name, t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        let others = other.named();
        for ((_, t), (_, o)) in self.named_mut().into_iter().zip(others) {
            t.axpy(alpha, o);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|_, t| t.scale_in_place(s));
    }

    pub fn norm_sq(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.frobenius_sq()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.rows() * t.cols()).sum()
    }
}

/// Fake-quantization applied to the inputs of every projection at forward
/// time. Used to simulate W8A8 serving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ActivationQuant {
    #[default]
    None,
    /// Symmetric 8-bit with a dynamic absmax scale per token row.
    Int8PerToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: Params,
    pub act_quant: ActivationQuant,
}

impl ToyModel {
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let c = config.clone();
        let hh = c.n_heads * c.head_dim;
        let residual_scale = 1.0 / (2.0 * c.n_layers as f64).sqrt();
        let token_embedding = gaussian_matrix(&mut r, c.vocab_size, c.d_model, 1.0);
        let positional_embedding = gaussian_matrix(&mut r, c.max_seq_len, c.d_model, 0.3);
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            let in_std = 1.0 / (c.d_model as f64).sqrt();
            layers.push(Block {
                attn_norm: ones_row(c.d_model),
                attn_q: gaussian_matrix(&mut r, c.d_model, hh, in_std),
                attn_k: gaussian_matrix(&mut r, c.d_model, hh, in_std),
                attn_v: gaussian_matrix(&mut r, c.d_model, hh, in_std),
                attn_o: gaussian_matrix(&mut r, hh, c.d_model, residual_scale / (hh as f64).sqrt()),
                mlp_norm: ones_row(c.d_model),
                mlp_gate: gaussian_matrix(&mut r, c.d_model, c.d_intermediate, in_std),
                mlp_up: gaussian_matrix(&mut r, c.d_model, c.d_intermediate, in_std),
                mlp_down: gaussian_matrix(
                    &mut r,
                    c.d_intermediate,
                    c.d_model,
                    residual_scale / (c.d_intermediate as f64).sqrt(),
                ),
            });
        }
        let unembedding = gaussian_matrix(&mut r, c.d_model, c.vocab_size, 1.0 / (c.d_model as f64).sqrt());
        let d_model = c.d_model;
        Ok(Self {
            config: c,
            params: Params {
                token_embedding,
                positional_embedding,
                layers,
                final_norm: ones_row(d_model),
                unembedding,
            },
            act_quant: ActivationQuant::None,
        })
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        self.params
            .layers
            .iter()
            .map(|b| LayerShape {
                n_heads: b.attn_q.cols() / self.config.head_dim,
                d_intermediate: b.mlp_gate.cols(),
            })
            .collect()
    }

    /// Expected shape of every named tensor, derived from the config and the
    /// per-layer shape table.
    pub fn expected_shapes(config: &ModelConfig, shapes: &[LayerShape]) -> Vec<(String, (usize, usize))> {
        let d = config.d_model;
        let mut out = vec![
            ("token_embedding".to_string(), (config.vocab_size, d)),
            ("positional_embedding".to_string(), (config.max_seq_len, d)),
        ];
        for (i, s) in shapes.iter().enumerate() {
            let hh = s.n_heads * config.head_dim;
            let inter = s.d_intermediate;
            for (n, shape) in [
                ("attn_norm", (1, d)),
                ("attn_q", (d, hh)),
                ("attn_k", (d, hh)),
                ("attn_v", (d, hh)),
                ("attn_o", (hh, d)),
                ("mlp_norm", (1, d)),
                ("mlp_gate", (d, inter)),
                ("mlp_up", (d, inter)),
                ("mlp_down", (inter, d)),
            ] {
                out.push((format!("layers.{i}.{n}"), shape));
            }
        }
        out.push(("final_norm".to_string(), (1, d)));
        out.push(("unembedding".to_string(), (d, config.vocab_size)));
        out
    }

    /// Checks every tensor against the shape table and for finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.params.layers.len() != self.config.n_layers {
            return Err(invalid!(
                "model has {} layers, config says {}",
                self.params.layers.len(),
                self.config.n_layers
            ));
        }
        let expected = Self::expected_shapes(&self.config, &self.layer_shapes());
        for ((name, t), (_, shape)) in self.params.named().into_iter().zip(expected) {
            if t.shape() != shape {
                return Err(invalid!(
                    "tensor {name} is {}x{}, expected {}x{}",
                    t.rows(),
                    t.cols(),
                    shape.0,
                    shape.1
                ));
            }
            if !t.is_finite() {
                return Err(invalid!("tensor {name} has non-finite entries"));
            }
        }
        for (i, b) in self.params.layers.iter().enumerate() {
            let s = self.layer_shapes()[i];
            if b.attn_q.cols() % self.config.head_dim != 0 || s.n_heads == 0 {
                return Err(invalid!("layer {i} has a partial or empty head set"));
            }
        }
        Ok(())
    }

    pub fn count_params(&self) -> usize {
        self.params.n_params()
    }

    /// Multiply-add FLOPs (2 per MAC) of an uncached prefill of `seq_len`
    /// tokens. Causal attention counts `P = T(T+1)/2` query/key pairs, each
    /// costing `2·hd` for the score and `2·hd` for the value mix per head.
    /// Norms, softmax and activations are not counted.
    pub fn flops_prefill(&self, seq_len: usize) -> u64 {
        let t = seq_len as u64;
        let d = self.config.d_model as u64;
        let pairs = t * (t + 1) / 2;
        let mut total = 0u64;
        for s in self.layer_shapes() {
            let hh = (s.n_heads * self.config.head_dim) as u64;
            let inter = s.d_intermediate as u64;
            total += 2 * t * d * 3 * hh;
            total += 2 * pairs * hh * 2;
            total += 2 * t * hh * d;
            total += 2 * t * d * inter * 3;
        }
        total += 2 * t * d * self.config.vocab_size as u64;
        total
    }

    /// A model of the same architecture whose tensors are drawn around this
    /// one, useful for perturbation tests.
    pub fn perturbed<R: Rng>(&self, rng: &mut R, std: f64) -> Self {
        let mut out = self.clone();
        out.params.for_each_mut(|_, t| {
            for v in t.data_mut() {
                *v += std * crate::random::normal(rng);
            }
        });
        out
    }
}

fn ones_row(n: usize) -> DenseMatrix {
    DenseMatrix::from_fn(1, n, |_, _| 1.0)
}
