//! Post-training weight quantization and its simulation on the toy model.

mod fp8;
mod grid;
mod smooth;
mod solvers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use fp8::{fp8_e4m3_decode, fp8_e4m3_encode, Fp8Value, FP8_MAX};
pub use grid::{fit_grid, rtn_quantize, Granularity, GridScheme, QuantGrid, QuantizedMatrix};
pub use smooth::smoothquant_scales;
pub use solvers::{gptq_quantize, quantease_sweep, QuantEaseResult};

use crate::error::{invalid, Error, Result};
use crate::matcal::{reconstruction_error, DenseMatrix, LayerCalibration, DEFAULT_LAMBDA_REL};
use crate::toylm::{ActivationQuant, Tap, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantScheme {
    #[serde(rename = "W4A16_RTN")]
    W4A16Rtn,
    #[serde(rename = "W4A16_GPTQ")]
    W4A16Gptq,
    #[serde(rename = "W4A16_QUANTEASE")]
    W4A16QuantEase,
    #[serde(rename = "W8A8_SMOOTH")]
    W8A8Smooth,
    #[serde(rename = "FP8")]
    Fp8,
}

impl QuantScheme {
    pub const ALL: [QuantScheme; 5] = [
        QuantScheme::W4A16Rtn,
        QuantScheme::W4A16Gptq,
        QuantScheme::W4A16QuantEase,
        QuantScheme::W8A8Smooth,
        QuantScheme::Fp8,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuantScheme::W4A16Rtn => "W4A16_RTN",
            QuantScheme::W4A16Gptq => "W4A16_GPTQ",
            QuantScheme::W4A16QuantEase => "W4A16_QUANTEASE",
            QuantScheme::W8A8Smooth => "W8A8_SMOOTH",
            QuantScheme::Fp8 => "FP8",
        }
    }

    pub fn needs_calibration(self) -> bool {
        matches!(
            self,
            QuantScheme::W4A16Gptq | QuantScheme::W4A16QuantEase | QuantScheme::W8A8Smooth
        )
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| invalid!("unknown quantization scheme {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub lambda_rel: f64,
    pub quantease_sweeps: usize,
    pub smooth_alpha: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            lambda_rel: DEFAULT_LAMBDA_REL,
            quantease_sweeps: 10,
            smooth_alpha: 0.5,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rel > 0.0 && self.lambda_rel.is_finite()) {
            return Err(invalid!("lambda_rel must be positive, got {}", self.lambda_rel));
        }
        if self.quantease_sweeps == 0 {
            return Err(invalid!("quantease_sweeps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.smooth_alpha) {
            return Err(invalid!("smooth_alpha must be in [0, 1], got {}", self.smooth_alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorQuantReport {
    pub tensor: String,
    /// Layerwise reconstruction error on the calibration inputs; absent when
    /// no calibration data was given.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub scheme: QuantScheme,
    pub activations: String,
    pub tensors: Vec<TensorQuantReport>,
    pub total_error: Option<f64>,
}

const PROJECTIONS: [&str; 7] = ["attn_q", "attn_k", "attn_v", "attn_o", "mlp_gate", "mlp_up", "mlp_down"];

fn tap_of(name: &str, layer: usize) -> Tap {
    match name {
        "attn_q" | "attn_k" | "attn_v" => Tap::AttnIn(layer),
        "attn_o" => Tap::AttnOut(layer),
        "mlp_gate" | "mlp_up" => Tap::MlpIn(layer),
        _ => Tap::MlpDown(layer),
    }
}

fn tap_slot(tap: Tap) -> usize {
    match tap {
        Tap::AttnIn(l) => 4 * l,
        Tap::AttnOut(l) => 4 * l + 1,
        Tap::MlpIn(l) => 4 * l + 2,
        Tap::MlpDown(l) => 4 * l + 3,
    }
}

fn all_taps(n_layers: usize) -> Vec<Tap> {
    (0..n_layers)
        .flat_map(|l| [Tap::AttnIn(l), Tap::AttnOut(l), Tap::MlpIn(l), Tap::MlpDown(l)])
        .collect()
}

/// Column-wise max |x| of every tap over the calibration set.
fn tap_absmax(model: &ToyModel, seqs: &[Vec<usize>], taps: &[Tap]) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); taps.len()];
    for seq in seqs {
        let fwd = model.forward(seq, taps, None)?;
        for (slot, &tap) in out.iter_mut().zip(taps) {
            let x = fwd.tap(tap).expect("requested tap is captured");
            if slot.is_empty() {
                *slot = vec![0.0; x.cols()];
            }
            for r in 0..x.rows() {
                for (m, v) in slot.iter_mut().zip(x.row(r)) {
                    *m = m.max(v.abs());
                }
            }
        }
    }
    Ok(out)
}

/// `diag(1/s) H diag(1/s)`: the Gram of inputs divided by `s`.
fn rescale_gram(calib: &LayerCalibration, s: &[f64]) -> Result<LayerCalibration> {
    let h = calib.gram();
    let g = DenseMatrix::from_fn(h.rows(), h.cols(), |i, j| h.get(i, j) / (s[i] * s[j]));
    LayerCalibration::from_gram(g, calib.n_tokens())
}

/// Simulated FP8 weights: a power-of-two tensor scale maps the largest
/// magnitude into the top binade, then every entry is rounded to e4m3.
fn fp8_weights(w: &DenseMatrix) -> DenseMatrix {
    let m = w.max_abs();
    if m == 0.0 {
        return w.clone();
    }
    let k = (FP8_MAX / m).log2().floor() as i32;
    let up = 2f64.powi(k);
    let down = 2f64.powi(-k);
    DenseMatrix::from_fn(w.rows(), w.cols(), |r, c| fp8_e4m3_decode(fp8_e4m3_encode(w.get(r, c) * up)) * down)
}

/// Replaces every attention and MLP projection by its quantized
/// simulation. Embeddings, norms and the unembedding are untouched, except
/// that W8A8 folds the smoothing scales into the RMSNorm gains.
pub fn quantize_model(
    model: &ToyModel,
    scheme: QuantScheme,
    calib_seqs: Option<&[Vec<usize>]>,
    cfg: &QuantConfig,
) -> Result<(ToyModel, QuantReport)> {
    model.validate()?;
    cfg.validate()?;
    let calib_seqs = calib_seqs.filter(|s| !s.is_empty());
    if scheme.needs_calibration() && calib_seqs.is_none() {
        return Err(invalid!("{scheme} needs calibration data"));
    }
    let n_layers = model.config.n_layers;
    let taps = all_taps(n_layers);
    let calibs = match calib_seqs {
        Some(seqs) => Some(model.calibrate(seqs, &taps)?),
        None => None,
    };
    let absmax = match (scheme, calib_seqs) {
        (QuantScheme::W8A8Smooth, Some(seqs)) => Some(tap_absmax(model, seqs, &taps)?),
        _ => None,
    };

    let mut out = model.clone();
    let mut tensors = Vec::new();
    for l in 0..n_layers {
        // W8A8: one migration vector per norm-fed input, shared by the
        // projections that read it
        let mut smoothing: Vec<(Tap, Vec<f64>)> = Vec::new();
        if let Some(absmax) = &absmax {
            let block = &mut out.params.layers[l];
            for (tap, names) in [
                (Tap::AttnIn(l), ["attn_q", "attn_k", "attn_v"].as_slice()),
                (Tap::MlpIn(l), ["mlp_gate", "mlp_up"].as_slice()),
            ] {
                let joined = names
                    .iter()
                    .map(|n| block_tensor(block, n).clone())
                    .reduce(|a, b| hstack(&a, &b))
                    .expect("non-empty group");
                let (s, _) = smoothquant_scales(&absmax[tap_slot(tap)], &joined, cfg.smooth_alpha)?;
                let norm = if matches!(tap, Tap::AttnIn(_)) {
                    &mut block.attn_norm
                } else {
                    &mut block.mlp_norm
                };
                for (g, sj) in norm.row_mut(0).iter_mut().zip(&s) {
                    *g /= sj;
                }
                smoothing.push((tap, s));
            }
        }
        for name in PROJECTIONS {
            let tap = tap_of(name, l);
            let block = &mut out.params.layers[l];
            let w = block_tensor(block, name).clone();
            let scales = smoothing.iter().find(|(t, _)| *t == tap).map(|(_, s)| s);
            let (w, calib) = match (scales, &calibs) {
                (Some(s), Some(c)) => {
                    let mut ws = w.clone();
                    for (j, sj) in s.iter().enumerate() {
                        ws.row_mut(j).iter_mut().for_each(|v| *v *= sj);
                    }
                    (ws, Some(rescale_gram(&c[tap_slot(tap)], s)?))
                }
                (None, Some(c)) => (w, Some(c[tap_slot(tap)].clone())),
                (_, None) => (w, None),
            };
            let w_hat = quantize_tensor(&w, calib.as_ref(), scheme, cfg)?;
            let error = match &calib {
                Some(c) => Some(reconstruction_error(c, &w, &w_hat)?),
                None => None,
            };
            *block_tensor_mut(block, name) = w_hat;
            tensors.push(TensorQuantReport {
                tensor: format!("layers.{l}.{name}"),
                error,
            });
        }
    }
    if scheme == QuantScheme::W8A8Smooth {
        out.act_quant = ActivationQuant::Int8PerToken;
    }
    out.validate()?;
    let total_error = tensors.iter().map(|t| t.error).sum::<Option<f64>>();
    let activations = match out.act_quant {
        ActivationQuant::None => "none",
        ActivationQuant::Int8PerToken => "int8 dynamic per-token",
    };
    Ok((
        out,
        QuantReport {
            scheme,
            activations: activations.to_string(),
            tensors,
            total_error,
        },
    ))
}

fn quantize_tensor(
    w: &DenseMatrix,
    calib: Option<&LayerCalibration>,
    scheme: QuantScheme,
    cfg: &QuantConfig,
) -> Result<DenseMatrix> {
    let need = || calib.ok_or_else(|| invalid!("{scheme} needs calibration data"));
    Ok(match scheme {
        QuantScheme::W4A16Rtn => {
            let grid = fit_grid(w, 4, GridScheme::Symmetric, Granularity::PerChannel)?;
            rtn_quantize(w, &grid)?.dequantize()
        }
        QuantScheme::W4A16Gptq => {
            let grid = fit_grid(w, 4, GridScheme::Symmetric, Granularity::PerChannel)?;
            gptq_quantize(w, need()?, &grid, cfg.lambda_rel)?.dequantize()
        }
        QuantScheme::W4A16QuantEase => {
            let grid = fit_grid(w, 4, GridScheme::Symmetric, Granularity::PerChannel)?;
            let calib = need()?;
            let start = gptq_quantize(w, calib, &grid, cfg.lambda_rel)?;
            quantease_sweep(w, &start, calib, &grid, cfg.quantease_sweeps)?
                .quantized
                .dequantize()
        }
        QuantScheme::W8A8Smooth => {
            let grid = fit_grid(w, 8, GridScheme::Symmetric, Granularity::PerChannel)?;
            rtn_quantize(w, &grid)?.dequantize()
        }
        QuantScheme::Fp8 => fp8_weights(w),
    })
}

fn block_tensor<'a>(block: &'a crate::toylm::Block, name: &str) -> &'a DenseMatrix {
    match name {
        "attn_q" => &block.attn_q,
        "attn_k" => &block.attn_k,
        "attn_v" => &block.attn_v,
        "attn_o" => &block.attn_o,
        "mlp_gate" => &block.mlp_gate,
        "mlp_up" => &block.mlp_up,
        _ => &block.mlp_down,
    }
}

fn block_tensor_mut<'a>(block: &'a mut crate::toylm::Block, name: &str) -> &'a mut DenseMatrix {
    match name {
        "attn_q" => &mut block.attn_q,
        "attn_k" => &mut block.attn_k,
        "attn_v" => &mut block.attn_v,
        "attn_o" => &mut block.attn_o,
        "mlp_gate" => &mut block.mlp_gate,
        "mlp_up" => &mut block.mlp_up,
        _ => &mut block.mlp_down,
    }
}

fn hstack(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), a.cols() + b.cols(), |r, c| {
        if c < a.cols() {
            a.get(r, c)
        } else {
            b.get(r, c - a.cols())
        }
    })
}
