//! Checkpoint files: a line-oriented text manifest followed by a raw
//! little-endian `f32` blob.
//!
//! ```text
//! slmckpt 1
//! config {"vocab_size":64,...}
//! layers [{"n_heads":4,"d_intermediate":128},...]
//! act_quant None
//! tensor token_embedding 64x32 f32le 0 8192
//! ...
//! end
//! <blob>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matcal::DenseMatrix;
use crate::toylm::{ActivationQuant, Block, LayerShape, ModelConfig, Params, ToyModel};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "slmckpt";

macro_rules! format_err {
    ($($arg:tt)*) => {
        Error::Format(format!($($arg)*))
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub nbytes: usize,
}

/// Serializes `model` to bytes. Values are rounded to `f32`.
pub fn encode_checkpoint(model: &ToyModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut head = String::new();
    head.push_str(&format!("{MAGIC} {FORMAT_VERSION}\n"));
    let cfg = serde_json::to_string(&model.config).map_err(|e| format_err!("config: {e}"))?;
    head.push_str(&format!("config {cfg}\n"));
    let shapes = serde_json::to_string(&model.layer_shapes()).map_err(|e| format_err!("layers: {e}"))?;
    head.push_str(&format!("layers {shapes}\n"));
    head.push_str(&format!("act_quant {:?}\n", model.act_quant));
    let mut blob = Vec::new();
    for (name, t) in model.params.named() {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        head.push_str(&format!(
            "tensor {name} {}x{} f32le {offset} {}\n",
            t.rows(),
            t.cols(),
            blob.len() - offset
        ));
    }
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => format_err!("{}: {m}", path.display()),
        other => other,
    })
}

struct Manifest {
    config: ModelConfig,
    shapes: Vec<LayerShape>,
    act_quant: ActivationQuant,
    tensors: Vec<TensorEntry>,
    blob_start: usize,
}

fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err!("manifest ends without an `end` line"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| format_err!("manifest is not UTF-8"))
    };
    let first = next_line()?;
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| format_err!("not a checkpoint (missing `{MAGIC}` header)"))?;
    let version: u32 = version.parse().map_err(|_| format_err!("bad format version {version:?}"))?;
    if version != FORMAT_VERSION {
        return Err(format_err!("format version {version} is not supported (expected {FORMAT_VERSION})"));
    }
    let field = |line: &str, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| format_err!("expected `{key}` line, found {line:?}"))
    };
    let config: ModelConfig =
        serde_json::from_str(&field(next_line()?, "config")?).map_err(|e| format_err!("config line: {e}"))?;
    let shapes: Vec<LayerShape> =
        serde_json::from_str(&field(next_line()?, "layers")?).map_err(|e| format_err!("layers line: {e}"))?;
    let act_quant = match field(next_line()?, "act_quant")?.as_str() {
        "None" => ActivationQuant::None,
        "Int8PerToken" => ActivationQuant::Int8PerToken,
        other => return Err(format_err!("unknown act_quant {other:?}")),
    };
    let mut tensors = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        tensors.push(parse_tensor_line(line)?);
    }
    Ok(Manifest {
        config,
        shapes,
        act_quant,
        tensors,
        blob_start: pos,
    })
}

fn parse_tensor_line(line: &str) -> Result<TensorEntry> {
    let parts: Vec<&str> = line.split(' ').collect();
    let [kw, name, shape, dtype, offset, nbytes] = parts.as_slice() else {
        return Err(format_err!("malformed tensor line {line:?}"));
    };
    if *kw != "tensor" {
        return Err(format_err!("expected `tensor` or `end`, found {line:?}"));
    }
    if *dtype != "f32le" {
        return Err(format_err!("tensor {name}: unsupported dtype {dtype}"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err!("tensor {name}: bad number {s:?}"));
    let (r, c) = shape
        .split_once('x')
        .ok_or_else(|| format_err!("tensor {name}: bad shape {shape:?}"))?;
    Ok(TensorEntry {
        name: name.to_string(),
        rows: num(r)?,
        cols: num(c)?,
        offset: num(offset)?,
        nbytes: num(nbytes)?,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyModel> {
    let m = parse_manifest(bytes)?;
    m.config.validate()?;
    if m.shapes.len() != m.config.n_layers {
        return Err(format_err!(
            "layer table has {} entries, config says {}",
            m.shapes.len(),
            m.config.n_layers
        ));
    }
    let expected = ToyModel::expected_shapes(&m.config, &m.shapes);
    if expected.len() != m.tensors.len() {
        return Err(format_err!("manifest lists {} tensors, expected {}", m.tensors.len(), expected.len()));
    }
    let blob = &bytes[m.blob_start..];
    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(m.tensors.len());
    for (t, (name, shape)) in m.tensors.iter().zip(&expected) {
        if &t.name != name {
            return Err(format_err!("tensor {:?} found where {name:?} was expected", t.name));
        }
        if (t.rows, t.cols) != *shape {
            return Err(format_err!(
                "tensor {name} declared {}x{} but the architecture needs {}x{}",
                t.rows,
                t.cols,
                shape.0,
                shape.1
            ));
        }
        let want = t
            .rows
            .checked_mul(t.cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format_err!("tensor {name}: size overflow"))?;
        if t.nbytes != want {
            return Err(format_err!("tensor {name}: {} bytes declared, shape needs {want}", t.nbytes));
        }
        let end = t
            .offset
            .checked_add(t.nbytes)
            .ok_or_else(|| format_err!("tensor {name}: offset overflow"))?;
        if end > blob.len() {
            return Err(format_err!(
                "tensor {name} spans bytes {}..{end} but the blob has only {} bytes",
                t.offset,
                blob.len()
            ));
        }
        spans.push((t.offset, end, name));
    }
    let mut sorted = spans.clone();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(format_err!("tensors {} and {} overlap", w[0].2, w[1].2));
        }
    }

    let mut model = empty_model(&m.config, &m.shapes);
    model.act_quant = m.act_quant;
    for (t, (start, end, _)) in m.tensors.iter().zip(&spans) {
        let data: Vec<f64> = blob[*start..*end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let dst = model.params.get_mut(&t.name).expect("name checked against the architecture");
        dst.data_mut().copy_from_slice(&data);
    }
    model.validate()?;
    Ok(model)
}

fn empty_model(config: &ModelConfig, shapes: &[LayerShape]) -> ToyModel {
    let d = config.d_model;
    let z = DenseMatrix::zeros;
    let layers = shapes
        .iter()
        .map(|s| {
            let hh = s.n_heads * config.head_dim;
            let inter = s.d_intermediate;
            Block {
                attn_norm: z(1, d),
                attn_q: z(d, hh),
                attn_k: z(d, hh),
                attn_v: z(d, hh),
                attn_o: z(hh, d),
                mlp_norm: z(1, d),
                mlp_gate: z(d, inter),
                mlp_up: z(d, inter),
                mlp_down: z(inter, d),
            }
        })
        .collect();
    ToyModel {
        config: config.clone(),
        params: Params {
            token_embedding: z(config.vocab_size, d),
            positional_embedding: z(config.max_seq_len, d),
            layers,
            final_norm: z(1, d),
            unembedding: z(d, config.vocab_size),
        },
        act_quant: ActivationQuant::None,
    }
}

/// Rounds every tensor to `f32` precision, i.e. what a save/load cycle keeps.
pub fn round_to_f32(model: &ToyModel) -> ToyModel {
    let mut out = model.clone();
    out.params.for_each_mut(|_, t| {
        for v in t.data_mut() {
            *v = f64::from(*v as f32);
        }
    });
    out
}
