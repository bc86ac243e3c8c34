//! Python bindings: models, synthetic datasets, distillation, pruning,
//! quantization, evaluation, the latency benchmark and the pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use slmkit::distill::{self, Recipe, RecipeConfig, TrainConfig};
use slmkit::prune::{self, PruneConfig};
use slmkit::quant::{self, QuantConfig, QuantScheme};
use slmkit::slmctl::{self, BenchConfig, PipelineConfig};
use slmkit::toylm::{self, ModelConfig, SynthConfig, SynthDataset, ToyModel};
use slmkit::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for slmkit::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

/// A toy decoder-only transformer.
#[pyclass(name = "Model", module = "pyslmkit", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: ToyModel,
}

#[pymethods]
impl PyModel {
    /// Randomly initialized model. `d_intermediate` defaults to `4 * d_model`.
    #[staticmethod]
    #[pyo3(signature = (vocab_size=64, d_model=16, n_layers=2, n_heads=4, d_intermediate=None, max_seq_len=32, seed=0))]
    fn random(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_intermediate: Option<usize>,
        max_seq_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(PyValueError::new_err("d_model must be a positive multiple of n_heads"));
        }
        let cfg = ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            head_dim: d_model / n_heads,
            d_intermediate: d_intermediate.unwrap_or(4 * d_model),
            max_seq_len,
            norm_eps: 1e-6,
        };
        Ok(Self {
            inner: ToyModel::new_random(cfg, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: slmctl::load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        slmctl::save_checkpoint(&self.inner, &path).py()
    }

    /// Logits, one row per input token.
    fn forward(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.forward(&tokens, &[], None).py()?;
        Ok((0..out.logits.rows()).map(|r| out.logits.row(r).to_vec()).collect())
    }

    /// Sampled continuation; temperature 0 decodes greedily.
    #[pyo3(signature = (prompt, max_tokens=4, temperature=0.0, seed=0))]
    fn generate(&self, prompt: Vec<usize>, max_tokens: usize, temperature: f64, seed: u64) -> PyResult<Vec<usize>> {
        Ok(self.inner.generate(&prompt, temperature, max_tokens, seed).py()?.tokens)
    }

    fn count_params(&self) -> usize {
        self.inner.count_params()
    }

    /// Per-layer `(n_heads, d_intermediate)`.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.inner
            .layer_shapes()
            .iter()
            .map(|s| (s.n_heads, s.d_intermediate))
            .collect()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = &self.inner.config;
        let d = PyDict::new(py);
        d.set_item("vocab_size", c.vocab_size)?;
        d.set_item("d_model", c.d_model)?;
        d.set_item("n_layers", c.n_layers)?;
        d.set_item("n_heads", c.n_heads)?;
        d.set_item("head_dim", c.head_dim)?;
        d.set_item("d_intermediate", c.d_intermediate)?;
        d.set_item("max_seq_len", c.max_seq_len)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(d_model={}, n_layers={}, params={})",
            c.d_model,
            c.n_layers,
            self.inner.count_params()
        )
    }
}

/// Labeled token sequences with prompt lengths.
#[pyclass(name = "Dataset", module = "pyslmkit", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: SynthDataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic recommendation data: `n_users * items_per_user` sequences.
    #[staticmethod]
    #[pyo3(signature = (seed, n_users, items_per_user=4, off_domain=false))]
    fn synth(seed: u64, n_users: usize, items_per_user: usize, off_domain: bool) -> PyResult<Self> {
        let base = SynthConfig::default();
        let cfg = if off_domain { base.off_domain() } else { base };
        Ok(Self {
            inner: toylm::synth_data(seed, n_users, items_per_user, &cfg).py()?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: slmctl::read_dataset(&path).py()?.data,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        slmctl::write_dataset(&self.inner, &path).py()
    }

    fn slice(&self, start: usize, end: usize) -> PyResult<Self> {
        if start > end || end > self.inner.len() {
            return Err(PyValueError::new_err(format!("bad range {start}..{end} for {} rows", self.inner.len())));
        }
        Ok(Self {
            inner: self.inner.slice(start..end),
        })
    }

    #[getter]
    fn sequences(&self) -> Vec<Vec<usize>> {
        self.inner.sequences.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<bool> {
        self.inner.labels.clone()
    }

    #[getter]
    fn prompt_lens(&self) -> Vec<usize> {
        self.inner.prompt_lens.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Validation `(loss, auc)`.
#[pyfunction]
fn evaluate(model: &PyModel, data: &PyDataset) -> PyResult<(f64, f64)> {
    let m = distill::evaluate(&model.inner, &data.inner).py()?;
    Ok((m.loss, m.auc))
}

/// Runs a distillation recipe (`sft`, `fkl`, `rkl`, `jsd`, `fkl-ofkl`,
/// `sft-ofkl`) and returns the best checkpoint with its history as
/// `(stage, epoch, val_loss, val_auc)` tuples.
#[pyfunction]
#[pyo3(signature = (student, train, val, recipe="fkl", teacher=None, epochs=20, lr=0.3, stage2_epochs=10, stage2_lr=0.1, seed=21))]
#[allow(clippy::too_many_arguments)]
fn distill_model(
    py: Python<'_>,
    student: &PyModel,
    train: &PyDataset,
    val: &PyDataset,
    recipe: &str,
    teacher: Option<&PyModel>,
    epochs: usize,
    lr: f64,
    stage2_epochs: usize,
    stage2_lr: f64,
    seed: u64,
) -> PyResult<(PyModel, Vec<(usize, usize, f64, f64)>)> {
    let recipe: Recipe = recipe.parse().py()?;
    let mut cfg = RecipeConfig {
        recipe,
        ..RecipeConfig::default()
    };
    cfg.train = TrainConfig {
        epochs,
        lr,
        seed,
        ..cfg.train
    };
    cfg.stage2 = TrainConfig {
        epochs: stage2_epochs,
        lr: stage2_lr,
        seed,
        ..cfg.stage2
    };
    let (s, t) = (student.inner.clone(), teacher.map(|t| t.inner.clone()));
    let res = py
        .detach(|| distill::run_recipe(&cfg, s, t.as_ref(), &train.inner, &val.inner))
        .py()?;
    let history = res
        .history
        .iter()
        .map(|h| (h.stage, h.epoch, h.val_loss, h.val_auc))
        .collect();
    Ok((PyModel { inner: res.model }, history))
}

fn all_layers(layers: Option<Vec<usize>>, model: &ToyModel) -> Vec<usize> {
    layers.unwrap_or_else(|| (0..model.config.n_layers).collect())
}

/// Removes `n_remove` MLP neurons per layer, calibrated on `calib`.
#[pyfunction]
#[pyo3(signature = (model, n_remove, calib, layers=None))]
fn prune_mlp(model: &PyModel, n_remove: usize, calib: &PyDataset, layers: Option<Vec<usize>>) -> PyResult<PyModel> {
    let layers = all_layers(layers, &model.inner);
    let (m, _) = prune::prune_mlp(&model.inner, &layers, n_remove, &calib.inner.sequences, &PruneConfig::default()).py()?;
    Ok(PyModel { inner: m })
}

/// Removes `n_remove` attention heads per layer, calibrated on `calib`.
#[pyfunction]
#[pyo3(signature = (model, n_remove, calib, layers=None))]
fn prune_heads(model: &PyModel, n_remove: usize, calib: &PyDataset, layers: Option<Vec<usize>>) -> PyResult<PyModel> {
    let layers = all_layers(layers, &model.inner);
    let (m, _) =
        prune::prune_heads(&model.inner, &layers, n_remove, &calib.inner.sequences, &PruneConfig::default()).py()?;
    Ok(PyModel { inner: m })
}

/// Fake-quantized copy of `model` and its total layerwise reconstruction
/// error (None without calibration data).
#[pyfunction]
#[pyo3(signature = (model, scheme, calib=None))]
fn quantize(model: &PyModel, scheme: &str, calib: Option<&PyDataset>) -> PyResult<(PyModel, Option<f64>)> {
    let scheme: QuantScheme = scheme.parse().py()?;
    let seqs = calib.map(|c| c.inner.sequences.as_slice());
    let (m, report) = quant::quantize_model(&model.inner, scheme, seqs, &QuantConfig::default()).py()?;
    Ok((PyModel { inner: m }, report.total_error))
}

/// Shared-prefix prefill benchmark; returns the report as a dict.
#[pyfunction(name = "bench")]
#[pyo3(signature = (model, context_len=256, k_candidates=4, hot=true, repeats=5))]
fn run_bench<'py>(
    py: Python<'py>,
    model: &PyModel,
    context_len: usize,
    k_candidates: usize,
    hot: bool,
    repeats: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = BenchConfig {
        context_len,
        k_candidates,
        hot,
        repeats,
        ..BenchConfig::default()
    };
    let report = slmctl::bench(&model.inner, &cfg).py()?;
    let v = serde_json::to_value(&report).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// Runs a pipeline from TOML text; returns the final model and the stage
/// records as dicts.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, config_toml: &str) -> PyResult<(PyModel, Vec<Bound<'py, PyAny>>)> {
    let cfg = PipelineConfig::from_toml(config_toml).py()?;
    let run = py.detach(|| slmctl::run_pipeline(&cfg)).py()?;
    let records = run
        .records
        .iter()
        .map(|r| {
            let v = serde_json::to_value(r).map_err(|e| PyValueError::new_err(e.to_string()))?;
            json_to_py(py, &v)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { inner: run.model }, records))
}

/// Area under the ROC curve, ties counted half.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    toylm::auc(&scores, &labels).py()
}

#[pyfunction]
fn fp8_encode(x: f64) -> u8 {
    quant::fp8_e4m3_encode(x).0
}

#[pyfunction]
fn fp8_decode(code: u8) -> f64 {
    quant::fp8_e4m3_decode(quant::Fp8Value(code))
}

#[pymodule]
fn pyslmkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(distill_model, m)?)?;
    m.add_function(wrap_pyfunction!(prune_mlp, m)?)?;
    m.add_function(wrap_pyfunction!(prune_heads, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(fp8_encode, m)?)?;
    m.add_function(wrap_pyfunction!(fp8_decode, m)?)?;
    Ok(())
}
