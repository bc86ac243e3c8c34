//! Pipeline configuration, read from TOML. Every table is optional and
//! falls back to the defaults below; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{RecipeConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::prune::PruneConfig;
use crate::quant::{QuantConfig, QuantScheme};
use crate::toylm::{Domain, ModelConfig, SynthConfig};

use super::bench::BenchConfig;
use super::eval::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Distill,
    PruneMlp,
    PruneHeads,
    Quantize,
    Eval,
    Bench,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Distill => "distill",
            Stage::PruneMlp => "prune_mlp",
            Stage::PruneHeads => "prune_heads",
            Stage::Quantize => "quantize",
            Stage::Eval => "eval",
            Stage::Bench => "bench",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Stage::Distill,
            Stage::PruneMlp,
            Stage::PruneHeads,
            Stage::Quantize,
            Stage::Eval,
            Stage::Bench,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub items_per_user: usize,
    pub train_users: usize,
    pub val_users: usize,
    /// Users for the teacher's own training split.
    pub teacher_users: usize,
    pub calib_sequences: usize,
    pub calib_domain: Domain,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            items_per_user: 4,
            train_users: 250,
            val_users: 250,
            teacher_users: 750,
            calib_sequences: 512,
            calib_domain: Domain::InDomain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(64, 64),
            train: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneMlpStage {
    /// Neurons removed per layer in total.
    pub n_remove: usize,
    /// Layers to prune; empty means all.
    pub layers: Vec<usize>,
    /// Pruning rounds; the removal is split evenly across them.
    pub steps: usize,
    /// Distillation epochs after each round (0: one-shot, no retraining).
    pub redistill_epochs: usize,
    pub solver: PruneConfig,
}

impl Default for PruneMlpStage {
    fn default() -> Self {
        Self {
            n_remove: 24,
            layers: Vec::new(),
            steps: 1,
            redistill_epochs: 0,
            solver: PruneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneHeadsStage {
    /// Heads removed per layer.
    pub n_remove: usize,
    pub layers: Vec<usize>,
    pub redistill_epochs: usize,
    pub solver: PruneConfig,
}

impl Default for PruneHeadsStage {
    fn default() -> Self {
        Self {
            n_remove: 2,
            layers: Vec::new(),
            redistill_epochs: 0,
            solver: PruneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeStage {
    pub scheme: QuantScheme,
    pub config: QuantConfig,
}

impl Default for QuantizeStage {
    fn default() -> Self {
        Self {
            scheme: QuantScheme::W4A16Gptq,
            config: QuantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    pub metrics: Vec<Metric>,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Loss, Metric::Auc],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: Option<PathBuf>,
    /// Initial student checkpoint; a fresh model from `[student]` otherwise.
    pub student: Option<PathBuf>,
    /// Teacher checkpoint; trained by SFT from `[teacher]` otherwise.
    pub teacher: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub calib_data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub stages: Vec<Stage>,
    /// Adds measured wall time to report records, which makes them
    /// run-dependent. Timings always go to `timings.jsonl`.
    pub record_wall_time: bool,
    pub data: DataConfig,
    pub student: ModelConfig,
    pub teacher: TeacherConfig,
    pub distill: RecipeConfig,
    pub prune_mlp: PruneMlpStage,
    pub prune_heads: PruneHeadsStage,
    pub quantize: QuantizeStage,
    pub eval: EvalStage,
    pub bench: BenchConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 21,
            threads: 1,
            stages: vec![Stage::Distill, Stage::Eval],
            record_wall_time: false,
            data: DataConfig::default(),
            student: ModelConfig::toy(64, 16),
            teacher: TeacherConfig::default(),
            distill: RecipeConfig::default(),
            prune_mlp: PruneMlpStage::default(),
            prune_heads: PruneHeadsStage::default(),
            quantize: QuantizeStage::default(),
            eval: EvalStage::default(),
            bench: BenchConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every stage's parameters before anything runs.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Error::Config(m);
        if self.threads == 0 {
            return Err(cfg_err("threads must be >= 1".into()));
        }
        if self.stages.is_empty() {
            return Err(cfg_err("stages must not be empty".into()));
        }
        self.data.synth.validate()?;
        if self.data.items_per_user == 0 || self.data.train_users == 0 || self.data.val_users == 0 {
            return Err(cfg_err("data.items_per_user, train_users and val_users must be >= 1".into()));
        }
        self.student.validate()?;
        for (who, m) in [("student", &self.student), ("teacher.model", &self.teacher.model)] {
            if m.vocab_size != self.data.synth.vocab_size {
                return Err(cfg_err(format!(
                    "{who}.vocab_size {} differs from data.synth.vocab_size {}",
                    m.vocab_size, self.data.synth.vocab_size
                )));
            }
            if m.max_seq_len < self.data.synth.seq_len() + self.distill.on_policy.max_new_tokens {
                return Err(cfg_err(format!("{who}.max_seq_len is too short for the synthetic sequences")));
            }
        }
        let uses = |s: Stage| self.stages.contains(&s);
        if uses(Stage::Distill) || self.prune_mlp.redistill_epochs > 0 || self.prune_heads.redistill_epochs > 0 {
            self.distill.validate()?;
            if self.distill.recipe.needs_teacher() {
                self.teacher.model.validate()?;
                self.teacher.train.validate()?;
            }
        }
        if uses(Stage::PruneMlp) {
            let p = &self.prune_mlp;
            if p.steps == 0 || p.steps > p.n_remove.max(1) {
                return Err(cfg_err(format!("prune_mlp.steps must be in 1..=n_remove, got {}", p.steps)));
            }
            if p.n_remove >= self.student.d_intermediate {
                return Err(cfg_err("prune_mlp.n_remove must leave at least one neuron".into()));
            }
            check_layers("prune_mlp", &p.layers, self.student.n_layers)?;
        }
        if uses(Stage::PruneHeads) {
            let p = &self.prune_heads;
            if p.n_remove >= self.student.n_heads {
                return Err(cfg_err("prune_heads.n_remove must leave at least one head".into()));
            }
            check_layers("prune_heads", &p.layers, self.student.n_layers)?;
        }
        if uses(Stage::Quantize) {
            self.quantize.config.validate()?;
        }
        if uses(Stage::Eval) && self.eval.metrics.is_empty() {
            return Err(cfg_err("eval.metrics must not be empty".into()));
        }
        Ok(())
    }
}

fn check_layers(stage: &str, layers: &[usize], n_layers: usize) -> Result<()> {
    if let Some(l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::Config(format!("{stage}.layers has layer {l} but the model has {n_layers}")));
    }
    Ok(())
}
