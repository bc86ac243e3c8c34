//! Knowledge distillation: divergences with analytic gradients, the mixed
//! token-level objective, on-policy batch construction and SGD training.

mod batch;
mod divergence;
mod loss;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::toylm::{SynthDataset, ToyModel};

pub use batch::{build_batch, build_batch_for, BatchItem, SamplingSchedule};
pub use divergence::{divergence, divergence_grad, divergence_with_floor, Divergence, TokenDistribution, DEFAULT_FLOOR};
pub use loss::{kd_sequence_loss, masked_sequence_loss, KDLossConfig, SequenceLoss};
pub use train::{
    distill_epoch, evaluate, score, train_stage, two_stage_train, EpochMetrics, EvalMetrics, Sgd, StageSpec, Teacher,
    TrainConfig, TrainResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    Sft,
    Fkl,
    Rkl,
    Jsd,
    FklOfkl,
    SftOfkl,
}

impl Recipe {
    pub const ALL: [Recipe; 6] = [
        Recipe::Sft,
        Recipe::Fkl,
        Recipe::Rkl,
        Recipe::Jsd,
        Recipe::FklOfkl,
        Recipe::SftOfkl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Sft => "sft",
            Recipe::Fkl => "fkl",
            Recipe::Rkl => "rkl",
            Recipe::Jsd => "jsd",
            Recipe::FklOfkl => "fkl-ofkl",
            Recipe::SftOfkl => "sft-ofkl",
        }
    }

    pub fn is_two_stage(self) -> bool {
        matches!(self, Recipe::FklOfkl | Recipe::SftOfkl)
    }

    pub fn needs_teacher(self) -> bool {
        self != Recipe::Sft
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| invalid!("unknown recipe {s:?} (expected one of sft, fkl, rkl, jsd, fkl-ofkl, sft-ofkl)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecipeConfig {
    pub recipe: Recipe,
    /// Stage-1 (or only) training knobs.
    pub train: TrainConfig,
    /// Stage-2 training knobs for two-stage recipes.
    pub stage2: TrainConfig,
    pub on_policy: SamplingSchedule,
    pub jsd_beta: f64,
    /// Loss-mix template; its divergence and weights are set by the recipe.
    pub loss: KDLossConfig,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        Self {
            recipe: Recipe::Fkl,
            train: TrainConfig {
                lr: 0.3,
                ..TrainConfig::default()
            },
            stage2: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            on_policy: SamplingSchedule::on_policy(1.0),
            jsd_beta: 0.5,
            loss: KDLossConfig::default(),
        }
    }
}

impl RecipeConfig {
    fn kd(&self, divergence: Divergence) -> KDLossConfig {
        KDLossConfig {
            divergence,
            ..self.loss.clone()
        }
    }

    fn sft(&self) -> KDLossConfig {
        KDLossConfig {
            temperature: self.loss.temperature,
            epsilon_floor: self.loss.epsilon_floor,
            ..KDLossConfig::sft()
        }
    }

    /// The stage list the recipe expands to.
    pub fn stages(&self) -> Vec<StageSpec> {
        let off = |loss| StageSpec {
            loss,
            schedule: SamplingSchedule::off_policy(),
            train: self.train.clone(),
        };
        let first = match self.recipe {
            Recipe::Sft | Recipe::SftOfkl => off(self.sft()),
            Recipe::Fkl | Recipe::FklOfkl => off(self.kd(Divergence::Fkl)),
            Recipe::Rkl => off(self.kd(Divergence::Rkl)),
            Recipe::Jsd => off(self.kd(Divergence::Jsd(self.jsd_beta))),
        };
        let mut out = vec![first];
        if self.recipe.is_two_stage() {
            out.push(StageSpec {
                loss: self.kd(Divergence::Fkl),
                schedule: self.on_policy.clone(),
                train: self.stage2.clone(),
            });
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.stages() {
            s.loss.validate()?;
            s.schedule.validate()?;
            s.train.validate()?;
        }
        if self.recipe.is_two_stage() && !(self.on_policy.on_policy_fraction > 0.0) {
            return Err(invalid!("two-stage recipe {} needs on_policy.on_policy_fraction > 0", self.recipe));
        }
        Ok(())
    }
}

/// Runs a named recipe end to end.
pub fn run_recipe(
    cfg: &RecipeConfig,
    student: ToyModel,
    teacher: Option<&ToyModel>,
    train: &SynthDataset,
    val: &SynthDataset,
) -> Result<TrainResult> {
    cfg.validate()?;
    if cfg.recipe.needs_teacher() && teacher.is_none() {
        return Err(invalid!("recipe {} needs a teacher model", cfg.recipe));
    }
    let stages = cfg.stages();
    match stages.as_slice() {
        [one] => train_stage(student, teacher, train, val, &one.loss, &one.schedule, &one.train, 1),
        [s1, s2] => two_stage_train(student, teacher, train, val, s1, s2),
        _ => unreachable!("recipes have one or two stages"),
    }
}
