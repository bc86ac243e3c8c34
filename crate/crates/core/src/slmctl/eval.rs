use serde::{Deserialize, Serialize};

use crate::distill::score;
use crate::error::{invalid, Result};
use crate::toylm::{auc, ToyModel};

use super::dataset::LoadedDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Loss,
    Auc,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub n_sequences: usize,
    pub n_params: usize,
}

/// Mean response cross-entropy and/or decision-position AUC, from one
/// forward pass per sequence.
pub fn eval(model: &ToyModel, ds: &LoadedDataset, metrics: &[Metric]) -> Result<EvalRecord> {
    if metrics.contains(&Metric::Auc) && !ds.labeled {
        return Err(invalid!("AUC requested on an unlabeled dataset"));
    }
    if ds.data.is_empty() {
        return Err(invalid!("evaluation dataset is empty"));
    }
    let data = &ds.data;
    if ds.labeled {
        data.validate(model.config.vocab_size)?;
    }
    let (loss, scores) = score(model, data)?;
    Ok(EvalRecord {
        loss: metrics.contains(&Metric::Loss).then_some(loss),
        auc: if metrics.contains(&Metric::Auc) {
            Some(auc(&scores, &data.labels)?)
        } else {
            None
        },
        n_sequences: data.len(),
        n_params: model.count_params(),
    })
}
