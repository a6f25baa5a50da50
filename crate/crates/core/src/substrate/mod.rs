//! The task model that adapters are generated for and evaluated on.
//!
//! A two-layer scorer over hashed unigram/bigram features: a shared `enc`
//! map with `tanh` encodes the prompt and every choice, a `proj` map turns the
//! prompt encoding into a query, and each choice is scored by its dot product
//! with that query. Low-rank adapters can attach to both linear maps; base
//! weights are never trained.

mod adapter;
mod io;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};

pub use adapter::{flatten_adapter, unflatten_adapter, AdapterLayout, LoraAdapter, LoraPair, MatrixKind, Segment};
pub use io::{read_adapter, write_adapter, ADAPTER_MAGIC};
pub use model::{
    entropy, entropy_score_grad, featurize, log_softmax, softmax, Forward, LinearMap, TaskModel, ENC_LAYER,
    PROJ_LAYER,
};
pub use train::{
    accuracy, cross_entropy_score_grad, dataset_loss, evaluate_accuracy, mean_entropy, train, train_with_snapshots,
    AdaptedModel, BatchCursor, ChoiceScorer, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub prompt_text: String,
    pub choices: Vec<String>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn new(prompt_text: impl Into<String>, choices: Vec<String>, label: Option<usize>) -> Result<Self> {
        let s = Self {
            prompt_text: prompt_text.into(),
            choices,
            label,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(SolarError::Config(format!(
                "sample needs at least 2 choices, has {}",
                self.choices.len()
            )));
        }
        if let Some(l) = self.label {
            if l >= self.choices.len() {
                return Err(SolarError::Config(format!(
                    "label {l} out of range for {} choices",
                    self.choices.len()
                )));
            }
        }
        Ok(())
    }

    /// Copy with the label removed.
    pub fn unlabeled(&self) -> Sample {
        Sample {
            label: None,
            ..self.clone()
        }
    }
}
