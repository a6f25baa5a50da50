use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{entropy, log_softmax, softmax};
use super::{LoraAdapter, Sample, TaskModel};
use crate::error::{Result, SolarError};

/// Anything that produces one score per choice.
pub trait ChoiceScorer {
    fn scores(&self, sample: &Sample) -> Result<Vec<f64>>;
}

/// A model with an optional adapter attached.
#[derive(Debug, Clone, Copy)]
pub struct AdaptedModel<'a> {
    pub model: &'a TaskModel,
    pub adapter: Option<&'a LoraAdapter>,
}

impl ChoiceScorer for AdaptedModel<'_> {
    fn scores(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.model.forward_scores(self.adapter, sample)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose top-scoring choice (lowest index on ties) is the label.
pub fn accuracy(scorer: &impl ChoiceScorer, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(SolarError::EmptyEvalSet);
    }
    let mut correct = 0usize;
    for (i, s) in data.iter().enumerate() {
        let label = s.label.ok_or(SolarError::LabeledDataRequired { index: i })?;
        if argmax(&scorer.scores(s)?) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn evaluate_accuracy(model: &TaskModel, adapter: Option<&LoraAdapter>, data: &[Sample]) -> Result<f64> {
    accuracy(&AdaptedModel { model, adapter }, data)
}

/// Mean cross-entropy over labeled samples.
pub fn dataset_loss(model: &TaskModel, adapter: Option<&LoraAdapter>, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(SolarError::EmptyEvalSet);
    }
    let mut total = 0.0;
    for (i, s) in data.iter().enumerate() {
        let label = s.label.ok_or(SolarError::LabeledDataRequired { index: i })?;
        total -= log_softmax(&model.forward_scores(adapter, s)?)[label];
    }
    Ok(total / data.len() as f64)
}

/// Mean prediction entropy; labels are ignored.
pub fn mean_entropy(scorer: &impl ChoiceScorer, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(SolarError::EmptyEvalSet);
    }
    let mut total = 0.0;
    for s in data {
        total += entropy(&scorer.scores(s)?);
    }
    Ok(total / data.len() as f64)
}

/// `∂(−log p_label)/∂s = softmax(s) − onehot(label)`.
pub fn cross_entropy_score_grad(scores: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(scores);
    g[label] -= 1.0;
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn check(&self, dataset_len: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SolarError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(SolarError::Config("batch_size must be positive".into()));
        }
        if self.batch_size > dataset_len {
            return Err(SolarError::Config(format!(
                "batch_size {} exceeds dataset size {dataset_len}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Walks over `0..n` in epochs, reshuffling each epoch when `shuffle` is set.
/// Batches may straddle an epoch boundary.
#[derive(Debug)]
pub struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
}

impl BatchCursor {
    pub fn new(n: usize, shuffle: bool, seed: u64) -> Self {
        let mut c = Self {
            order: (0..n).collect(),
            pos: 0,
            shuffle,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        if shuffle {
            c.order.shuffle(&mut c.rng);
        }
        c
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.pos = 0;
                if self.shuffle {
                    self.order.shuffle(&mut self.rng);
                }
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// SGD on the adapter factors only; the base model is read-only.
pub fn train(
    model: &TaskModel,
    adapter: &LoraAdapter,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(LoraAdapter, Vec<f64>)> {
    train_with_snapshots(model, adapter, data, cfg, |_, _| {})
}

/// As [`train`], calling `on_step(step, &adapter)` after every update.
pub fn train_with_snapshots(
    model: &TaskModel,
    adapter: &LoraAdapter,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LoraAdapter),
) -> Result<(LoraAdapter, Vec<f64>)> {
    adapter.check_compat(model)?;
    if let Some(i) = data.iter().position(|s| s.label.is_none()) {
        return Err(SolarError::LabeledDataRequired { index: i });
    }
    let mut current = adapter.clone();
    if cfg.steps == 0 {
        return Ok((current, Vec::new()));
    }
    cfg.check(data.len())?;

    let mut cursor = BatchCursor::new(data.len(), cfg.shuffle, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = cursor.next_batch(cfg.batch_size);
        let mut grads = current.zeros_like();
        let mut loss = 0.0;
        for &i in &batch {
            let s = &data[i];
            let label = s.label.expect("checked above");
            let fwd = model.forward(Some(&current), s, None)?;
            loss -= log_softmax(&fwd.scores)[label];
            let g = cross_entropy_score_grad(&fwd.scores, label);
            model.backward(&current, &fwd, &g, &mut grads);
        }
        let n = batch.len() as f64;
        trace.push(loss / n);
        current.axpy(-cfg.learning_rate / n, &grads)?;
        if !current.is_finite() || !loss.is_finite() {
            trace.pop();
            return Err(SolarError::TrainingDiverged { last_finite_trace: trace });
        }
        on_step(step, &current);
    }
    Ok((current, trace))
}
