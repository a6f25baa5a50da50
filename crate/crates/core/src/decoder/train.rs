use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prompt_state, volume, Decoder, DecoderParams};
use crate::codec::{LayerStats, TokenGrid};
use crate::error::{Result, SolarError};
use crate::substrate::Sample;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptCheckpointPair {
    pub prompts: Vec<Sample>,
    pub checkpoint: TokenGrid,
    pub task_id: String,
    pub batch_index: usize,
    pub checkpoint_index: usize,
}

/// Draws `count` (batch, checkpoint) pairs uniformly with replacement.
pub fn pair_dataset(
    prompt_batches: &[Vec<Sample>],
    checkpoints: &[TokenGrid],
    task_id: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<PromptCheckpointPair>> {
    if prompt_batches.is_empty() || prompt_batches.iter().any(Vec::is_empty) {
        return Err(SolarError::EmptySource("prompt batches"));
    }
    if checkpoints.is_empty() {
        return Err(SolarError::EmptySource("checkpoints"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let b = rng.random_range(0..prompt_batches.len());
            let c = rng.random_range(0..checkpoints.len());
            PromptCheckpointPair {
                prompts: prompt_batches[b].clone(),
                checkpoint: checkpoints[c].clone(),
                task_id: task_id.to_string(),
                batch_index: b,
                checkpoint_index: c,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 5e-3,
            batch_size: 2,
            seed: 0,
        }
    }
}

/// Mean squared error over real (mask = 1) entries and its gradient with
/// respect to every decoder parameter, for one input state.
pub fn masked_mse_grad(decoder: &Decoder, x: &[f64], target: &[f64], mask: &[u8]) -> (f64, Decoder) {
    let (y, cache) = decoder.forward_one(x);
    let count = mask.iter().filter(|&&m| m == 1).count().max(1) as f64;
    let mut loss = 0.0;
    let gy: Vec<f64> = y
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((y, t), &m)| {
            if m == 1 {
                loss += (y - t) * (y - t);
                2.0 * (y - t) / count
            } else {
                0.0
            }
        })
        .collect();
    let mut grads = decoder.zeros_like();
    decoder.backward_one(&cache, &gy, &mut grads);
    (loss / count, grads)
}

pub fn masked_mse(decoder: &Decoder, x: &[f64], target: &[f64], mask: &[u8]) -> f64 {
    let (y, _) = decoder.forward_one(x);
    let mut loss = 0.0;
    let mut count = 0usize;
    for ((y, t), &m) in y.iter().zip(target).zip(mask) {
        if m == 1 {
            loss += (y - t) * (y - t);
            count += 1;
        }
    }
    loss / count.max(1) as f64
}

struct Prepared {
    x: Vec<f64>,
    target: Vec<f64>,
    mask: Vec<u8>,
}

fn mean_loss(decoder: &Decoder, data: &[Prepared]) -> f64 {
    data.iter().map(|p| masked_mse(decoder, &p.x, &p.target, &p.mask)).sum::<f64>() / data.len() as f64
}

fn mean_stats(pairs: &[PromptCheckpointPair], segments: usize) -> Option<Vec<LayerStats>> {
    if pairs.iter().any(|p| p.checkpoint.norm_stats.len() != segments) {
        return None;
    }
    let n = pairs.len() as f64;
    Some(
        (0..segments)
            .map(|i| {
                let mean = pairs.iter().map(|p| p.checkpoint.norm_stats[i].mean).sum::<f64>() / n;
                let std = pairs.iter().map(|p| p.checkpoint.norm_stats[i].std).sum::<f64>() / n;
                LayerStats {
                    mean,
                    std,
                    floored: pairs.iter().all(|p| p.checkpoint.norm_stats[i].floored),
                }
            })
            .collect(),
    )
}

/// Adam on the masked token MSE. The returned trace starts with the loss
/// before any update, followed by the mean loss after each epoch.
pub fn train_decoder(
    pairs: &[PromptCheckpointPair],
    cfg: &DecoderTrainConfig,
    init: DecoderParams,
) -> Result<(DecoderParams, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(SolarError::EmptySource("prompt-checkpoint pairs"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(SolarError::Config("decoder batch_size and learning_rate must be positive".into()));
    }
    let mut params = init;
    let tail = params.decoder.config.tail();
    let data: Vec<Prepared> = pairs
        .iter()
        .map(|p| {
            let g = &p.checkpoint;
            if [g.len(), g.pad_rows, g.pad_cols] != tail {
                return Err(SolarError::Config(format!(
                    "checkpoint grid ({}, {}, {}) does not match decoder output {tail:?}",
                    g.len(),
                    g.pad_rows,
                    g.pad_cols
                )));
            }
            Ok(Prepared {
                x: prompt_state(&p.prompts, &params.embedder, params.head())?,
                target: g.tokens.iter().flatten().copied().collect(),
                mask: g.mask_flat(),
            })
        })
        .collect::<Result<_>>()?;
    debug_assert!(data.iter().all(|d| d.target.len() == volume(tail)));
    if let Some(stats) = mean_stats(pairs, params.layout.segments.len()) {
        params.norm_stats = stats;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = params.decoder.to_flat();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut t = 0i32;

    let mut trace = vec![mean_loss(&params.decoder, &data)];
    if !trace[0].is_finite() {
        return Err(SolarError::TrainingDiverged { last_finite_trace: Vec::new() });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; theta.len()];
            for &i in batch {
                let d = &data[i];
                let (_, g) = masked_mse_grad(&params.decoder, &d.x, &d.target, &d.mask);
                grad.iter_mut().zip(g.to_flat()).for_each(|(a, b)| *a += b / batch.len() as f64);
            }
            t += 1;
            let c1 = 1.0 - f64::powi(b1, t);
            let c2 = 1.0 - f64::powi(b2, t);
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                theta[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            params.decoder.set_flat(&theta)?;
        }
        let loss = mean_loss(&params.decoder, &data);
        if !loss.is_finite() || !params.decoder.is_finite() {
            return Err(SolarError::TrainingDiverged { last_finite_trace: trace });
        }
        trace.push(loss);
    }
    Ok((params, trace))
}
