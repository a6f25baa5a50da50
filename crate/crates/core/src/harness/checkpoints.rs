use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};
use crate::substrate::{read_adapter, train_with_snapshots, write_adapter, LoraAdapter, Sample, TaskModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Two-phase training schedule that snapshots the adapter after every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointRecipe {
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub num_samples: usize,
    pub batch_size: usize,
    pub rank: usize,
    pub scale: f64,
    /// Keep only finetune-phase snapshots.
    pub finetune_only: bool,
    pub seed: u64,
}

impl Default for CheckpointRecipe {
    fn default() -> Self {
        Self::desk()
    }
}

impl CheckpointRecipe {
    /// Desk scale: same step counts, a rate the small model can learn with,
    /// fewer samples and smaller batches.
    pub fn desk() -> Self {
        Self {
            pretrain_steps: 75,
            pretrain_lr: 0.5,
            finetune_steps: 50,
            finetune_lr: 0.05,
            num_samples: 2000,
            batch_size: 16,
            rank: 4,
            scale: 1.0,
            finetune_only: false,
            seed: 0,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            pretrain_lr: 1e-4,
            finetune_lr: 1e-5,
            num_samples: 5000,
            batch_size: 32,
            ..Self::desk()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn expected_snapshots(&self) -> usize {
        if self.finetune_only {
            self.finetune_steps
        } else {
            self.pretrain_steps + self.finetune_steps
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    /// 1-based step within the phase.
    pub step: usize,
    pub adapter: LoraAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSet {
    pub task_id: String,
    pub checkpoints: Vec<Checkpoint>,
    pub pretrain_final: LoraAdapter,
    pub finetune_final: LoraAdapter,
}

impl CheckpointSet {
    pub fn adapters(&self) -> Vec<&LoraAdapter> {
        self.checkpoints.iter().map(|c| &c.adapter).collect()
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.checkpoints.iter().filter(|c| c.phase == phase).count()
    }

    /// Writes `manifest.json` plus one adapter file per snapshot.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.checkpoints.len());
        for (i, c) in self.checkpoints.iter().enumerate() {
            let file = format!("ckpt_{i:04}.slra");
            fs::write(dir.join(&file), write_adapter(&c.adapter))?;
            entries.push(ManifestEntry {
                phase: c.phase,
                step: c.step,
                file,
            });
        }
        fs::write(dir.join("pretrain_final.slra"), write_adapter(&self.pretrain_final))?;
        fs::write(dir.join("finetune_final.slra"), write_adapter(&self.finetune_final))?;
        let manifest = Manifest {
            task_id: self.task_id.clone(),
            checkpoints: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let read = |file: &str| -> Result<LoraAdapter> { read_adapter(&fs::read(dir.join(file))?) };
        let checkpoints = manifest
            .checkpoints
            .iter()
            .map(|e| {
                Ok(Checkpoint {
                    phase: e.phase,
                    step: e.step,
                    adapter: read(&e.file)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            task_id: manifest.task_id,
            checkpoints,
            pretrain_final: read("pretrain_final.slra")?,
            finetune_final: read("finetune_final.slra")?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    phase: Phase,
    step: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    task_id: String,
    checkpoints: Vec<ManifestEntry>,
}

/// Trains a fresh adapter on the first `num_samples` labeled samples for
/// the pretrain phase, continues at the finetune rate, and snapshots after
/// every step. A divergence discards the partial set.
pub fn collect_checkpoints(
    model: &TaskModel,
    task_id: &str,
    train: &[Sample],
    recipe: &CheckpointRecipe,
) -> Result<CheckpointSet> {
    if train.is_empty() {
        return Err(SolarError::EmptySource("labeled train split"));
    }
    let data = &train[..recipe.num_samples.min(train.len())];
    let init = LoraAdapter::init(model, recipe.rank, recipe.scale, recipe.seed);
    let mut checkpoints = Vec::with_capacity(recipe.expected_snapshots());

    let phase_cfg = |steps, learning_rate, seed| TrainConfig {
        steps,
        learning_rate,
        batch_size: recipe.batch_size,
        shuffle: true,
        seed,
    };
    let keep_pretrain = !recipe.finetune_only;
    let (pretrain_final, _) = train_with_snapshots(
        model,
        &init,
        data,
        &phase_cfg(recipe.pretrain_steps, recipe.pretrain_lr, recipe.seed.wrapping_add(1)),
        |step, a| {
            if keep_pretrain {
                checkpoints.push(Checkpoint {
                    phase: Phase::Pretrain,
                    step: step + 1,
                    adapter: a.clone(),
                });
            }
        },
    )?;
    let (finetune_final, _) = train_with_snapshots(
        model,
        &pretrain_final,
        data,
        &phase_cfg(recipe.finetune_steps, recipe.finetune_lr, recipe.seed.wrapping_add(2)),
        |step, a| {
            checkpoints.push(Checkpoint {
                phase: Phase::Finetune,
                step: step + 1,
                adapter: a.clone(),
            })
        },
    )?;
    Ok(CheckpointSet {
        task_id: task_id.to_string(),
        checkpoints,
        pretrain_final,
        finetune_final,
    })
}
