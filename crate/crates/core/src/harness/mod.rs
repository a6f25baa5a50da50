//! Experiment plumbing: synthetic drifted tasks, checkpoint collection,
//! end-to-end runs against baselines, and metrics reporting.

mod checkpoints;
mod experiment;
mod metrics;
mod task;

pub use checkpoints::{collect_checkpoints, Checkpoint, CheckpointRecipe, CheckpointSet, Phase};
pub use experiment::{
    ablation_batches, adaptation_prompts, generate_adapter, run_dir, run_experiment, run_solar, run_task, task_seed,
    train_generator, AblationSettings, Chosen, DecoderSettings, ExperimentConfig, LevelSettings, SolarOutcome, TaskRun,
};
pub use metrics::{
    read_metrics, summarize, write_metrics, Delta, MetricsRow, Summary, METHOD_BASELINE, METHOD_GENERATED,
    METHOD_SOLAR, METRICS_HEADER,
};
pub use task::{
    gen_task, Drift, Perturbation, Rule, Split, SplitRole, SplitSizes, SyntheticTaskSpec, TaskBundle, DEFAULT_UNLABELED,
    PROMPT_LEN,
};

#[cfg(test)]
mod tests;
