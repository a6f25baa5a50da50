use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoints::{collect_checkpoints, CheckpointRecipe, CheckpointSet};
use super::metrics::{write_metrics, MetricsRow, METHOD_BASELINE, METHOD_GENERATED, METHOD_SOLAR};
use super::task::{gen_task, Split, SyntheticTaskSpec, TaskBundle};
use crate::codec::{tokenize_adapter, TokenGrid, TokenizerConfig};
use crate::decoder::{pair_dataset, sample_adapter, train_decoder, DecoderParams, DecoderTrainConfig};
use crate::embedding::embed;
use crate::error::{Result, SolarError};
use crate::exec::{ExecutionContext, Predictor};
use crate::kb::{seed_kb, KnowledgeBase, Level, StrategyPlan};
use crate::meta::{run_levels, write_run_log, EvalSpec, LevelConfig, ProposalPolicy, RunRecord, SolarRunner, TaskContext};
use crate::select::{select_prompts, SelectionConfig};
use crate::substrate::{flatten_adapter, LoraAdapter, Sample, TaskModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSettings {
    /// Prompt-checkpoint pairs drawn for training.
    pub pairs: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Prompts per training batch.
    pub prompt_batch_size: usize,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        Self {
            pairs: 16,
            epochs: 10,
            learning_rate: DecoderTrainConfig::default().learning_rate,
            batch_size: DecoderTrainConfig::default().batch_size,
            prompt_batch_size: 4,
        }
    }
}

/// One level of the meta-loop. Unset fields take the level's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSettings {
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_iteration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_chain_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
}

impl LevelSettings {
    pub fn new(level: Level) -> Self {
        Self {
            level,
            iterations: None,
            threshold: None,
            samples_per_iteration: None,
            max_chain_len: None,
            mu: None,
        }
    }

    pub fn resolve(&self) -> LevelConfig {
        let d = LevelConfig::default_for(self.level);
        LevelConfig {
            level: self.level,
            iterations: self.iterations.unwrap_or(d.iterations),
            threshold: self.threshold.unwrap_or(d.threshold),
            samples_per_iteration: self.samples_per_iteration.unwrap_or(d.samples_per_iteration),
            max_chain_len: self.max_chain_len.unwrap_or(d.max_chain_len),
            mu: self.mu.unwrap_or(d.mu),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub enabled: bool,
    /// Prompts kept by each arm of the comparison.
    pub batch_size: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tasks: Vec<SyntheticTaskSpec>,
    pub seeds: Vec<u64>,
    pub model_seed: u64,
    pub paper_scale: bool,
    pub checkpoints: CheckpointRecipe,
    pub decoder: DecoderSettings,
    pub levels: Vec<LevelSettings>,
    pub selection: SelectionConfig,
    pub ablation: AblationSettings,
    /// Record wall-clock milliseconds. Off by default so metrics files are
    /// byte-identical across reruns.
    pub timing: bool,
    /// Initial knowledge base; the built-in seed KB when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kb: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            seeds: vec![0],
            model_seed: 0,
            paper_scale: false,
            checkpoints: CheckpointRecipe::desk(),
            decoder: DecoderSettings::default(),
            levels: vec![LevelSettings::new(Level::I)],
            selection: SelectionConfig::default(),
            ablation: AblationSettings::default(),
            timing: false,
            kb: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SolarError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SolarError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SolarError::Config(e.to_string()))
    }

    pub fn level_configs(&self) -> Vec<LevelConfig> {
        self.levels.iter().map(LevelSettings::resolve).collect()
    }

    /// The checkpoint recipe for one run seed. Full scale swaps in the
    /// reference rates and sizes but keeps the snapshot policy.
    pub fn recipe(&self, seed: u64) -> CheckpointRecipe {
        let base = if self.paper_scale {
            CheckpointRecipe {
                finetune_only: self.checkpoints.finetune_only,
                ..CheckpointRecipe::full_scale()
            }
        } else {
            self.checkpoints
        };
        base.with_seed(seed)
    }

    pub fn model(&self) -> Arc<TaskModel> {
        Arc::new(TaskModel::desk(self.model_seed))
    }

    pub fn initial_kb(&self) -> Result<KnowledgeBase> {
        match &self.kb {
            None => Ok(seed_kb()),
            Some(p) => {
                let f = fs::File::open(p)
                    .map_err(|e| SolarError::Config(format!("cannot open knowledge base {}: {e}", p.display())))?;
                KnowledgeBase::load(BufReader::new(f))
            }
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(SolarError::Config("no tasks configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(SolarError::Config("no seeds configured".into()));
        }
        for t in &self.tasks {
            t.check()?;
        }
        let mut ids: Vec<&str> = self.tasks.iter().map(|t| t.task_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SolarError::Config("task ids must be unique".into()));
        }
        if self.decoder.pairs == 0 || self.decoder.prompt_batch_size == 0 {
            return Err(SolarError::Config("decoder pairs and prompt_batch_size must be positive".into()));
        }
        crate::meta::check_levels(&self.level_configs())?;
        if self.ablation.enabled && self.ablation.batch_size < 2 {
            return Err(SolarError::Config("ablation batch_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Seed for the data of `spec` under run seed `seed`.
pub fn task_seed(spec: &SyntheticTaskSpec, seed: u64) -> u64 {
    spec.seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Prompts from `split` for an adaptation path. Anything but the unlabeled
/// split, or any sample still carrying a label, is refused.
pub fn adaptation_prompts(split: &Split) -> Result<&[Sample]> {
    if !split.role.adaptation_visible() {
        return Err(SolarError::Config(format!("{:?} split may not reach adaptation", split.role)));
    }
    if let Some(i) = split.samples.iter().position(|s| s.label.is_some()) {
        return Err(SolarError::Config(format!("unlabeled split sample {i} carries a label")));
    }
    Ok(&split.samples)
}

/// Tokenizes the checkpoints and trains a decoder on prompt batches from the
/// labeled train split.
pub fn train_generator(bundle: &TaskBundle, set: &CheckpointSet, settings: &DecoderSettings, seed: u64) -> Result<DecoderParams> {
    let codec = TokenizerConfig::desk();
    let grids: Vec<TokenGrid> = set
        .checkpoints
        .iter()
        .map(|c| tokenize_adapter(&c.adapter, &codec).map(|(g, _)| g))
        .collect::<Result<_>>()?;
    let (_, layout) = flatten_adapter(&set.finetune_final);
    let batches: Vec<Vec<Sample>> = bundle
        .train
        .samples
        .chunks_exact(settings.prompt_batch_size)
        .map(|c| c.iter().map(Sample::unlabeled).collect())
        .collect();
    let pairs = pair_dataset(&batches, &grids, &bundle.spec.task_id, settings.pairs, seed)?;
    let init = DecoderParams::desk(codec, layout, seed)?;
    let train_cfg = DecoderTrainConfig {
        epochs: settings.epochs,
        learning_rate: settings.learning_rate,
        batch_size: settings.batch_size,
        seed,
    };
    let (params, _) = train_decoder(&pairs, &train_cfg, init)?;
    Ok(params)
}

pub fn generate_adapter(params: &DecoderParams, prompts: &[Sample]) -> Result<LoraAdapter> {
    sample_adapter(prompts, params, &params.codec, &params.layout)
}

/// Which candidate the final SOLAR predictor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chosen {
    AdapterFree,
    Generated,
    Meta,
}

pub struct SolarOutcome {
    pub predictor: Predictor,
    pub chosen: Chosen,
    pub plan: Option<StrategyPlan>,
    pub adapter_free_eval: f64,
    pub generated_eval: f64,
    pub eval_accuracy: f64,
    pub log: Vec<RunRecord>,
}

/// Runs the configured meta-loop levels on top of the generated adapter and
/// keeps whichever of adapter-free, generated or meta-best scores highest on
/// the eval split (earliest wins ties).
#[allow(clippy::too_many_arguments)]
pub fn run_solar(
    model: &Arc<TaskModel>,
    generator: &Arc<DecoderParams>,
    bundle: &TaskBundle,
    prompts: &[Sample],
    levels: &[LevelConfig],
    kb: &mut KnowledgeBase,
    seed: u64,
) -> Result<SolarOutcome> {
    let spec = &bundle.spec;
    let generated = generate_adapter(generator, prompts)?;
    let ctx = ExecutionContext::new(model.clone(), generated, prompts, seed).with_generator(generator.clone());
    let runner = SolarRunner::new(ctx);
    let eval = EvalSpec::new(bundle.eval.samples.clone(), &runner.baseline())?;
    let task = TaskContext::new(spec.task_id.clone(), spec.description(), prompts, spec.tags());
    let mut policy = ProposalPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = run_levels(levels, &task, &eval, kb, &mut policy, &runner, &mut rng)?;

    let free = Predictor::plain(model.clone(), runner.ctx.adapter.zeros_like());
    let free_eval = free.accuracy(&bundle.eval.samples)?;
    let mut pick = (Chosen::AdapterFree, free_eval, free, None);
    if eval.baseline_accuracy > pick.1 {
        pick = (Chosen::Generated, eval.baseline_accuracy, runner.baseline(), None);
    }
    if let (Some(plan), Some(pred)) = (out.best.plan, out.best.predictor) {
        if out.best.accuracy > pick.1 {
            pick = (Chosen::Meta, out.best.accuracy, pred, Some(plan));
        }
    }
    Ok(SolarOutcome {
        chosen: pick.0,
        eval_accuracy: pick.1,
        predictor: pick.2,
        plan: pick.3,
        adapter_free_eval: free_eval,
        generated_eval: eval.baseline_accuracy,
        log: out.log,
    })
}

/// Everything one (task, seed) run produced.
pub struct TaskRun {
    pub task_id: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    /// Eval-split accuracy of the adapter-free model and of the final SOLAR
    /// predictor, the pair the stability guard compares.
    pub baseline_eval: f64,
    pub solar_eval: f64,
    pub logs: Vec<(String, Vec<RunRecord>)>,
    pub kb: KnowledgeBase,
}

fn elapsed_ms(start: Instant, timing: bool) -> u64 {
    if timing {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// Generates the task, collects checkpoints, trains the generator and
/// produces the baseline, generated and SOLAR rows (plus the paired
/// ablation rows when enabled).
pub fn run_task(cfg: &ExperimentConfig, spec: &SyntheticTaskSpec, seed: u64, initial_kb: &KnowledgeBase) -> Result<TaskRun> {
    let model = cfg.model();
    let spec = SyntheticTaskSpec {
        seed: task_seed(spec, seed),
        ..spec.clone()
    };
    let bundle = gen_task(&spec)?;
    let set = collect_checkpoints(&model, &spec.task_id, &bundle.train.samples, &cfg.recipe(seed))?;
    let generator = Arc::new(train_generator(&bundle, &set, &cfg.decoder, seed)?);
    let prompts = adaptation_prompts(&bundle.unlabeled)?;
    let levels = cfg.level_configs();
    let row = |method: &str, accuracy: f64, wall_ms: u64, digest: Option<String>| MetricsRow {
        task_id: spec.task_id.clone(),
        method: method.to_string(),
        accuracy,
        wall_ms,
        seed,
        strategy_digest: digest,
    };
    let mut rows = Vec::new();

    let t = Instant::now();
    let generated_adapter = generate_adapter(&generator, prompts)?;
    let free = Predictor::plain(model.clone(), generated_adapter.zeros_like());
    rows.push(row(METHOD_BASELINE, free.accuracy(&bundle.test.samples)?, elapsed_ms(t, cfg.timing), None));

    let t = Instant::now();
    let generated = Predictor::plain(model.clone(), generated_adapter);
    rows.push(row(METHOD_GENERATED, generated.accuracy(&bundle.test.samples)?, elapsed_ms(t, cfg.timing), None));

    let t = Instant::now();
    let mut kb = initial_kb.clone();
    let solar = run_solar(&model, &generator, &bundle, prompts, &levels, &mut kb, seed)?;
    let digest = solar.plan.as_ref().map(StrategyPlan::id);
    rows.push(row(METHOD_SOLAR, solar.predictor.accuracy(&bundle.test.samples)?, elapsed_ms(t, cfg.timing), digest));
    let mut logs = vec![("run_log".to_string(), solar.log)];

    if cfg.ablation.enabled {
        for (arm, batch) in ablation_batches(prompts, &generator, &cfg.selection, cfg.ablation.batch_size, seed)? {
            let t = Instant::now();
            let g = Predictor::plain(model.clone(), generate_adapter(&generator, &batch)?);
            rows.push(row(&format!("{METHOD_GENERATED}_{arm}"), g.accuracy(&bundle.test.samples)?, elapsed_ms(t, cfg.timing), None));

            let t = Instant::now();
            let mut arm_kb = initial_kb.clone();
            let out = run_solar(&model, &generator, &bundle, &batch, &levels, &mut arm_kb, seed)?;
            let digest = out.plan.as_ref().map(StrategyPlan::id);
            rows.push(row(
                &format!("{METHOD_SOLAR}_{arm}"),
                out.predictor.accuracy(&bundle.test.samples)?,
                elapsed_ms(t, cfg.timing),
                digest,
            ));
            logs.push((format!("run_log_{arm}"), out.log));
        }
    }

    Ok(TaskRun {
        task_id: spec.task_id.clone(),
        seed,
        rows,
        baseline_eval: solar.adapter_free_eval,
        solar_eval: solar.eval_accuracy,
        logs,
        kb,
    })
}

/// The two arms of the prompt-batch ablation: influence-selected and
/// uniformly random batches of `size` prompts from the same pool.
pub fn ablation_batches(
    pool: &[Sample],
    generator: &DecoderParams,
    selection: &SelectionConfig,
    size: usize,
    seed: u64,
) -> Result<[(&'static str, Vec<Sample>); 2]> {
    if size > pool.len() {
        return Err(SolarError::InsufficientPrompts {
            needed: size,
            available: pool.len(),
        });
    }
    let embeddings: Vec<Vec<f64>> = pool
        .iter()
        .map(|s| embed(&s.prompt_text, &generator.embedder).map(|e| e.vector))
        .collect::<Result<_>>()?;
    let sel_cfg = SelectionConfig {
        target_size: size,
        seed,
        ..selection.clone()
    };
    let influence: Vec<Sample> = select_prompts(&embeddings, &sel_cfg)?.into_iter().map(|i| pool[i].clone()).collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let random: Vec<Sample> = order[..size].iter().map(|&i| pool[i].clone()).collect();
    Ok([("influence", influence), ("random", random)])
}

pub fn run_dir(out: &Path, task_id: &str, seed: u64) -> PathBuf {
    out.join("runs").join(task_id).join(format!("seed-{seed}"))
}

fn persist(run: &TaskRun, out: &Path) -> Result<()> {
    let dir = run_dir(out, &run.task_id, run.seed);
    fs::create_dir_all(&dir)?;
    for (name, log) in &run.logs {
        let mut buf = Vec::new();
        write_run_log(log, &mut buf)?;
        fs::write(dir.join(format!("{name}.jsonl")), buf)?;
    }
    let mut buf = Vec::new();
    run.kb.save(&mut buf)?;
    fs::write(dir.join("kb.jsonl"), buf)?;
    Ok(())
}

/// Runs every (task, seed) pair concurrently. Rows come back ordered by
/// task then seed. With `out`, writes `metrics.csv` and one directory of
/// run logs per pair.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<TaskRun>> {
    cfg.check()?;
    let kb = cfg.initial_kb()?;
    let jobs: Vec<(&SyntheticTaskSpec, u64)> =
        cfg.tasks.iter().flat_map(|t| cfg.seeds.iter().map(move |&s| (t, s))).collect();
    let runs: Vec<Result<TaskRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(spec, seed)| {
                let kb = &kb;
                s.spawn(move || run_task(cfg, spec, seed, kb))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("task run panicked")).collect()
    });
    let runs: Vec<TaskRun> = runs.into_iter().collect::<Result<_>>()?;
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        for r in &runs {
            persist(r, out)?;
        }
        let rows: Vec<MetricsRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf)?;
        fs::write(out.join("metrics.csv"), buf)?;
    }
    Ok(runs)
}
