//! The multi-level proposal loop. A grid policy proposes strategies, each
//! proposal is executed from the same parameter snapshot and rewarded
//! against the baseline, and the policy is refit on the accepted ones.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Result, SolarError};
use crate::exec::{apply_strategy, ExecutionContext, Predictor};
use crate::kb::{
    AdaptationStrategy, Family, KbEntry, KnowledgeBase, Level, RewardRecord, StrategyPlan, TtsMethod,
};
use crate::substrate::{LoraAdapter, Sample};

pub const DEFAULT_SAMPLES_PER_ITERATION: usize = 15;
pub const DEFAULT_ITERATIONS: usize = 2;
pub const DEFAULT_MAX_CHAIN_LEN: usize = 3;
pub const REPLAY_WEIGHT: f64 = 0.5;
pub const MAX_MUTATION_TRIES: usize = 10;
pub const OPERATOR_DECAY: f64 = 0.9;
pub const OPERATOR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskContext {
    pub task_id: String,
    pub description: String,
    unlabeled: Vec<Sample>,
    pub tags: Vec<String>,
}

impl TaskContext {
    pub fn new(task_id: impl Into<String>, description: impl Into<String>, unlabeled: &[Sample], tags: Vec<String>) -> Self {
        Self {
            task_id: task_id.into(),
            description: description.into(),
            unlabeled: unlabeled.iter().map(Sample::unlabeled).collect(),
            tags,
        }
    }

    pub fn unlabeled(&self) -> &[Sample] {
        &self.unlabeled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Accuracy,
}

/// Held-out labeled data plus the baseline accuracy, fixed before any proposal.
#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub eval_split: Vec<Sample>,
    pub metric: EvalMetric,
    pub baseline_accuracy: f64,
}

impl EvalSpec {
    pub fn new(eval_split: Vec<Sample>, baseline: &Predictor) -> Result<Self> {
        let baseline_accuracy = baseline.accuracy(&eval_split)?;
        Ok(Self {
            eval_split,
            metric: EvalMetric::Accuracy,
            baseline_accuracy,
        })
    }
}

/// `r = 1` iff `adapted > baseline + threshold`; the delta is `adapted - baseline`.
pub fn compute_reward(adapted: f64, baseline: f64, threshold: f64) -> (u8, f64) {
    (u8::from(adapted > baseline + threshold), adapted - baseline)
}

/// Evaluates `predictor` on the held-out split and rewards it.
pub fn reward_predictor(eval: &EvalSpec, threshold: f64, predictor: &Predictor) -> Result<(u8, f64)> {
    let acc = predictor.accuracy(&eval.eval_split)?;
    Ok(compute_reward(acc, eval.baseline_accuracy, threshold))
}

/// `before + mu * (after - before)` on every factor; `mu = 1` returns `after`.
pub fn meta_regularize(before: &LoraAdapter, after: &LoraAdapter, mu: f64) -> Result<LoraAdapter> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(SolarError::Config(format!("meta_reg mu {mu} outside (0, 1]")));
    }
    if !before.same_shape(after) {
        return Err(SolarError::AdapterShape("meta_regularize: adapters differ in shape".into()));
    }
    let mut out = after.clone();
    for (p, q) in out.entries.values_mut().zip(before.entries.values()) {
        for (x, b) in p.a.data_mut().iter_mut().zip(q.a.data()) {
            *x = (1.0 - mu) * b + mu * *x;
        }
        for (x, b) in p.b.data_mut().iter_mut().zip(q.b.data()) {
            *x = (1.0 - mu) * b + mu * *x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationOp {
    NumericStep,
    EnumResample,
    Splice,
}

impl MutationOp {
    pub const ALL: [MutationOp; 3] = [MutationOp::NumericStep, MutationOp::EnumResample, MutationOp::Splice];
}

/// A categorical over the values of one config field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub name: String,
    pub values: Vec<Value>,
    pub counts: Vec<f64>,
}

impl FieldGrid {
    fn new(name: &str, values: Vec<Value>) -> Self {
        let counts = vec![0.0; values.len()];
        Self {
            name: name.to_string(),
            values,
            counts,
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.values.iter().all(Value::is_number)
    }

    fn is_integer(&self) -> bool {
        self.values.iter().all(Value::is_u64)
    }

    pub fn position(&self, v: &Value) -> Option<usize> {
        self.values.iter().position(|g| value_eq(g, v))
    }
}

fn value_eq(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

/// The proposal distribution: a categorical over executable families and
/// one over each field's grid, all Laplace-smoothed by `alpha` over
/// accumulated acceptance counts. Level III also keeps a weight per
/// mutation operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalPolicy {
    pub alpha: f64,
    pub family_counts: BTreeMap<Family, f64>,
    pub fields: BTreeMap<Family, Vec<FieldGrid>>,
    pub operator_weights: BTreeMap<MutationOp, f64>,
}

impl Default for ProposalPolicy {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

fn numbers(xs: &[f64]) -> Vec<Value> {
    xs.iter().map(|&x| json!(x)).collect()
}

fn integers(xs: &[u64]) -> Vec<Value> {
    xs.iter().map(|&x| json!(x)).collect()
}

const LR_GRID: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

impl ProposalPolicy {
    pub fn uniform(alpha: f64) -> Self {
        let mut fields = BTreeMap::new();
        fields.insert(
            Family::Ttt,
            vec![
                FieldGrid::new("ttl_steps", integers(&[5, 10, 25, 50, 100])),
                FieldGrid::new("learning_rate", numbers(&LR_GRID)),
                FieldGrid::new("batch_size", integers(&[2, 4, 8])),
                FieldGrid::new("shuffle_data", vec![json!(true), json!(false)]),
            ],
        );
        fields.insert(
            Family::Lora,
            vec![FieldGrid::new("lambda", numbers(&[0.0, 0.25, 0.5, 0.75, 1.0]))],
        );
        fields.insert(
            Family::Tts,
            vec![
                FieldGrid::new("num_prompt_batches", integers(&[2, 5, 10, 20])),
                FieldGrid::new("method", TtsMethod::ALL.iter().map(|m| json!(m.as_str())).collect()),
            ],
        );
        fields.insert(
            Family::Ls,
            vec![
                FieldGrid::new("times", integers(&[1, 5, 10, 25])),
                FieldGrid::new("learning_rate", numbers(&LR_GRID)),
            ],
        );
        Self {
            alpha,
            family_counts: Family::EXECUTABLE.iter().map(|&f| (f, 0.0)).collect(),
            fields,
            operator_weights: MutationOp::ALL.iter().map(|&op| (op, 1.0)).collect(),
        }
    }

    /// All mass on `strategy`, with smoothing off. Only for tests and
    /// replaying a fixed choice; values off the grid are rejected.
    pub fn point_mass(strategy: &AdaptationStrategy) -> Result<Self> {
        let mut p = Self::uniform(0.0);
        *p.family_counts.get_mut(&strategy.family).ok_or_else(|| {
            SolarError::NotExecutable(strategy.family.to_string())
        })? = 1.0;
        for grid in p.fields.get_mut(&strategy.family).expect("every executable family has grids") {
            let v = strategy
                .config
                .get(&grid.name)
                .ok_or_else(|| SolarError::Config(format!("point mass needs field {}", grid.name)))?;
            let i = grid
                .position(v)
                .ok_or_else(|| SolarError::Config(format!("{} = {v} is not on the grid", grid.name)))?;
            grid.counts[i] = 1.0;
        }
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(SolarError::Config(format!("smoothing alpha {} must be >= 0", self.alpha)));
        }
        Ok(())
    }

    fn smoothed(&self, counts: &[f64]) -> Vec<f64> {
        let total: f64 = counts.iter().sum::<f64>() + self.alpha * counts.len() as f64;
        counts.iter().map(|c| (c + self.alpha) / total).collect()
    }

    pub fn family_probs(&self) -> BTreeMap<Family, f64> {
        let counts: Vec<f64> = self.family_counts.values().copied().collect();
        self.family_counts.keys().copied().zip(self.smoothed(&counts)).collect()
    }

    pub fn field_probs(&self, family: Family, field: &str) -> Option<Vec<f64>> {
        let grid = self.grid(family, field)?;
        Some(self.smoothed(&grid.counts))
    }

    pub fn grid(&self, family: Family, field: &str) -> Option<&FieldGrid> {
        self.fields.get(&family)?.iter().find(|g| g.name == field)
    }

    pub fn operator_probs(&self) -> BTreeMap<MutationOp, f64> {
        let total: f64 = self.operator_weights.values().sum();
        self.operator_weights.iter().map(|(&op, &w)| (op, w / total)).collect()
    }

    fn draw_family(&self, allowed: &[Family], rng: &mut impl Rng) -> Result<Family> {
        let probs = self.family_probs();
        let weights: Vec<f64> = allowed.iter().map(|f| probs.get(f).copied().unwrap_or(0.0)).collect();
        Ok(allowed[weighted(&weights, rng)?])
    }

    /// Fresh draw: family then each field from its grid.
    pub fn draw_fresh(&self, allowed: &[Family], rng: &mut impl Rng) -> Result<AdaptationStrategy> {
        let family = self.draw_family(allowed, rng)?;
        let mut config = Map::new();
        for grid in &self.fields[&family] {
            let i = weighted(&self.smoothed(&grid.counts), rng)?;
            config.insert(grid.name.clone(), grid.values[i].clone());
        }
        Ok(AdaptationStrategy::new(family, config))
    }

    /// Refit on accepted plans by adding one count per accepted element to
    /// its family and to each on-grid field value.
    pub fn refit(&mut self, accepted: &[StrategyPlan]) {
        for plan in accepted {
            for s in plan.elements() {
                let Some(c) = self.family_counts.get_mut(&s.family) else { continue };
                *c += 1.0;
                for grid in self.fields.get_mut(&s.family).into_iter().flatten() {
                    if let Some(i) = s.config.get(&grid.name).and_then(|v| grid.position(v)) {
                        grid.counts[i] += 1.0;
                    }
                }
            }
        }
    }

    pub fn penalize(&mut self, op: MutationOp) {
        let w = self.operator_weights.entry(op).or_insert(1.0);
        *w = (*w * OPERATOR_DECAY).max(OPERATOR_FLOOR);
    }
}

fn weighted(weights: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| SolarError::Config(format!("cannot sample from weights {weights:?}: {e}")))?;
    Ok(dist.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Replay,
    Fresh,
    Chain,
    Mutation(MutationOp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub plan: StrategyPlan,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub level: Level,
    pub iterations: usize,
    pub threshold: f64,
    pub samples_per_iteration: usize,
    pub max_chain_len: usize,
    pub mu: f64,
}

impl LevelConfig {
    pub fn default_for(level: Level) -> Self {
        let (threshold, mu) = match level {
            Level::I | Level::II => (0.0, 1.0),
            Level::III => (0.01, 0.5),
        };
        Self {
            level,
            iterations: DEFAULT_ITERATIONS,
            threshold,
            samples_per_iteration: DEFAULT_SAMPLES_PER_ITERATION,
            max_chain_len: DEFAULT_MAX_CHAIN_LEN,
            mu,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.samples_per_iteration == 0 {
            return Err(SolarError::Config("samples_per_iteration must be positive".into()));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(SolarError::Config(format!("threshold {} must be >= 0", self.threshold)));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(SolarError::Config(format!("meta_reg mu {} outside (0, 1]", self.mu)));
        }
        if self.level != Level::I && self.max_chain_len < 2 {
            return Err(SolarError::Config("max_chain_len must be at least 2 above level I".into()));
        }
        Ok(())
    }
}

/// Checks each level and that thresholds do not decrease with level.
pub fn check_levels(levels: &[LevelConfig]) -> Result<()> {
    for w in levels.windows(2) {
        if w[1].level < w[0].level {
            return Err(SolarError::Config("levels must run in order".into()));
        }
        if w[1].threshold < w[0].threshold {
            return Err(SolarError::Config(format!(
                "threshold of level {} ({}) is below level {} ({})",
                w[1].level, w[1].threshold, w[0].level, w[0].threshold
            )));
        }
    }
    levels.iter().try_for_each(LevelConfig::check)
}

const PARAM_FAMILIES: [Family; 2] = [Family::Ttt, Family::Lora];

fn draw_single(
    policy: &ProposalPolicy,
    kb: &KnowledgeBase,
    tags: &[String],
    level: Level,
    allowed: &[Family],
    rng: &mut impl Rng,
) -> Result<(AdaptationStrategy, Origin)> {
    if rng.random::<f64>() < REPLAY_WEIGHT {
        let probs = policy.family_probs();
        let ranked: Vec<&AdaptationStrategy> = kb
            .query(tags, level)?
            .into_iter()
            .filter_map(|e| match &e.plan {
                StrategyPlan::Single(s) if allowed.contains(&s.family) => Some(s),
                _ => None,
            })
            .collect();
        let weights: Vec<f64> = ranked
            .iter()
            .enumerate()
            .map(|(rank, s)| probs.get(&s.family).copied().unwrap_or(0.0) / (rank + 1) as f64)
            .collect();
        if weights.iter().any(|&w| w > 0.0) {
            return Ok((ranked[weighted(&weights, rng)?].clone(), Origin::Replay));
        }
    }
    Ok((policy.draw_fresh(allowed, rng)?, Origin::Fresh))
}

fn draw_chain(
    policy: &ProposalPolicy,
    kb: &KnowledgeBase,
    tags: &[String],
    level: Level,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<StrategyPlan> {
    let len = rng.random_range(2..=max_len.max(2));
    let mut chain = Vec::with_capacity(len);
    for _ in 0..len - 1 {
        chain.push(draw_single(policy, kb, tags, level, &PARAM_FAMILIES, rng)?.0);
    }
    chain.push(draw_single(policy, kb, tags, level, &Family::EXECUTABLE, rng)?.0);
    Ok(StrategyPlan::Chain(chain))
}

/// One proposal for `cfg.level`.
pub fn propose(
    policy: &ProposalPolicy,
    task: &TaskContext,
    cfg: &LevelConfig,
    kb: &KnowledgeBase,
    rng: &mut impl Rng,
) -> Result<Proposal> {
    match cfg.level {
        Level::I => {
            let (s, origin) = draw_single(policy, kb, &task.tags, Level::I, &Family::EXECUTABLE, rng)?;
            Ok(Proposal {
                plan: StrategyPlan::Single(s),
                origin,
            })
        }
        Level::II => Ok(Proposal {
            plan: draw_chain(policy, kb, &task.tags, Level::II, cfg.max_chain_len, rng)?,
            origin: Origin::Chain,
        }),
        Level::III => propose_mutation(policy, task, cfg, kb, rng),
    }
}

fn propose_mutation(
    policy: &ProposalPolicy,
    task: &TaskContext,
    cfg: &LevelConfig,
    kb: &KnowledgeBase,
    rng: &mut impl Rng,
) -> Result<Proposal> {
    let op_probs = policy.operator_probs();
    let ops: Vec<MutationOp> = op_probs.keys().copied().collect();
    let op_weights: Vec<f64> = op_probs.values().copied().collect();
    for _ in 0..MAX_MUTATION_TRIES {
        let base = if rng.random::<bool>() {
            StrategyPlan::Single(draw_single(policy, kb, &task.tags, Level::III, &Family::EXECUTABLE, rng)?.0)
        } else {
            draw_chain(policy, kb, &task.tags, Level::III, cfg.max_chain_len, rng)?
        };
        let op = ops[weighted(&op_weights, rng)?];
        let plan = mutate(policy, &base, op, kb, &task.tags, cfg.max_chain_len, rng)?;
        if plan.validate().is_ok() {
            return Ok(Proposal {
                plan,
                origin: Origin::Mutation(op),
            });
        }
    }
    Err(SolarError::ProposalExhausted(MAX_MUTATION_TRIES))
}

/// Applies one mutation operator. The result is not validated here.
pub fn mutate(
    policy: &ProposalPolicy,
    base: &StrategyPlan,
    op: MutationOp,
    kb: &KnowledgeBase,
    tags: &[String],
    max_chain_len: usize,
    rng: &mut impl Rng,
) -> Result<StrategyPlan> {
    let mut elems = base.elements().to_vec();
    let idx = rng.random_range(0..elems.len());
    let last = elems.len() - 1;
    match op {
        MutationOp::NumericStep => {
            let target = &mut elems[idx];
            let grids: Vec<&FieldGrid> = policy.fields[&target.family].iter().filter(|g| g.is_numeric()).collect();
            if let Some(grid) = grids.choose(rng) {
                if let Some(current) = target.config.get(&grid.name) {
                    let stepped = step_value(grid, current, rng.random::<bool>());
                    target.config.insert(grid.name.clone(), stepped);
                }
            }
        }
        MutationOp::EnumResample => {
            let family = elems[idx].family;
            let grids: Vec<&FieldGrid> = policy.fields[&family].iter().filter(|g| !g.is_numeric()).collect();
            match grids.choose(rng) {
                Some(grid) => {
                    let current = elems[idx].config.get(&grid.name).cloned().unwrap_or(Value::Null);
                    let others: Vec<&Value> = grid.values.iter().filter(|v| !value_eq(v, &current)).collect();
                    if let Some(v) = others.choose(rng) {
                        elems[idx].config.insert(grid.name.clone(), (*v).clone());
                    }
                }
                None => {
                    // The family is the only categorical left to resample.
                    let pool: &[Family] = if idx == last { &Family::EXECUTABLE } else { &PARAM_FAMILIES };
                    let allowed: Vec<Family> = pool.iter().copied().filter(|&f| f != family).collect();
                    elems[idx] = policy.draw_fresh(&allowed, rng)?;
                }
            }
        }
        MutationOp::Splice => {
            let allowed: Vec<Family> = PARAM_FAMILIES.iter().copied().filter(|&f| f != elems[idx].family).collect();
            let (other, _) = draw_single(policy, kb, tags, Level::III, &allowed, rng)?;
            let max_len = max_chain_len.max(2);
            if elems.len() < max_len {
                let end = if elems[last].family.is_prediction_time() { last } else { last + 1 };
                elems.insert(rng.random_range(0..=end), other);
            } else {
                elems[rng.random_range(0..last)] = other;
            }
        }
    }
    Ok(if elems.len() == 1 {
        StrategyPlan::Single(elems.pop().expect("one element"))
    } else {
        StrategyPlan::Chain(elems)
    })
}

/// Moves a numeric value one grid step up or down. Past either end of the
/// grid the step repeats the outermost ratio (positive grids) or spacing.
pub fn step_value(grid: &FieldGrid, current: &Value, up: bool) -> Value {
    let xs: Vec<f64> = grid.values.iter().filter_map(Value::as_f64).collect();
    let Some(x) = current.as_f64() else { return current.clone() };
    let n = xs.len();
    let geometric = xs.iter().all(|&v| v > 0.0);
    let tol = 1e-12 * x.abs().max(1e-300);
    let next = if up {
        xs.iter().copied().find(|&v| v > x + tol).unwrap_or_else(|| {
            if geometric {
                x * (xs[n - 1] / xs[n - 2])
            } else {
                x + (xs[n - 1] - xs[n - 2])
            }
        })
    } else {
        xs.iter().rev().copied().find(|&v| v < x - tol).unwrap_or_else(|| {
            if geometric {
                x / (xs[1] / xs[0])
            } else {
                x - (xs[1] - xs[0])
            }
        })
    };
    if grid.is_integer() {
        let r = next.round();
        if r >= 0.0 {
            json!(r as u64)
        } else {
            json!(r as i64)
        }
    } else {
        json!(next)
    }
}

/// One reward-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub iter: usize,
    pub level: Level,
    /// The proposed plan, or null when no proposal could be drawn.
    pub strategy: Value,
    pub reward: u8,
    pub delta: f64,
    pub params_digest: String,
    pub cause: Option<String>,
}

impl RunRecord {
    pub fn plan(&self) -> Result<Option<StrategyPlan>> {
        match &self.strategy {
            Value::Null => Ok(None),
            v => StrategyPlan::from_value(v).map(Some),
        }
    }
}

pub fn write_run_log(records: &[RunRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_run_log(r: impl BufRead) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SolarError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// The KB update for one log line: accepted plans are inserted (merging on
/// a known id); rejected plans only extend the history of a known entry.
pub fn apply_record(kb: &mut KnowledgeBase, record: &RunRecord, task: &TaskContext) -> Result<()> {
    let Some(plan) = record.plan()? else { return Ok(()) };
    let reward = RewardRecord {
        task_id: task.task_id.clone(),
        reward: record.reward,
        accuracy_delta: record.delta,
    };
    if record.reward == 1 {
        kb.insert(KbEntry::new(plan, task.tags.clone(), record.level).with_reward(reward))?;
    } else {
        kb.record_reward(&plan.id(), reward);
    }
    Ok(())
}

/// Rebuilds the KB a run would have produced from its log.
pub fn replay_log(initial: &KnowledgeBase, log: &[RunRecord], task: &TaskContext) -> Result<KnowledgeBase> {
    let mut kb = initial.clone();
    for r in log {
        apply_record(&mut kb, r, task)?;
    }
    Ok(kb)
}

pub struct Evaluated {
    pub accuracy: f64,
    pub predictor: Option<Predictor>,
}

/// Executes a plan from a fixed parameter snapshot.
pub trait StrategyRunner: Sync {
    /// Digest of the snapshot every proposal starts from.
    fn params_digest(&self) -> String;

    fn evaluate(&self, plan: &StrategyPlan, mu: f64, eval: &EvalSpec) -> Result<Evaluated>;
}

/// Runs plans with the real executors against an execution context.
pub struct SolarRunner {
    pub ctx: ExecutionContext,
}

impl SolarRunner {
    pub fn new(ctx: ExecutionContext) -> Self {
        Self { ctx }
    }

    pub fn baseline(&self) -> Predictor {
        Predictor::plain(self.ctx.model.clone(), self.ctx.adapter.clone())
    }
}

impl StrategyRunner for SolarRunner {
    fn params_digest(&self) -> String {
        self.ctx.adapter.digest()
    }

    fn evaluate(&self, plan: &StrategyPlan, mu: f64, eval: &EvalSpec) -> Result<Evaluated> {
        let mut predictor = apply_strategy(&self.ctx, plan)?;
        if mu < 1.0 {
            predictor = predictor.map_adapters(|a| meta_regularize(&self.ctx.adapter, a, mu))?;
        }
        Ok(Evaluated {
            accuracy: predictor.accuracy(&eval.eval_split)?,
            predictor: Some(predictor),
        })
    }
}

/// Best result so far. Starts at the baseline, which has no plan.
#[derive(Debug, Clone)]
pub struct Best {
    pub accuracy: f64,
    pub plan: Option<StrategyPlan>,
    pub level: Option<Level>,
    pub predictor: Option<Predictor>,
}

impl Best {
    pub fn baseline(eval: &EvalSpec) -> Self {
        Self {
            accuracy: eval.baseline_accuracy,
            plan: None,
            level: None,
            predictor: None,
        }
    }

    fn offer(&mut self, accuracy: f64, plan: &StrategyPlan, level: Level, predictor: Option<Predictor>) {
        if accuracy > self.accuracy {
            *self = Self {
                accuracy,
                plan: Some(plan.clone()),
                level: Some(level),
                predictor,
            };
        }
    }
}

pub struct IterationOutcome {
    pub records: Vec<RunRecord>,
    pub accepted: Vec<StrategyPlan>,
    pub proposals: Vec<Option<Proposal>>,
}

/// Draws every proposal from the current policy, evaluates them all from
/// the same snapshot, then refits on those with reward 1.
#[allow(clippy::too_many_arguments)]
pub fn restem_iteration(
    policy: &mut ProposalPolicy,
    task: &TaskContext,
    eval: &EvalSpec,
    cfg: &LevelConfig,
    kb: &KnowledgeBase,
    runner: &impl StrategyRunner,
    iter: usize,
    best: &mut Best,
    rng: &mut impl Rng,
) -> IterationOutcome {
    let digest = runner.params_digest();
    let drawn: Vec<Result<Proposal>> = (0..cfg.samples_per_iteration)
        .map(|_| propose(policy, task, cfg, kb, rng))
        .collect();
    let results: Vec<Option<Result<Evaluated>>> = std::thread::scope(|s| {
        let handles: Vec<_> = drawn
            .iter()
            .map(|p| {
                p.as_ref()
                    .ok()
                    .map(|p| s.spawn(|| runner.evaluate(&p.plan, cfg.mu, eval)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.map(|h| h.join().expect("evaluation thread panicked")))
            .collect()
    });

    let mut records = Vec::with_capacity(drawn.len());
    let mut accepted = Vec::new();
    let mut proposals = Vec::with_capacity(drawn.len());
    for (p, res) in drawn.into_iter().zip(results) {
        let mut record = RunRecord {
            iter,
            level: cfg.level,
            strategy: Value::Null,
            reward: 0,
            delta: 0.0,
            params_digest: digest.clone(),
            cause: None,
        };
        match (p, res) {
            (Err(e), _) => {
                record.cause = Some(e.to_string());
                proposals.push(None);
            }
            (Ok(p), res) => {
                record.strategy = p.plan.to_value();
                match res.expect("evaluated when proposed") {
                    Ok(ev) => {
                        let (r, d) = compute_reward(ev.accuracy, eval.baseline_accuracy, cfg.threshold);
                        record.reward = r;
                        record.delta = d;
                        best.offer(ev.accuracy, &p.plan, cfg.level, ev.predictor);
                    }
                    Err(e) => record.cause = Some(e.to_string()),
                }
                if record.reward == 1 {
                    accepted.push(p.plan.clone());
                } else if let Origin::Mutation(op) = p.origin {
                    policy.penalize(op);
                }
                proposals.push(Some(p));
            }
        }
        records.push(record);
    }
    policy.refit(&accepted);
    IterationOutcome {
        records,
        accepted,
        proposals,
    }
}

pub struct LevelOutcome {
    pub best: Best,
    pub log: Vec<RunRecord>,
}

/// `cfg.iterations` ReST-EM iterations at one level, updating `kb` and
/// `policy` in place. Levels I and II need a nonempty KB.
#[allow(clippy::too_many_arguments)]
pub fn run_level(
    cfg: &LevelConfig,
    task: &TaskContext,
    eval: &EvalSpec,
    kb: &mut KnowledgeBase,
    policy: &mut ProposalPolicy,
    runner: &impl StrategyRunner,
    best: Best,
    rng: &mut impl Rng,
) -> Result<LevelOutcome> {
    cfg.check()?;
    policy.check()?;
    if cfg.level != Level::III && kb.is_empty() {
        return Err(SolarError::EmptyKb);
    }
    let mut best = best;
    let mut log = Vec::with_capacity(cfg.iterations * cfg.samples_per_iteration);
    for iter in 0..cfg.iterations {
        let out = restem_iteration(policy, task, eval, cfg, kb, runner, iter, &mut best, rng);
        for r in &out.records {
            apply_record(kb, r, task)?;
        }
        log.extend(out.records);
    }
    Ok(LevelOutcome { best, log })
}

/// Runs the given levels in order, threading the KB, policy and best result.
pub fn run_levels(
    levels: &[LevelConfig],
    task: &TaskContext,
    eval: &EvalSpec,
    kb: &mut KnowledgeBase,
    policy: &mut ProposalPolicy,
    runner: &impl StrategyRunner,
    rng: &mut impl Rng,
) -> Result<LevelOutcome> {
    check_levels(levels)?;
    let mut best = Best::baseline(eval);
    let mut log = Vec::new();
    for cfg in levels {
        let out = run_level(cfg, task, eval, kb, policy, runner, best, rng)?;
        best = out.best;
        log.extend(out.log);
    }
    Ok(LevelOutcome { best, log })
}
