use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolarError};
use crate::substrate::Sample;

/// Words per prompt.
pub const PROMPT_LEN: usize = 4;
pub const DEFAULT_UNLABELED: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// One topic keyword among filler words; answer names that topic.
    KeywordMatch,
    /// Answer is the number of odd-indexed words, modulo the choice count.
    Parity,
    /// Two topic keywords; answer names the one that comes first.
    OrderSensitive,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::KeywordMatch => "keyword-match",
            Rule::Parity => "parity",
            Rule::OrderSensitive => "order-sensitive",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A change to the answer mapping, applied to the outcome index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// `o → (o + by) mod C`
    ShiftLabels { by: usize },
    /// `o → π(o)` for a seeded permutation `π` that is never the identity.
    RemapTopics { seed: u64 },
}

impl Perturbation {
    fn apply(&self, outcome: usize, num_outcomes: usize) -> usize {
        match *self {
            Perturbation::ShiftLabels { by } => (outcome + by) % num_outcomes,
            Perturbation::RemapTopics { seed } => remap(seed, num_outcomes)[outcome],
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Perturbation::ShiftLabels { .. } => "shift_labels",
            Perturbation::RemapTopics { .. } => "remap_topics",
        }
    }
}

fn remap(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    if p.iter().enumerate().all(|(i, &v)| i == v) {
        p.rotate_left(1);
    }
    p
}

/// A perturbation that takes effect from training-stream position `step`.
/// Evaluation splits come after the stream and see every drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Drift {
    pub step: usize,
    #[serde(flatten)]
    pub perturbation: Perturbation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub eval: usize,
    pub test: usize,
    pub unlabeled: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            eval: 200,
            test: 200,
            unlabeled: DEFAULT_UNLABELED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_choices")]
    pub num_choices: usize,
    pub rule: Rule,
    #[serde(default)]
    pub drift: Vec<Drift>,
    #[serde(default)]
    pub sizes: SplitSizes,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> usize {
    24
}

fn default_choices() -> usize {
    4
}

impl SyntheticTaskSpec {
    pub fn new(task_id: impl Into<String>, rule: Rule, seed: u64) -> Self {
        Self {
            task_id: task_id.into(),
            vocab_size: default_vocab(),
            num_choices: default_choices(),
            rule,
            drift: Vec::new(),
            sizes: SplitSizes::default(),
            seed,
        }
    }

    pub fn with_drift(mut self, drift: Vec<Drift>) -> Self {
        self.drift = drift;
        self
    }

    pub fn with_sizes(mut self, sizes: SplitSizes) -> Self {
        self.sizes = sizes;
        self
    }

    fn keywords(&self) -> usize {
        self.num_choices
    }

    /// Distinct prompts the generator can produce (saturating).
    pub fn capacity(&self) -> f64 {
        let v = self.vocab_size as f64;
        let k = self.keywords() as f64;
        let fillers = v - k;
        let l = PROMPT_LEN as i32;
        match self.rule {
            Rule::KeywordMatch => k * PROMPT_LEN as f64 * fillers.powi(l - 1),
            Rule::Parity => v.powi(l),
            Rule::OrderSensitive => {
                k * (k - 1.0) * (PROMPT_LEN * (PROMPT_LEN - 1) / 2) as f64 * fillers.powi(l - 2)
            }
        }
    }

    pub fn total_size(&self) -> usize {
        let s = &self.sizes;
        s.train + 2 * s.eval + s.test + s.unlabeled
    }

    pub fn check(&self) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(SolarError::Spec("task_id is empty".into()));
        }
        if self.num_choices < 2 {
            return Err(SolarError::Spec(format!("num_choices {} must be at least 2", self.num_choices)));
        }
        if self.vocab_size < self.keywords() + 2 {
            return Err(SolarError::Spec(format!(
                "vocab_size {} leaves fewer than 2 filler words for {} choices",
                self.vocab_size, self.num_choices
            )));
        }
        let s = &self.sizes;
        if s.train == 0 || s.eval == 0 || s.test == 0 || s.unlabeled == 0 {
            return Err(SolarError::Spec("every split size must be positive".into()));
        }
        if self.total_size() as f64 > 0.5 * self.capacity() {
            return Err(SolarError::Spec(format!(
                "{} samples requested but the generator can only produce about {:.0} distinct prompts",
                self.total_size(),
                self.capacity()
            )));
        }
        Ok(())
    }

    /// Outcome after every perturbation active at `pos`.
    fn drifted(&self, outcome: usize, pos: StreamPos) -> usize {
        self.drift
            .iter()
            .filter(|d| match pos {
                StreamPos::Before => false,
                StreamPos::At(s) => d.step <= s,
                StreamPos::After => true,
            })
            .fold(outcome, |o, d| d.perturbation.apply(o, self.num_choices))
    }

    pub fn tags(&self) -> Vec<String> {
        let mut tags = vec![self.rule.as_str().to_string()];
        for d in &self.drift {
            let t = d.perturbation.tag().to_string();
            if !tags.contains(&t) {
                tags.push(t);
            }
        }
        tags
    }

    pub fn description(&self) -> String {
        let drift = if self.drift.is_empty() {
            "no drift".to_string()
        } else {
            let parts: Vec<String> = self.drift.iter().map(|d| format!("{} at {}", d.perturbation.tag(), d.step)).collect();
            parts.join(", ")
        };
        format!(
            "{} over {} words with {} choices; {drift}",
            self.rule, self.vocab_size, self.num_choices
        )
    }
}

#[derive(Debug, Clone, Copy)]
enum StreamPos {
    Before,
    At(usize),
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    SourceEval,
    Eval,
    Test,
    Unlabeled,
}

impl SplitRole {
    /// Whether samples of this split may reach an adaptation path.
    pub fn adaptation_visible(self) -> bool {
        self == SplitRole::Unlabeled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub role: SplitRole,
    pub samples: Vec<Sample>,
}

/// Every split of one generated task. `train` follows the drift schedule
/// step by step, `source_eval` is drawn before any drift, and `eval`,
/// `test` and `unlabeled` after all of it. Prompts never repeat across splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBundle {
    pub spec: SyntheticTaskSpec,
    pub train: Split,
    pub source_eval: Split,
    pub eval: Split,
    pub test: Split,
    pub unlabeled: Split,
}

impl TaskBundle {
    pub fn splits(&self) -> [&Split; 5] {
        [&self.train, &self.source_eval, &self.eval, &self.test, &self.unlabeled]
    }

    /// The only data an adaptation path may see: unlabeled prompts.
    pub fn adaptation_inputs(&self) -> &[Sample] {
        &self.unlabeled.samples
    }
}

struct Generator<'a> {
    spec: &'a SyntheticTaskSpec,
    rng: ChaCha8Rng,
    seen: HashSet<String>,
    attempts_left: usize,
}

impl Generator<'_> {
    fn word(&self, i: usize) -> String {
        format!("w{i}")
    }

    fn filler(&mut self) -> usize {
        let k = self.spec.keywords();
        self.rng.random_range(k..self.spec.vocab_size)
    }

    /// Prompt words and the undrifted outcome.
    fn draw(&mut self) -> (Vec<usize>, usize) {
        let k = self.spec.keywords();
        let c = self.spec.num_choices;
        match self.spec.rule {
            Rule::KeywordMatch => {
                let mut words: Vec<usize> = (0..PROMPT_LEN - 1).map(|_| self.filler()).collect();
                let topic = self.rng.random_range(0..k);
                words.insert(self.rng.random_range(0..PROMPT_LEN), topic);
                (words, topic)
            }
            Rule::Parity => {
                let words: Vec<usize> = (0..PROMPT_LEN).map(|_| self.rng.random_range(0..self.spec.vocab_size)).collect();
                let odd = words.iter().filter(|&&w| w % 2 == 1).count();
                (words, odd % c)
            }
            Rule::OrderSensitive => {
                let mut words: Vec<usize> = (0..PROMPT_LEN - 2).map(|_| self.filler()).collect();
                let first = self.rng.random_range(0..k);
                let second = (first + self.rng.random_range(1..k)) % k;
                let i = self.rng.random_range(0..PROMPT_LEN - 1);
                let j = self.rng.random_range(i + 1..PROMPT_LEN);
                words.insert(i, first);
                words.insert(j, second);
                (words, first)
            }
        }
    }

    fn verbalize(&self, outcome: usize) -> String {
        match self.spec.rule {
            Rule::KeywordMatch => format!("pick {}", self.word(outcome)),
            Rule::Parity => format!("count {outcome}"),
            Rule::OrderSensitive => format!("first {}", self.word(outcome)),
        }
    }

    fn sample(&mut self, pos: StreamPos, label: bool) -> Result<Sample> {
        loop {
            if self.attempts_left == 0 {
                return Err(SolarError::Spec(format!(
                    "could not draw {} distinct prompts for task {}",
                    self.spec.total_size(),
                    self.spec.task_id
                )));
            }
            self.attempts_left -= 1;
            let (words, outcome) = self.draw();
            let text: Vec<String> = words.iter().map(|&w| self.word(w)).collect();
            let text = text.join(" ");
            if !self.seen.insert(text.clone()) {
                continue;
            }
            let outcome = self.spec.drifted(outcome, pos);
            let mut order: Vec<usize> = (0..self.spec.num_choices).collect();
            order.shuffle(&mut self.rng);
            let choices = order.iter().map(|&o| self.verbalize(o)).collect();
            let position = order.iter().position(|&o| o == outcome).expect("every outcome is offered");
            return Sample::new(text, choices, label.then_some(position));
        }
    }

    fn split(&mut self, role: SplitRole, n: usize, pos: impl Fn(usize) -> StreamPos) -> Result<Split> {
        let label = role != SplitRole::Unlabeled;
        let samples = (0..n).map(|i| self.sample(pos(i), label)).collect::<Result<_>>()?;
        Ok(Split { role, samples })
    }
}

/// Generates every split of `spec`; deterministic per seed.
pub fn gen_task(spec: &SyntheticTaskSpec) -> Result<TaskBundle> {
    spec.check()?;
    let mut g = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        seen: HashSet::new(),
        attempts_left: 100 * spec.total_size(),
    };
    let s = spec.sizes;
    let train = g.split(SplitRole::Train, s.train, StreamPos::At)?;
    let source_eval = g.split(SplitRole::SourceEval, s.eval, |_| StreamPos::Before)?;
    let eval = g.split(SplitRole::Eval, s.eval, |_| StreamPos::After)?;
    let test = g.split(SplitRole::Test, s.test, |_| StreamPos::After)?;
    let unlabeled = g.split(SplitRole::Unlabeled, s.unlabeled, |_| StreamPos::After)?;
    Ok(TaskBundle {
        spec: spec.clone(),
        train,
        source_eval,
        eval,
        test,
        unlabeled,
    })
}
