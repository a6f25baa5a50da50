//! Adaptation strategies, their per-family schemas and the append-only
//! knowledge base that archives validated strategies with reward provenance.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Result, SolarError};

pub const MAX_LEARNING_RATE: f64 = 1.0;
pub const MAX_TTL_STEPS: u64 = 500;
pub const MAX_TIMES: u64 = 100;
pub const MAX_PROMPT_BATCHES: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Ttt,
    Lora,
    Tts,
    Ls,
    RlSelf,
}

impl Family {
    /// Families with an executor, in canonical order.
    pub const EXECUTABLE: [Family; 4] = [Family::Ttt, Family::Lora, Family::Tts, Family::Ls];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Ttt => "TTT",
            Family::Lora => "LoRA",
            Family::Tts => "TTS",
            Family::Ls => "LS",
            Family::RlSelf => "RLSELF",
        }
    }

    pub fn is_executable(self) -> bool {
        self != Family::RlSelf
    }

    /// TTS and LS wrap prediction and may only end a chain.
    pub fn is_prediction_time(self) -> bool {
        matches!(self, Family::Tts | Family::Ls)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = SolarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TTT" => Ok(Family::Ttt),
            "LORA" => Ok(Family::Lora),
            "TTS" => Ok(Family::Tts),
            "LS" => Ok(Family::Ls),
            "RLSELF" => Ok(Family::RlSelf),
            _ => Err(SolarError::Validation(vec![FieldError::new(
                "family",
                FieldErrorKind::Enum {
                    got: s.to_string(),
                    allowed: "TTT, LoRA, TTS, LS, RLSELF",
                },
            )])),
        }
    }
}

impl Serialize for Family {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Family {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtsMethod {
    AvgSimScore,
    AvgPromptEmbed,
    MaxConfidence,
    MajorityVote,
    SumLogprobs,
}

impl TtsMethod {
    pub const ALL: [TtsMethod; 5] = [
        TtsMethod::AvgSimScore,
        TtsMethod::AvgPromptEmbed,
        TtsMethod::MaxConfidence,
        TtsMethod::MajorityVote,
        TtsMethod::SumLogprobs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TtsMethod::AvgSimScore => "avg_sim_score",
            TtsMethod::AvgPromptEmbed => "avg_prompt_embed",
            TtsMethod::MaxConfidence => "max_confidence",
            TtsMethod::MajorityVote => "majority_vote",
            TtsMethod::SumLogprobs => "sum_logprobs",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TttConfig {
    pub ttl_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub shuffle_data: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtsConfig {
    pub num_prompt_batches: usize,
    pub method: TtsMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsConfig {
    pub times: usize,
    pub learning_rate: f64,
}

/// A strategy after schema validation.
#[derive(Debug, Clone, PartialEq)]
pub enum Edit {
    Ttt(TttConfig),
    Lora(LoraConfig),
    Tts(TtsConfig),
    Ls(LsConfig),
    RlSelf,
}

impl Edit {
    pub fn family(&self) -> Family {
        match self {
            Edit::Ttt(_) => Family::Ttt,
            Edit::Lora(_) => Family::Lora,
            Edit::Tts(_) => Family::Tts,
            Edit::Ls(_) => Family::Ls,
            Edit::RlSelf => Family::RlSelf,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldErrorKind {
    Unknown,
    Missing,
    Type(&'static str),
    Enum { got: String, allowed: &'static str },
    Range(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub path: String,
    pub kind: FieldErrorKind,
}

impl FieldError {
    pub fn new(path: impl Into<String>, kind: FieldErrorKind) -> Self {
        Self { path: path.into(), kind }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            FieldErrorKind::Unknown => write!(f, "{}: unknown field", self.path),
            FieldErrorKind::Missing => write!(f, "{}: missing field", self.path),
            FieldErrorKind::Type(t) => write!(f, "{}: expected {t}", self.path),
            FieldErrorKind::Enum { got, allowed } => write!(f, "{}: {got:?} not one of {allowed}", self.path),
            FieldErrorKind::Range(m) => write!(f, "{}: {m}", self.path),
        }
    }
}

/// A strategy document as proposed: a family plus an untyped config. Use
/// [`validate`] to obtain the typed [`Edit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationStrategy {
    pub family: Family,
    pub config: Map<String, Value>,
}

fn doc(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("object literal"),
    }
}

impl AdaptationStrategy {
    pub fn new(family: Family, config: Map<String, Value>) -> Self {
        Self { family, config }
    }

    pub fn ttt(ttl_steps: usize, learning_rate: f64, batch_size: usize, shuffle_data: bool) -> Self {
        Self::new(
            Family::Ttt,
            doc(json!({
                "ttl_steps": ttl_steps,
                "learning_rate": learning_rate,
                "batch_size": batch_size,
                "shuffle_data": shuffle_data,
            })),
        )
    }

    pub fn lora(lambda: f64) -> Self {
        Self::new(Family::Lora, doc(json!({ "lambda": lambda })))
    }

    pub fn tts(num_prompt_batches: usize, method: TtsMethod) -> Self {
        Self::new(
            Family::Tts,
            doc(json!({ "num_prompt_batches": num_prompt_batches, "method": method.as_str() })),
        )
    }

    pub fn ls(times: usize, learning_rate: f64) -> Self {
        Self::new(Family::Ls, doc(json!({ "times": times, "learning_rate": learning_rate })))
    }

    pub fn from_edit(edit: &Edit) -> Self {
        match edit {
            Edit::Ttt(c) => Self::ttt(c.ttl_steps, c.learning_rate, c.batch_size, c.shuffle_data),
            Edit::Lora(c) => Self::lora(c.lambda),
            Edit::Tts(c) => Self::tts(c.num_prompt_batches, c.method),
            Edit::Ls(c) => Self::ls(c.times, c.learning_rate),
            Edit::RlSelf => Self::new(Family::RlSelf, Map::new()),
        }
    }

    /// `{"family": .., "config": ..}` with keys in sorted order.
    pub fn to_value(&self) -> Value {
        json!({ "family": self.family, "config": self.config })
    }

    /// Content digest: sha256 over the canonical JSON form, hex.
    pub fn id(&self) -> String {
        digest_value(&self.to_value())
    }
}

impl fmt::Display for AdaptationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.family, Value::Object(self.config.clone()))
    }
}

fn digest_value(v: &Value) -> String {
    let bytes = serde_json::to_vec(v).expect("json values serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Fields<'a> {
    config: &'a Map<String, Value>,
    prefix: String,
    errors: Vec<FieldError>,
    seen: BTreeSet<&'static str>,
}

impl<'a> Fields<'a> {
    fn new(config: &'a Map<String, Value>, prefix: &str) -> Self {
        Self {
            config,
            prefix: prefix.to_string(),
            errors: Vec::new(),
            seen: BTreeSet::new(),
        }
    }

    fn path(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }

    fn get(&mut self, key: &'static str) -> Option<&'a Value> {
        self.seen.insert(key);
        let v = self.config.get(key);
        if v.is_none() {
            self.errors.push(FieldError::new(self.path(key), FieldErrorKind::Missing));
        }
        v
    }

    fn fail(&mut self, key: &str, kind: FieldErrorKind) {
        self.errors.push(FieldError::new(self.path(key), kind));
    }

    fn pos_int(&mut self, key: &'static str, max: Option<u64>) -> usize {
        let Some(v) = self.get(key) else { return 0 };
        match v.as_u64() {
            None => self.fail(key, FieldErrorKind::Type("positive integer")),
            Some(0) => self.fail(key, FieldErrorKind::Range("must be positive".into())),
            Some(n) => {
                if let Some(m) = max.filter(|&m| n > m) {
                    self.fail(key, FieldErrorKind::Range(format!("{n} exceeds safety bound {m}")));
                }
                return n as usize;
            }
        }
        0
    }

    fn float(&mut self, key: &'static str, lo: f64, lo_open: bool, hi: f64) -> f64 {
        let Some(v) = self.get(key) else { return 0.0 };
        let Some(x) = v.as_f64().filter(|x| x.is_finite()) else {
            self.fail(key, FieldErrorKind::Type("finite number"));
            return 0.0;
        };
        let below = if lo_open { x <= lo } else { x < lo };
        if below || x > hi {
            let open = if lo_open { "(" } else { "[" };
            self.fail(key, FieldErrorKind::Range(format!("{x} outside {open}{lo}, {hi}]")));
        }
        x
    }

    fn flag(&mut self, key: &'static str) -> bool {
        let Some(v) = self.get(key) else { return false };
        v.as_bool().unwrap_or_else(|| {
            self.fail(key, FieldErrorKind::Type("boolean"));
            false
        })
    }

    fn method(&mut self, key: &'static str) -> TtsMethod {
        let Some(v) = self.get(key) else { return TtsMethod::MaxConfidence };
        let Some(s) = v.as_str() else {
            self.fail(key, FieldErrorKind::Type("string"));
            return TtsMethod::MaxConfidence;
        };
        TtsMethod::parse(s).unwrap_or_else(|| {
            self.fail(
                key,
                FieldErrorKind::Enum {
                    got: s.to_string(),
                    allowed: "avg_sim_score, avg_prompt_embed, max_confidence, majority_vote, sum_logprobs",
                },
            );
            TtsMethod::MaxConfidence
        })
    }

    fn finish<T>(mut self, value: T) -> std::result::Result<T, Vec<FieldError>> {
        let unknown: Vec<String> = self
            .config
            .keys()
            .filter(|k| !self.seen.contains(k.as_str()))
            .cloned()
            .collect();
        for k in unknown {
            self.fail(&k, FieldErrorKind::Unknown);
        }
        if self.errors.is_empty() {
            Ok(value)
        } else {
            Err(self.errors)
        }
    }
}

fn check_fields(s: &AdaptationStrategy, prefix: &str) -> std::result::Result<Edit, Vec<FieldError>> {
    let mut f = Fields::new(&s.config, prefix);
    match s.family {
        Family::Ttt => {
            let ttl_steps = f.pos_int("ttl_steps", Some(MAX_TTL_STEPS));
            let learning_rate = f.float("learning_rate", 0.0, true, MAX_LEARNING_RATE);
            let batch_size = f.pos_int("batch_size", None);
            let shuffle_data = f.flag("shuffle_data");
            f.finish(Edit::Ttt(TttConfig {
                ttl_steps,
                learning_rate,
                batch_size,
                shuffle_data,
            }))
        }
        Family::Lora => {
            let lambda = f.float("lambda", 0.0, false, 1.0);
            f.finish(Edit::Lora(LoraConfig { lambda }))
        }
        Family::Tts => {
            let num_prompt_batches = f.pos_int("num_prompt_batches", Some(MAX_PROMPT_BATCHES));
            let method = f.method("method");
            f.finish(Edit::Tts(TtsConfig {
                num_prompt_batches,
                method,
            }))
        }
        Family::Ls => {
            let times = f.pos_int("times", Some(MAX_TIMES));
            let learning_rate = f.float("learning_rate", 0.0, true, MAX_LEARNING_RATE);
            f.finish(Edit::Ls(LsConfig { times, learning_rate }))
        }
        Family::RlSelf => Ok(Edit::RlSelf),
    }
}

/// Schema and safety check. Every violation is reported with its field path.
pub fn validate(strategy: &AdaptationStrategy) -> Result<Edit> {
    check_fields(strategy, "config.").map_err(SolarError::Validation)
}

/// A single edit or an ordered chain of edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StrategyPlan {
    Single(AdaptationStrategy),
    Chain(Vec<AdaptationStrategy>),
}

impl StrategyPlan {
    pub fn elements(&self) -> &[AdaptationStrategy] {
        match self {
            StrategyPlan::Single(s) => std::slice::from_ref(s),
            StrategyPlan::Chain(c) => c,
        }
    }

    pub fn is_chain(&self) -> bool {
        matches!(self, StrategyPlan::Chain(_))
    }

    pub fn id(&self) -> String {
        match self {
            StrategyPlan::Single(s) => s.id(),
            StrategyPlan::Chain(c) => digest_value(&json!({
                "chain": c.iter().map(AdaptationStrategy::to_value).collect::<Vec<_>>()
            })),
        }
    }

    pub fn to_value(&self) -> Value {
        match self {
            StrategyPlan::Single(s) => s.to_value(),
            StrategyPlan::Chain(c) => json!({ "chain": c.iter().map(AdaptationStrategy::to_value).collect::<Vec<_>>() }),
        }
    }

    /// Parses the form written by [`StrategyPlan::to_value`].
    pub fn from_value(v: &Value) -> Result<Self> {
        let parse_one = |v: &Value| -> Result<AdaptationStrategy> {
            serde_json::from_value(v.clone()).map_err(SolarError::from)
        };
        match v.get("chain") {
            Some(Value::Array(items)) => Ok(StrategyPlan::Chain(items.iter().map(parse_one).collect::<Result<_>>()?)),
            Some(_) => Err(SolarError::Format("chain must be an array".into())),
            None => Ok(StrategyPlan::Single(parse_one(v)?)),
        }
    }

    /// Validates every element and the chain composition rule.
    pub fn validate(&self) -> Result<Vec<Edit>> {
        let elems = self.elements();
        if elems.is_empty() {
            return Err(SolarError::ChainComposition("empty chain".into()));
        }
        let mut edits = Vec::with_capacity(elems.len());
        let mut errors = Vec::new();
        for (i, s) in elems.iter().enumerate() {
            let prefix = if self.is_chain() {
                format!("chain[{i}].config.")
            } else {
                "config.".to_string()
            };
            match check_fields(s, &prefix) {
                Ok(e) => edits.push(e),
                Err(mut es) => errors.append(&mut es),
            }
        }
        if !errors.is_empty() {
            return Err(SolarError::Validation(errors));
        }
        check_composition(&edits)?;
        Ok(edits)
    }
}

impl fmt::Display for StrategyPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StrategyPlan::Single(s) => write!(f, "{s}"),
            StrategyPlan::Chain(c) => {
                let parts: Vec<String> = c.iter().map(|s| s.to_string()).collect();
                write!(f, "[{}]", parts.join(" -> "))
            }
        }
    }
}

pub fn check_composition(edits: &[Edit]) -> Result<()> {
    for (i, e) in edits.iter().enumerate() {
        if e.family().is_prediction_time() && i + 1 < edits.len() {
            return Err(SolarError::ChainComposition(format!(
                "{} at position {i} of {} must be last",
                e.family(),
                edits.len()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    I,
    II,
    III,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::I, Level::II, Level::III];
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::I => "I",
            Level::II => "II",
            Level::III => "III",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub task_id: String,
    pub reward: u8,
    pub accuracy_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub id: String,
    pub plan: StrategyPlan,
    pub task_tags: Vec<String>,
    pub reward_history: Vec<RewardRecord>,
    pub level: Level,
    pub created_at: u64,
}

impl KbEntry {
    pub fn new(plan: StrategyPlan, task_tags: Vec<String>, level: Level) -> Self {
        Self {
            id: plan.id(),
            plan,
            task_tags,
            reward_history: Vec::new(),
            level,
            created_at: 0,
        }
    }

    pub fn with_reward(mut self, r: RewardRecord) -> Self {
        self.reward_history.push(r);
        self
    }

    /// Mean of recorded rewards, 0 when there are none.
    pub fn mean_reward(&self) -> f64 {
        if self.reward_history.is_empty() {
            return 0.0;
        }
        self.reward_history.iter().map(|r| f64::from(r.reward)).sum::<f64>() / self.reward_history.len() as f64
    }

    pub fn tag_matches(&self, tags: &[String]) -> usize {
        self.task_tags.iter().filter(|t| tags.contains(t)).count()
    }

    fn to_json(&self) -> Value {
        let (family, config, chain) = match &self.plan {
            StrategyPlan::Single(s) => (json!(s.family), Value::Object(s.config.clone()), Value::Null),
            StrategyPlan::Chain(c) => (
                Value::Null,
                Value::Null,
                Value::Array(c.iter().map(AdaptationStrategy::to_value).collect()),
            ),
        };
        json!({
            "id": self.id,
            "family": family,
            "config": config,
            "chain": chain,
            "task_tags": self.task_tags,
            "reward_history": self.reward_history,
            "level": self.level,
            "created_at": self.created_at,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    id: String,
    family: Option<Family>,
    config: Option<Map<String, Value>>,
    chain: Option<Vec<AdaptationStrategy>>,
    task_tags: Vec<String>,
    reward_history: Vec<RewardRecord>,
    level: Level,
    created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Added,
    Merged,
}

/// Append-only strategy archive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<KbEntry>,
    clock: u64,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&KbEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Validates, then appends or merges. A new entry gets the next clock
    /// value; a duplicate id extends the stored reward history and tag set.
    pub fn insert(&mut self, mut entry: KbEntry) -> Result<InsertOutcome> {
        entry.plan.validate()?;
        if entry.plan.is_chain() && entry.plan.elements().len() >= 2 && entry.level == Level::I {
            return Err(SolarError::ChainComposition("level I entries must be single edits".into()));
        }
        entry.id = entry.plan.id();
        if let Some(existing) = self.entries.iter_mut().find(|e| e.id == entry.id) {
            existing.reward_history.extend(entry.reward_history);
            for t in entry.task_tags {
                if !existing.task_tags.contains(&t) {
                    existing.task_tags.push(t);
                }
            }
            return Ok(InsertOutcome::Merged);
        }
        self.clock += 1;
        entry.created_at = self.clock;
        self.entries.push(entry);
        Ok(InsertOutcome::Added)
    }

    /// Appends a reward to an existing entry. Returns false if `id` is unknown.
    pub fn record_reward(&mut self, id: &str, r: RewardRecord) -> bool {
        match self.entries.iter_mut().find(|e| e.id == id) {
            Some(e) => {
                e.reward_history.push(r);
                true
            }
            None => false,
        }
    }

    /// Entries ranked by matching tag count, then mean reward, then recency.
    pub fn query(&self, task_tags: &[String], level: Level) -> Result<Vec<&KbEntry>> {
        if self.entries.is_empty() && level != Level::III {
            return Err(SolarError::EmptyKb);
        }
        let mut out: Vec<&KbEntry> = self.entries.iter().collect();
        out.sort_by(|a, b| {
            b.tag_matches(task_tags)
                .cmp(&a.tag_matches(task_tags))
                .then(b.mean_reward().total_cmp(&a.mean_reward()))
                .then(b.created_at.cmp(&a.created_at))
        });
        Ok(out)
    }

    pub fn save(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, &e.to_json())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(r: impl BufRead) -> Result<Self> {
        let mut kb = KnowledgeBase::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| SolarError::Parse { line: i + 1, message };
            let rec: EntryRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let plan = match (rec.family, rec.config, rec.chain) {
                (Some(family), Some(config), None) => StrategyPlan::Single(AdaptationStrategy { family, config }),
                (None, None, Some(chain)) => StrategyPlan::Chain(chain),
                _ => return Err(parse_err("need family+config or chain".into())),
            };
            plan.validate()?;
            if plan.id() != rec.id {
                return Err(parse_err(format!("id {} does not match content", rec.id)));
            }
            if kb.get(&rec.id).is_some() {
                return Err(parse_err(format!("duplicate id {}", rec.id)));
            }
            kb.clock = kb.clock.max(rec.created_at);
            kb.entries.push(KbEntry {
                id: rec.id,
                plan,
                task_tags: rec.task_tags,
                reward_history: rec.reward_history,
                level: rec.level,
                created_at: rec.created_at,
            });
        }
        Ok(kb)
    }
}

/// The hand-curated starting archive: one known-good strategy per family,
/// all at level I.
pub fn seed_kb() -> KnowledgeBase {
    let mut kb = KnowledgeBase::new();
    for s in [
        AdaptationStrategy::ttt(25, 1e-5, 4, true),
        AdaptationStrategy::ls(5, 0.1),
        AdaptationStrategy::lora(0.5),
        AdaptationStrategy::tts(20, TtsMethod::MaxConfidence),
    ] {
        kb.insert(KbEntry::new(StrategyPlan::Single(s), vec!["seed".into()], Level::I))
            .expect("seed strategies validate");
    }
    kb
}
