//! Executors for each strategy family and the dispatcher that turns a
//! strategy (or chain) into a predictor.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{sample_adapter, DecoderParams};
use crate::embedding::{embed, mean_vector, vector_similarity, EmbedderConfig, Metric};
use crate::error::{Result, SolarError};
use crate::kb::{Edit, LoraConfig, LsConfig, StrategyPlan, TtsConfig, TtsMethod, TttConfig};
use crate::substrate::{entropy, entropy_score_grad, log_softmax, BatchCursor, LoraAdapter, Sample, TaskModel};

pub const DEFAULT_PROMPT_BATCH_SIZE: usize = 4;
pub const MAX_HALVINGS: usize = 5;

/// What an executor may see. Unlabeled samples have their labels stripped
/// on construction; evaluation data is not part of the context.
#[derive(Debug, Clone)]
pub struct ExecutionContext {
    pub model: Arc<TaskModel>,
    pub adapter: LoraAdapter,
    unlabeled: Arc<Vec<Sample>>,
    pub generator: Option<Arc<DecoderParams>>,
    pub prompt_batch_size: usize,
    pub router_metric: Metric,
    pub seed: u64,
}

impl ExecutionContext {
    pub fn new(model: Arc<TaskModel>, adapter: LoraAdapter, unlabeled: &[Sample], seed: u64) -> Self {
        Self {
            model,
            adapter,
            unlabeled: Arc::new(unlabeled.iter().map(Sample::unlabeled).collect()),
            generator: None,
            prompt_batch_size: DEFAULT_PROMPT_BATCH_SIZE,
            router_metric: Metric::Euclidean,
            seed,
        }
    }

    pub fn with_generator(mut self, g: Arc<DecoderParams>) -> Self {
        self.generator = Some(g);
        self
    }

    pub fn with_adapter(&self, adapter: LoraAdapter) -> Self {
        Self {
            adapter,
            ..self.clone()
        }
    }

    pub fn unlabeled(&self) -> &[Sample] {
        &self.unlabeled
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub choice_index: usize,
    /// Probability of the chosen answer under `logprobs`.
    pub confidence: f64,
    pub logprobs: Vec<f64>,
}

impl Prediction {
    /// Argmax (lowest index on ties) of the softmax over `scores`.
    pub fn from_scores(scores: &[f64]) -> Self {
        Self::from_logprobs(log_softmax(scores))
    }

    pub fn from_logprobs(logprobs: Vec<f64>) -> Self {
        let choice_index = argmax(&logprobs);
        Self::with_choice(choice_index, logprobs)
    }

    fn with_choice(choice_index: usize, logprobs: Vec<f64>) -> Self {
        Self {
            choice_index,
            confidence: logprobs[choice_index].exp(),
            logprobs,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Entropy-minimization test-time training on unlabeled inputs.
pub fn exec_ttt(ctx: &ExecutionContext, cfg: &TttConfig) -> Result<LoraAdapter> {
    let model = &ctx.model;
    let mut current = ctx.adapter.clone();
    if cfg.ttl_steps == 0 {
        return Ok(current);
    }
    let data = ctx.unlabeled();
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(SolarError::Config(format!(
            "TTT batch_size {} must be in 1..={}",
            cfg.batch_size,
            data.len()
        )));
    }
    current.check_compat(model)?;
    let mut cursor = BatchCursor::new(data.len(), cfg.shuffle_data, ctx.seed);
    for _ in 0..cfg.ttl_steps {
        let batch = cursor.next_batch(cfg.batch_size);
        let mut grads = current.zeros_like();
        for &i in &batch {
            let fwd = model.forward(Some(&current), &data[i], None)?;
            model.backward(&current, &fwd, &entropy_score_grad(&fwd.scores), &mut grads);
        }
        current.axpy(-cfg.learning_rate / batch.len() as f64, &grads)?;
        if !current.is_finite() {
            return Err(SolarError::TrainingDiverged {
                last_finite_trace: Vec::new(),
            });
        }
    }
    Ok(current)
}

/// Two-subspace mixing. With `A = [A1; A2]` and `B = [B1 B2]` split at half
/// the rank, the new factors are `A` and `[B1 + λB2, λB1 + B2]`, so the delta
/// becomes `B1A1 + B2A2 + λ(B1A2 + B2A1)`.
pub fn exec_tsmix(adapter: &LoraAdapter, lambda: f64) -> Result<LoraAdapter> {
    if !adapter.rank.is_multiple_of(2) {
        return Err(SolarError::OddRank(adapter.rank));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SolarError::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut out = adapter.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    let h = adapter.rank / 2;
    for (id, p) in &adapter.entries {
        let q = out.entries.get_mut(id).expect("same keys");
        for i in 0..p.b.rows() {
            for r in 0..h {
                let (b1, b2) = (p.b.at(i, r), p.b.at(i, r + h));
                *q.b.at_mut(i, r) = b1 + lambda * b2;
                *q.b.at_mut(i, r + h) = lambda * b1 + b2;
            }
        }
    }
    Ok(out)
}

/// One ensemble member: its adapter and the embeddings of the prompts it
/// was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsMember {
    pub adapter: LoraAdapter,
    pub prompt_embeddings: Vec<Vec<f64>>,
}

fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    let v = vector_similarity(a, b, metric)?;
    Ok(match metric {
        Metric::Euclidean => v,
        Metric::Cosine => 1.0 - v,
    })
}

/// Draws `num_prompt_batches` disjoint batches from the unlabeled pool and
/// generates one adapter per batch.
pub fn build_tts_members(ctx: &ExecutionContext, cfg: &TtsConfig) -> Result<Vec<TtsMember>> {
    let gen = ctx
        .generator
        .as_ref()
        .ok_or_else(|| SolarError::Config("TTS needs an adapter generator".into()))?;
    let size = ctx.prompt_batch_size.max(1);
    let needed = cfg.num_prompt_batches * size;
    let pool = ctx.unlabeled();
    if needed > pool.len() || cfg.num_prompt_batches == 0 {
        return Err(SolarError::InsufficientPrompts {
            needed,
            available: pool.len(),
        });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.seed));
    order[..needed]
        .chunks(size)
        .map(|idx| {
            let batch: Vec<Sample> = idx.iter().map(|&i| pool[i].clone()).collect();
            let adapter = sample_adapter(&batch, gen, &gen.codec, &gen.layout)?;
            let prompt_embeddings = batch
                .iter()
                .map(|s| embed(&s.prompt_text, &gen.embedder).map(|e| e.vector))
                .collect::<Result<_>>()?;
            Ok(TtsMember {
                adapter,
                prompt_embeddings,
            })
        })
        .collect()
}

/// Combines per-member predictions for one question.
pub fn tts_aggregate(
    method: TtsMethod,
    predictions: &[Prediction],
    prompt_embeddings: &[Vec<Vec<f64>>],
    question_embedding: &[f64],
    metric: Metric,
) -> Result<Prediction> {
    if predictions.is_empty() {
        return Err(SolarError::EmptySource("TTS members"));
    }
    let k = predictions[0].logprobs.len();
    if predictions.iter().any(|p| p.logprobs.len() != k) {
        return Err(SolarError::Shape("members disagree on choice count".into()));
    }
    let route = |scores: Vec<f64>| -> Prediction { predictions[argmin(&scores)].clone() };
    Ok(match method {
        TtsMethod::AvgSimScore => {
            let mut scores = Vec::with_capacity(predictions.len());
            for embs in prompt_embeddings {
                let mut s = 0.0;
                for e in embs {
                    s += distance(e, question_embedding, metric)?;
                }
                scores.push(s / embs.len().max(1) as f64);
            }
            route(scores)
        }
        TtsMethod::AvgPromptEmbed => {
            let mut scores = Vec::with_capacity(predictions.len());
            for embs in prompt_embeddings {
                let refs: Vec<&[f64]> = embs.iter().map(Vec::as_slice).collect();
                scores.push(distance(&mean_vector(&refs), question_embedding, metric)?);
            }
            route(scores)
        }
        TtsMethod::MaxConfidence => {
            let conf: Vec<f64> = predictions.iter().map(|p| p.confidence).collect();
            predictions[argmax(&conf)].clone()
        }
        TtsMethod::MajorityVote => {
            let mut votes = vec![0usize; k];
            let mut summed = vec![0.0; k];
            for p in predictions {
                votes[p.choice_index] += 1;
                summed.iter_mut().zip(&p.logprobs).for_each(|(s, l)| *s += l);
            }
            let top = *votes.iter().max().expect("k >= 1");
            let mut best: Option<usize> = None;
            for c in (0..k).filter(|&c| votes[c] == top) {
                if best.is_none_or(|b| summed[c] > summed[b]) {
                    best = Some(c);
                }
            }
            Prediction::with_choice(best.expect("some choice has top votes"), mean_prob_logprobs(predictions))
        }
        TtsMethod::SumLogprobs => {
            let mut summed = vec![0.0; k];
            for p in predictions {
                summed.iter_mut().zip(&p.logprobs).for_each(|(s, l)| *s += l);
            }
            let choice = argmax(&summed);
            Prediction::with_choice(choice, log_softmax(&summed))
        }
    })
}

fn mean_prob_logprobs(predictions: &[Prediction]) -> Vec<f64> {
    let k = predictions[0].logprobs.len();
    let n = predictions.len() as f64;
    (0..k)
        .map(|c| (predictions.iter().map(|p| p.logprobs[c].exp()).sum::<f64>() / n).ln())
        .collect()
}

fn predict_member(model: &TaskModel, adapter: &LoraAdapter, question: &Sample) -> Result<Prediction> {
    Ok(Prediction::from_scores(&model.forward_scores(Some(adapter), question)?))
}

fn tts_predict(
    model: &TaskModel,
    members: &[TtsMember],
    method: TtsMethod,
    embedder: &EmbedderConfig,
    metric: Metric,
    question: &Sample,
) -> Result<Prediction> {
    let preds = members
        .iter()
        .map(|m| predict_member(model, &m.adapter, question))
        .collect::<Result<Vec<_>>>()?;
    let embs: Vec<Vec<Vec<f64>>> = members.iter().map(|m| m.prompt_embeddings.clone()).collect();
    let q = embed(&question.prompt_text, embedder)?.vector;
    tts_aggregate(method, &preds, &embs, &q, metric)
}

pub fn exec_tts(ctx: &ExecutionContext, cfg: &TtsConfig, question: &Sample) -> Result<Prediction> {
    let members = build_tts_members(ctx, cfg)?;
    let embedder = ctx.generator.as_ref().expect("checked by build").embedder;
    tts_predict(&ctx.model, &members, cfg.method, &embedder, ctx.router_metric, question)
}

/// Per-question latent offset on the query vector, tuned to lower the
/// prediction entropy. A step that would raise the entropy is halved up to
/// [`MAX_HALVINGS`] times and skipped if it still does.
pub fn exec_ls(ctx: &ExecutionContext, cfg: &LsConfig, question: &Sample) -> Result<Prediction> {
    ls_predict(&ctx.model, &ctx.adapter, cfg, question).map(|(p, _)| p)
}

/// As [`exec_ls`], also returning the final offset.
pub fn ls_predict(
    model: &TaskModel,
    adapter: &LoraAdapter,
    cfg: &LsConfig,
    question: &Sample,
) -> Result<(Prediction, Vec<f64>)> {
    let mut delta = vec![0.0; model.hidden_dim()];
    let mut fwd = model.forward(Some(adapter), question, Some(&delta))?;
    let mut h = entropy(&fwd.scores);
    for _ in 0..cfg.times {
        let g = model.query_grad(&fwd, &entropy_score_grad(&fwd.scores));
        let mut step = cfg.learning_rate;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = delta.iter().zip(&g).map(|(d, g)| d - step * g).collect();
            let tf = model.forward(Some(adapter), question, Some(&trial))?;
            let th = entropy(&tf.scores);
            if th <= h {
                delta = trial;
                fwd = tf;
                h = th;
                break;
            }
            step *= 0.5;
        }
    }
    Ok((Prediction::from_scores(&fwd.scores), delta))
}

/// Prediction-time behaviour layered over the adapted model.
#[derive(Debug, Clone)]
pub enum Wrapper {
    None,
    Tts {
        members: Vec<TtsMember>,
        method: TtsMethod,
        embedder: EmbedderConfig,
        metric: Metric,
    },
    Ls(LsConfig),
}

/// The result of applying a strategy: an adapter plus an optional
/// prediction-time wrapper.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub model: Arc<TaskModel>,
    pub adapter: LoraAdapter,
    pub wrapper: Wrapper,
}

impl Predictor {
    pub fn plain(model: Arc<TaskModel>, adapter: LoraAdapter) -> Self {
        Self {
            model,
            adapter,
            wrapper: Wrapper::None,
        }
    }

    pub fn predict(&self, question: &Sample) -> Result<Prediction> {
        match &self.wrapper {
            Wrapper::None => predict_member(&self.model, &self.adapter, question),
            Wrapper::Tts {
                members,
                method,
                embedder,
                metric,
            } => tts_predict(&self.model, members, *method, embedder, *metric, question),
            Wrapper::Ls(cfg) => ls_predict(&self.model, &self.adapter, cfg, question).map(|(p, _)| p),
        }
    }

    /// Applies `f` to every adapter the predictor uses.
    pub fn map_adapters(&self, mut f: impl FnMut(&LoraAdapter) -> Result<LoraAdapter>) -> Result<Predictor> {
        let adapter = f(&self.adapter)?;
        let wrapper = match &self.wrapper {
            Wrapper::Tts {
                members,
                method,
                embedder,
                metric,
            } => Wrapper::Tts {
                members: members
                    .iter()
                    .map(|m| {
                        Ok(TtsMember {
                            adapter: f(&m.adapter)?,
                            prompt_embeddings: m.prompt_embeddings.clone(),
                        })
                    })
                    .collect::<Result<_>>()?,
                method: *method,
                embedder: *embedder,
                metric: *metric,
            },
            w => w.clone(),
        };
        Ok(Predictor {
            model: self.model.clone(),
            adapter,
            wrapper,
        })
    }

    /// Fraction of labeled samples answered correctly.
    pub fn accuracy(&self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(SolarError::EmptyEvalSet);
        }
        let mut hits = 0usize;
        for (i, s) in data.iter().enumerate() {
            let label = s.label.ok_or(SolarError::LabeledDataRequired { index: i })?;
            hits += usize::from(self.predict(s)?.choice_index == label);
        }
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Dispatches a validated single edit or chain. Each chain element consumes
/// the previous element's adapter; TTS and LS only wrap prediction and must
/// come last. A TTS wrapper draws its own adapters from the generator.
pub fn apply_strategy(ctx: &ExecutionContext, plan: &StrategyPlan) -> Result<Predictor> {
    let edits = plan.validate()?;
    let mut adapter = ctx.adapter.clone();
    let mut wrapper = Wrapper::None;
    for edit in &edits {
        match edit {
            Edit::Ttt(cfg) => adapter = exec_ttt(&ctx.with_adapter(adapter), cfg)?,
            Edit::Lora(LoraConfig { lambda }) => adapter = exec_tsmix(&adapter, *lambda)?,
            Edit::Tts(cfg) => {
                let members = build_tts_members(&ctx.with_adapter(adapter.clone()), cfg)?;
                wrapper = Wrapper::Tts {
                    members,
                    method: cfg.method,
                    embedder: ctx.generator.as_ref().expect("checked by build").embedder,
                    metric: ctx.router_metric,
                };
            }
            Edit::Ls(cfg) => wrapper = Wrapper::Ls(*cfg),
            Edit::RlSelf => return Err(SolarError::NotExecutable(edit.family().to_string())),
        }
    }
    Ok(Predictor {
        model: ctx.model.clone(),
        adapter,
        wrapper,
    })
}
