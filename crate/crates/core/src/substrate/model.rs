use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LoraAdapter, LoraPair, Sample};
use crate::embedding::{add_hashed, l2_normalize, tokenize_text};
use crate::error::{Result, SolarError};
use crate::tensor::Tensor;

pub const ENC_LAYER: &str = "enc";
pub const PROJ_LAYER: &str = "proj";

/// Hashed unigram + bigram features, L2-normalized. Bigrams include a start
/// marker so the first token is distinguishable from later ones.
pub fn featurize(text: &str, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let toks = tokenize_text(text);
    let mut prev = "<s>";
    for t in &toks {
        add_hashed(&mut out, t, 1.0);
        add_hashed(&mut out, &format!("{prev}\u{1f}{t}"), 1.0);
        prev = t;
    }
    if l2_normalize(&mut out) == 0.0 {
        out[0] = 1.0;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub id: String,
    /// `d_out × d_in`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl LinearMap {
    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    layers: Vec<LinearMap>,
    embed_dim: usize,
}

impl TaskModel {
    /// Seeded random model with an `embed_dim → hidden` encoder and a
    /// `hidden → hidden` query projection.
    pub fn new(embed_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |id: &str, d_out: usize, d_in: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            LinearMap {
                id: id.to_string(),
                weight: Tensor::from_fn(&[d_out, d_in], |_| normal.sample(&mut rng)),
                bias: (0..d_out).map(|_| 0.1 * normal.sample(&mut rng)).collect(),
            }
        };
        let enc = layer(ENC_LAYER, hidden_dim, embed_dim, 1.0);
        let proj = layer(PROJ_LAYER, hidden_dim, hidden_dim, 1.0 / (hidden_dim as f64).sqrt());
        Self {
            layers: vec![enc, proj],
            embed_dim,
        }
    }

    pub fn desk(seed: u64) -> Self {
        Self::new(32, 32, seed)
    }

    pub fn from_layers(embed_dim: usize, layers: Vec<LinearMap>) -> Result<Self> {
        if layers.len() != 2 || layers[0].id != ENC_LAYER || layers[1].id != PROJ_LAYER {
            return Err(SolarError::Shape("expected layers [enc, proj]".into()));
        }
        if layers[0].d_in() != embed_dim {
            return Err(SolarError::Shape(format!(
                "enc d_in {} != embed_dim {embed_dim}",
                layers[0].d_in()
            )));
        }
        if layers[1].d_in() != layers[0].d_out() || layers[1].d_out() != layers[0].d_out() {
            return Err(SolarError::Shape("proj must map hidden → hidden".into()));
        }
        for l in &layers {
            if l.bias.len() != l.d_out() {
                return Err(SolarError::Shape(format!("bias length mismatch in {}", l.id)));
            }
        }
        Ok(Self { layers, embed_dim })
    }

    pub fn layers(&self) -> &[LinearMap] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LinearMap> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].d_out()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn score_scale(&self) -> f64 {
        1.0 / (self.hidden_dim() as f64).sqrt()
    }

    pub fn forward_scores(&self, adapter: Option<&LoraAdapter>, sample: &Sample) -> Result<Vec<f64>> {
        Ok(self.forward(adapter, sample, None)?.scores)
    }

    /// Forward pass keeping the intermediates needed for backprop. `offset`
    /// is added to the prompt query before scoring.
    pub fn forward(&self, adapter: Option<&LoraAdapter>, sample: &Sample, offset: Option<&[f64]>) -> Result<Forward> {
        if sample.choices.len() < 2 {
            return Err(SolarError::Config("sample needs at least 2 choices".into()));
        }
        if let Some(a) = adapter {
            a.check_compat(self)?;
        }
        let pair = |id: &str| adapter.and_then(|a| a.entries.get(id));
        let scale = adapter.map_or(0.0, |a| a.scale);
        let enc = &self.layers[0];
        let proj = &self.layers[1];

        let prompt = encode(enc, pair(ENC_LAYER), scale, featurize(&sample.prompt_text, self.embed_dim));
        let (mut query, proj_ax) = linear(proj, pair(PROJ_LAYER), scale, &prompt.h);
        if let Some(off) = offset {
            if off.len() != query.len() {
                return Err(SolarError::Shape(format!("offset dim {} != hidden {}", off.len(), query.len())));
            }
            query.iter_mut().zip(off).for_each(|(q, o)| *q += o);
        }
        let choices: Vec<Encoded> = sample
            .choices
            .iter()
            .map(|c| encode(enc, pair(ENC_LAYER), scale, featurize(c, self.embed_dim)))
            .collect();
        let k = self.score_scale();
        let scores = choices.iter().map(|c| k * dot(&query, &c.h)).collect();
        Ok(Forward {
            prompt,
            proj_ax,
            query,
            choices,
            scores,
        })
    }

    /// Gradient of the per-choice score vector w.r.t. the query vector.
    pub fn query_grad(&self, fwd: &Forward, gscores: &[f64]) -> Vec<f64> {
        let k = self.score_scale();
        let mut gq = vec![0.0; fwd.query.len()];
        for (c, &g) in fwd.choices.iter().zip(gscores) {
            for (o, h) in gq.iter_mut().zip(&c.h) {
                *o += k * g * h;
            }
        }
        gq
    }

    /// Accumulates adapter gradients for upstream score gradients `gscores`.
    pub fn backward(&self, adapter: &LoraAdapter, fwd: &Forward, gscores: &[f64], grads: &mut LoraAdapter) {
        let k = self.score_scale();
        let enc = &self.layers[0];
        let proj = &self.layers[1];
        let scale = adapter.scale;
        let gq = self.query_grad(fwd, gscores);

        let gh_prompt = linear_backward(
            proj,
            adapter.entries.get(PROJ_LAYER),
            scale,
            &fwd.prompt.h,
            &fwd.proj_ax,
            &gq,
            grads.entries.get_mut(PROJ_LAYER),
        );
        encode_backward(enc, adapter, &fwd.prompt, &gh_prompt, grads);
        for (c, &g) in fwd.choices.iter().zip(gscores) {
            let gh: Vec<f64> = fwd.query.iter().map(|q| k * g * q).collect();
            encode_backward(enc, adapter, c, &gh, grads);
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Encoded {
    x: Vec<f64>,
    ax: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    prompt: Encoded,
    proj_ax: Vec<f64>,
    pub query: Vec<f64>,
    choices: Vec<Encoded>,
    pub scores: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn encode(layer: &LinearMap, pair: Option<&LoraPair>, scale: f64, x: Vec<f64>) -> Encoded {
    let (pre, ax) = linear(layer, pair, scale, &x);
    Encoded {
        x,
        ax,
        h: pre.into_iter().map(f64::tanh).collect(),
    }
}

fn encode_backward(layer: &LinearMap, adapter: &LoraAdapter, e: &Encoded, gh: &[f64], grads: &mut LoraAdapter) {
    let gpre: Vec<f64> = gh.iter().zip(&e.h).map(|(g, h)| g * (1.0 - h * h)).collect();
    linear_backward(
        layer,
        adapter.entries.get(&layer.id),
        adapter.scale,
        &e.x,
        &e.ax,
        &gpre,
        grads.entries.get_mut(&layer.id),
    );
}

/// `y = W x + b + scale · B (A x)`; also returns `A x`.
fn linear(layer: &LinearMap, pair: Option<&LoraPair>, scale: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut y = layer.weight.matvec(x);
    y.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
    let ax = match pair {
        Some(p) => {
            let ax = p.a.matvec(x);
            let bax = p.b.matvec(&ax);
            y.iter_mut().zip(bax).for_each(|(v, d)| *v += scale * d);
            ax
        }
        None => Vec::new(),
    };
    (y, ax)
}

fn linear_backward(
    layer: &LinearMap,
    pair: Option<&LoraPair>,
    scale: f64,
    x: &[f64],
    ax: &[f64],
    gy: &[f64],
    grad: Option<&mut LoraPair>,
) -> Vec<f64> {
    let mut gx = layer.weight.matvec_t(gy);
    if let Some(p) = pair {
        let btg = p.b.matvec_t(gy);
        if let Some(g) = grad {
            let rank = p.a.rows();
            for (i, gyi) in gy.iter().enumerate() {
                for r in 0..rank {
                    *g.b.at_mut(i, r) += scale * gyi * ax[r];
                }
            }
            for (r, bg) in btg.iter().enumerate() {
                for (j, xj) in x.iter().enumerate() {
                    *g.a.at_mut(r, j) += scale * bg * xj;
                }
            }
        }
        let back = p.a.matvec_t(&btg);
        gx.iter_mut().zip(back).for_each(|(g, v)| *g += scale * v);
    }
    gx
}

pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    log_softmax(scores).into_iter().map(f64::exp).collect()
}

/// Shannon entropy (nats) of the softmax over `scores`.
pub fn entropy(scores: &[f64]) -> f64 {
    log_softmax(scores).iter().map(|lp| -lp.exp() * lp).sum()
}

/// `∂H/∂s_k = −p_k (log p_k + H)`.
pub fn entropy_score_grad(scores: &[f64]) -> Vec<f64> {
    let lp = log_softmax(scores);
    let h: f64 = lp.iter().map(|l| -l.exp() * l).sum();
    lp.iter().map(|l| -l.exp() * (l + h)).collect()
}
