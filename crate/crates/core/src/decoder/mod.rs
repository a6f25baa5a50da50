//! Hyper-convolutional decoder: maps a prompt-batch embedding tensor
//! `[B, N, L, C]` to adapter weight tokens `[B, T, pad_rows, pad_cols]`
//! through a schedule of decoder blocks, and turns the tokens back into a
//! [`LoraAdapter`].

mod block;
mod conv;
mod io;
mod train;

use serde::{Deserialize, Serialize};

use crate::codec::{denormalize_layers, detokenize, grid_from_values, token_plan, LayerStats, TokenGrid, TokenizerConfig};
use crate::embedding::{embed, EmbedderConfig, Embedding};
use crate::error::{Result, SolarError};
use crate::substrate::{unflatten_adapter, AdapterLayout, LoraAdapter, Sample};
use crate::tensor::Tensor;

pub use block::{block_forward, propagate_shapes, BlockShapes, DecoderBlock};
pub use conv::{bin, conv_backward, conv_forward, pool_backward, pool_forward, volume, Plane, Shape3};
pub use io::{read_decoder, write_decoder, DECODER_MAGIC};
pub use train::{masked_mse, masked_mse_grad, pair_dataset, train_decoder, DecoderTrainConfig, PromptCheckpointPair};

/// The shape flow reported for the full-size decoder.
pub const FULL_SCHEDULE: [Shape3; 9] = [
    [128, 384, 384],
    [128, 200, 300],
    [128, 100, 256],
    [256, 50, 200],
    [512, 50, 200],
    [1024, 25, 200],
    [1024, 10, 200],
    [2048, 10, 200],
    [4296, 8, 128],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub schedule: Vec<Shape3>,
    pub kernel: usize,
    pub seed: u64,
}

impl DecoderConfig {
    /// `(16, 1, 64) → (16, 1, 32) → (T, pad_rows, pad_cols)` where `T` is the
    /// token count of `layout` under `codec`.
    pub fn desk(codec: &TokenizerConfig, layout: &AdapterLayout, seed: u64) -> Self {
        Self {
            schedule: vec![[16, 1, 64], [16, 1, 32], [token_plan(layout, codec).len(), codec.pad_rows, codec.pad_cols]],
            kernel: 3,
            seed,
        }
    }

    pub fn head(&self) -> Shape3 {
        self.schedule[0]
    }

    pub fn tail(&self) -> Shape3 {
        *self.schedule.last().expect("checked non-empty")
    }

    pub fn check(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(SolarError::Schedule(format!("kernel {} must be odd and positive", self.kernel)));
        }
        propagate_shapes(&self.schedule).map(|_| ())
    }

    /// Fails unless the schedule tail is `(T, pad_rows, pad_cols)` for `layout`.
    pub fn check_codec(&self, codec: &TokenizerConfig, layout: &AdapterLayout) -> Result<()> {
        self.check()?;
        let want = [token_plan(layout, codec).len(), codec.pad_rows, codec.pad_cols];
        if self.tail() != want {
            return Err(SolarError::Config(format!(
                "schedule tail {:?} does not match codec output {want:?}",
                self.tail()
            )));
        }
        Ok(())
    }
}

/// The block stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub blocks: Vec<DecoderBlock>,
}

pub(crate) type DecoderCache = Vec<block::BlockCache>;

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.check()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
        let blocks = propagate_shapes(&config.schedule)?
            .iter()
            .map(|s| DecoderBlock::init(s.input, s.output, config.kernel, &mut rng))
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| DecoderBlock::zeros(b.input, b.output, b.kernel))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(DecoderBlock::num_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(DecoderBlock::is_finite)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.tensors().into_iter().flat_map(|t| t.data().to_vec()))
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(SolarError::Shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for b in &mut self.blocks {
            for t in b.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    pub(crate) fn forward_one(&self, x: &[f64]) -> (Vec<f64>, DecoderCache) {
        let mut cur = x.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward_one(&cur);
            caches.push(c);
            cur = y;
        }
        (cur, caches)
    }

    pub(crate) fn backward_one(&self, caches: &DecoderCache, gy: &[f64], grads: &mut Decoder) {
        let mut g = gy.to_vec();
        for ((b, c), gb) in self.blocks.iter().zip(caches).zip(&mut grads.blocks).rev() {
            g = b.backward_one(c, &g, gb);
        }
    }

    /// `[B, N, L, C]` → `[B, N', L', C']` along the whole schedule.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut cur = input.clone();
        for b in &self.blocks {
            cur = block_forward(&cur, b)?;
        }
        Ok(cur)
    }
}

/// A trained decoder with everything needed to turn prompts into an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub decoder: Decoder,
    pub embedder: EmbedderConfig,
    pub codec: TokenizerConfig,
    pub layout: AdapterLayout,
    /// Per-segment statistics used to denormalize generated tokens.
    pub norm_stats: Vec<LayerStats>,
}

impl DecoderParams {
    /// Fresh decoder for `layout`. The embedder dimension follows the
    /// schedule head; normalization stats start as identity.
    pub fn init(config: DecoderConfig, codec: TokenizerConfig, layout: AdapterLayout) -> Result<Self> {
        config.check_codec(&codec, &layout)?;
        let embedder = EmbedderConfig {
            dim: config.head()[2],
            ..EmbedderConfig::default()
        };
        let norm_stats = vec![
            LayerStats {
                mean: 0.0,
                std: 1.0,
                floored: false
            };
            layout.segments.len()
        ];
        Ok(Self {
            decoder: Decoder::new(config)?,
            embedder,
            codec,
            layout,
            norm_stats,
        })
    }

    pub fn desk(codec: TokenizerConfig, layout: AdapterLayout, seed: u64) -> Result<Self> {
        Self::init(DecoderConfig::desk(&codec, &layout, seed), codec, layout)
    }

    pub fn head(&self) -> Shape3 {
        self.decoder.config.head()
    }
}

/// Embeds each prompt, averages the embeddings (order-invariant: summed in
/// a canonical order) and tiles the mean over `N` and `L`. Returns the
/// `(N, L, C)` state.
pub fn prompt_state(prompts: &[Sample], embedder: &EmbedderConfig, head: Shape3) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(SolarError::EmptySource("prompt batch"));
    }
    let [n, l, c] = head;
    if embedder.dim != c {
        return Err(SolarError::Shape(format!("embedding dim {} != schedule channels {c}", embedder.dim)));
    }
    let mut embs: Vec<Embedding> = prompts.iter().map(|p| embed(&p.prompt_text, embedder)).collect::<Result<_>>()?;
    embs.sort_by(|a, b| {
        a.source_hash.cmp(&b.source_hash).then_with(|| {
            let ka: Vec<u64> = a.vector.iter().map(|v| v.to_bits()).collect();
            let kb: Vec<u64> = b.vector.iter().map(|v| v.to_bits()).collect();
            ka.cmp(&kb)
        })
    });
    let mut mean = vec![0.0; c];
    for e in &embs {
        mean.iter_mut().zip(&e.vector).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= embs.len() as f64);
    Ok((0..n * l).flat_map(|_| mean.iter().copied()).collect())
}

/// Stacks prompt batches into a `[B, N, L, C]` tensor.
pub fn prompt_tensor(batches: &[Vec<Sample>], embedder: &EmbedderConfig, head: Shape3) -> Result<Tensor> {
    if batches.is_empty() {
        return Err(SolarError::EmptySource("prompt batches"));
    }
    let mut data = Vec::with_capacity(batches.len() * volume(head));
    for b in batches {
        data.extend(prompt_state(b, embedder, head)?);
    }
    Tensor::new(vec![batches.len(), head[0], head[1], head[2]], data)
}

/// Runs the decoder on `[B, N, L, C]` embeddings and wraps each output as a
/// token grid positioned by the parameter layout.
pub fn decoder_forward(embeddings: &Tensor, params: &DecoderParams) -> Result<Vec<TokenGrid>> {
    params.decoder.config.check_codec(&params.codec, &params.layout)?;
    let out = params.decoder.forward(embeddings)?;
    let per = volume(params.decoder.config.tail());
    out.data()
        .chunks(per)
        .map(|v| grid_from_values(v, &params.layout, &params.norm_stats, &params.codec))
        .collect()
}

/// prompts → embedding → decoder → detokenize → denormalize → adapter.
pub fn sample_adapter(
    prompts: &[Sample],
    params: &DecoderParams,
    codec: &TokenizerConfig,
    layout: &AdapterLayout,
) -> Result<LoraAdapter> {
    params.decoder.config.check_codec(codec, layout)?;
    if params.norm_stats.len() != layout.segments.len() {
        return Err(SolarError::CodecIntegrity(format!(
            "decoder carries {} norm stats, layout has {} segments",
            params.norm_stats.len(),
            layout.segments.len()
        )));
    }
    let x = prompt_state(prompts, &params.embedder, params.head())?;
    let (y, _) = params.decoder.forward_one(&x);
    let grid = grid_from_values(&y, layout, &params.norm_stats, codec)?;
    let normalized = detokenize(&grid, layout, codec)?;
    let flat = denormalize_layers(&normalized, layout, &params.norm_stats)?;
    unflatten_adapter(&flat, layout)
}
