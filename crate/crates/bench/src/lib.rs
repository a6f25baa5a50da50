//! Fixtures shared by the benchmarks.

use solar_core::codec::TokenizerConfig;
use solar_core::decoder::{prompt_tensor, DecoderParams};
use solar_core::embedding::embed;
use solar_core::harness::{gen_task, Rule, SplitSizes, SyntheticTaskSpec, TaskBundle};
use solar_core::substrate::flatten_adapter;
use solar_core::{LoraAdapter, TaskModel, Tensor};

pub fn model() -> TaskModel {
    TaskModel::desk(0)
}

pub fn adapter(model: &TaskModel, seed: u64) -> LoraAdapter {
    LoraAdapter::init(model, 4, 1.0, seed)
}

pub fn bundle(seed: u64) -> TaskBundle {
    let sizes = SplitSizes {
        train: 256,
        eval: 64,
        test: 64,
        unlabeled: 128,
    };
    gen_task(&SyntheticTaskSpec::new("bench", Rule::KeywordMatch, seed).with_sizes(sizes)).expect("bench task")
}

pub fn decoder(model: &TaskModel, seed: u64) -> DecoderParams {
    let (_, layout) = flatten_adapter(&adapter(model, seed));
    DecoderParams::desk(TokenizerConfig::desk(), layout, seed).expect("desk decoder")
}

/// `[batches, N, L, C]` decoder input built from groups of 4 prompts.
pub fn decoder_input(params: &DecoderParams, bundle: &TaskBundle, batches: usize) -> Tensor {
    let groups: Vec<_> = bundle.train.samples.chunks(4).take(batches).map(|c| c.to_vec()).collect();
    prompt_tensor(&groups, &params.embedder, params.head()).expect("prompt tensor")
}

/// Deterministic pseudo-random tensor in `[-1, 1]`.
pub fn wavy(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.7548776662).fract() * 2.0 - 1.0)
}

pub fn prompt_embeddings(bundle: &TaskBundle, dim: usize) -> Vec<Vec<f64>> {
    let cfg = solar_core::embedding::EmbedderConfig {
        dim,
        ..Default::default()
    };
    bundle
        .unlabeled
        .samples
        .iter()
        .map(|s| embed(&s.prompt_text, &cfg).expect("non-empty prompt").vector)
        .collect()
}
