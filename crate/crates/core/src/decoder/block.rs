use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::{conv_backward, conv_forward, pool_backward, pool_forward, volume, Plane, Shape3};
use crate::error::{Result, SolarError};
use crate::tensor::Tensor;

/// Shapes a block passes through, from `input (N, L, C)` to
/// `output (N', L', C')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShapes {
    pub input: Shape3,
    /// After the first width convolution: `(N, L', C')`.
    pub after_w1: Shape3,
    /// After the second-path height convolution: `(N', L', C)`.
    pub after_h2: Shape3,
    pub output: Shape3,
}

impl BlockShapes {
    pub fn new(input: Shape3, output: Shape3) -> Self {
        let [n, _, c] = input;
        let [n2, l2, c2] = output;
        Self {
            input,
            after_w1: [n, l2, c2],
            after_h2: [n2, l2, c],
            output,
        }
    }
}

/// Runs shape propagation over a schedule without allocating any weights.
pub fn propagate_shapes(schedule: &[Shape3]) -> Result<Vec<BlockShapes>> {
    if schedule.len() < 2 {
        return Err(SolarError::Schedule(format!("need at least 2 shapes, got {}", schedule.len())));
    }
    if let Some(s) = schedule.iter().find(|s| s.contains(&0)) {
        return Err(SolarError::Schedule(format!("zero dimension in {s:?}")));
    }
    Ok(schedule.windows(2).map(|w| BlockShapes::new(w[0], w[1])).collect())
}

/// Five convolutions plus a bias over the output state:
///
/// ```text
/// c_W = H1(W1(x))
/// c_H = W2(H2(x))
/// y   = L((c_W + c_H + b) / 3)
/// ```
///
/// Each convolution is followed by adaptive average pooling to the next
/// shape on its path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub input: Shape3,
    pub output: Shape3,
    pub kernel: usize,
    pub conv_w1: Tensor,
    pub conv_h1: Tensor,
    pub conv_h2: Tensor,
    pub conv_w2: Tensor,
    pub conv_l: Tensor,
    pub bias: Tensor,
}

pub(crate) struct BlockCache {
    x: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
    mid: Vec<f64>,
}

impl DecoderBlock {
    pub fn shapes(&self) -> BlockShapes {
        BlockShapes::new(self.input, self.output)
    }

    pub fn zeros(input: Shape3, output: Shape3, kernel: usize) -> Self {
        let s = BlockShapes::new(input, output);
        let conv = |r: usize| Tensor::zeros(&[r, r, kernel, kernel]);
        Self {
            input,
            output,
            kernel,
            conv_w1: conv(Plane::Width.channels(s.input)),
            conv_h1: conv(Plane::Height.channels(s.after_w1)),
            conv_h2: conv(Plane::Height.channels(s.input)),
            conv_w2: conv(Plane::Width.channels(s.after_h2)),
            conv_l: conv(Plane::Layer.channels(s.output)),
            bias: Tensor::zeros(&output),
        }
    }

    /// Kernels `~ N(0, 1/(R·k²))`, bias zero.
    pub fn init(input: Shape3, output: Shape3, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut b = Self::zeros(input, output, kernel);
        for t in b.kernels_mut() {
            let fan_in = (t.shape()[1] * kernel * kernel) as f64;
            let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("finite std");
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        b
    }

    pub fn seeded(input: Shape3, output: Shape3, kernel: usize, seed: u64) -> Self {
        Self::init(input, output, kernel, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn kernels_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.conv_w1,
            &mut self.conv_h1,
            &mut self.conv_h2,
            &mut self.conv_w2,
            &mut self.conv_l,
        ]
    }

    /// All parameter tensors in storage order: w1, h1, h2, w2, l, bias.
    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.conv_w1,
            &self.conv_h1,
            &self.conv_h2,
            &self.conv_w2,
            &self.conv_l,
            &self.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.conv_w1,
            &mut self.conv_h1,
            &mut self.conv_h2,
            &mut self.conv_w2,
            &mut self.conv_l,
            &mut self.bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Forward pass for one `(N, L, C)` state.
    pub(crate) fn forward_one(&self, x: &[f64]) -> (Vec<f64>, BlockCache) {
        let s = self.shapes();
        let t1 = pool_forward(&conv_forward(x, s.input, Plane::Width, &self.conv_w1), s.input, s.after_w1);
        let c_w = pool_forward(&conv_forward(&t1, s.after_w1, Plane::Height, &self.conv_h1), s.after_w1, s.output);
        let t2 = pool_forward(&conv_forward(x, s.input, Plane::Height, &self.conv_h2), s.input, s.after_h2);
        let c_h = pool_forward(&conv_forward(&t2, s.after_h2, Plane::Width, &self.conv_w2), s.after_h2, s.output);
        let mid: Vec<f64> = c_w
            .iter()
            .zip(&c_h)
            .zip(self.bias.data())
            .map(|((a, b), c)| (a + b + c) / 3.0)
            .collect();
        let y = conv_forward(&mid, s.output, Plane::Layer, &self.conv_l);
        (
            y,
            BlockCache {
                x: x.to_vec(),
                t1,
                t2,
                mid,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns `∂/∂x`.
    pub(crate) fn backward_one(&self, cache: &BlockCache, gy: &[f64], grads: &mut DecoderBlock) -> Vec<f64> {
        let s = self.shapes();
        let (gmid, gl) = conv_backward(&cache.mid, s.output, Plane::Layer, &self.conv_l, gy);
        let gpath: Vec<f64> = gmid.iter().map(|g| g / 3.0).collect();

        let g = pool_backward(&gpath, s.after_w1, s.output);
        let (gt1, gh1) = conv_backward(&cache.t1, s.after_w1, Plane::Height, &self.conv_h1, &g);
        let g = pool_backward(&gt1, s.input, s.after_w1);
        let (gx1, gw1) = conv_backward(&cache.x, s.input, Plane::Width, &self.conv_w1, &g);

        let g = pool_backward(&gpath, s.after_h2, s.output);
        let (gt2, gw2) = conv_backward(&cache.t2, s.after_h2, Plane::Width, &self.conv_w2, &g);
        let g = pool_backward(&gt2, s.input, s.after_h2);
        let (gx2, gh2) = conv_backward(&cache.x, s.input, Plane::Height, &self.conv_h2, &g);

        for (t, g) in grads.tensors_mut().into_iter().zip([&gw1, &gh1, &gh2, &gw2, &gl, &gpath]) {
            t.data_mut().iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b);
        }
        gx1.iter().zip(&gx2).map(|(a, b)| a + b).collect()
    }
}

/// Applies `block` to every element of a `[B, N, L, C]` state.
pub fn block_forward(state: &Tensor, block: &DecoderBlock) -> Result<Tensor> {
    let sh = state.shape();
    if sh.len() != 4 || sh[1..] != block.input {
        return Err(SolarError::Schedule(format!(
            "state {:?} does not match block input [B, {:?}]",
            sh, block.input
        )));
    }
    let per = volume(block.input);
    let mut out = Vec::with_capacity(sh[0] * volume(block.output));
    for b in 0..sh[0] {
        let (y, _) = block.forward_one(&state.data()[b * per..(b + 1) * per]);
        out.extend(y);
    }
    Tensor::new(vec![sh[0], block.output[0], block.output[1], block.output[2]], out)
}
