//! One convolution primitive over a chosen plane of an `(N, L, C)` state, and
//! adaptive average pooling between state shapes.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// `(N, L, C)`
pub type Shape3 = [usize; 3];

pub fn volume(s: Shape3) -> usize {
    s[0] * s[1] * s[2]
}

fn strides(s: Shape3) -> [usize; 3] {
    [s[1] * s[2], s[2], 1]
}

/// Which two axes a convolution slides over; the third axis is the channel
/// axis and is fully mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Plane {
    /// Slides over `(L, C)`, channels `N`.
    Width,
    /// Slides over `(L, N)`, channels `C`.
    Height,
    /// Slides over `(N, L)`, channels `C`.
    Layer,
}

impl Plane {
    /// `(row axis, column axis, channel axis)` as indices into `(N, L, C)`.
    pub fn axes(self) -> (usize, usize, usize) {
        match self {
            Plane::Width => (1, 2, 0),
            Plane::Height => (1, 0, 2),
            Plane::Layer => (0, 1, 2),
        }
    }

    pub fn channels(self, s: Shape3) -> usize {
        s[self.axes().2]
    }
}

/// Rows `y` of the output for which `y + dy − pad` stays inside `0..n`.
fn valid(n: usize, d: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(d);
    let hi = (n + pad).saturating_sub(d).min(n);
    lo..hi.max(lo)
}

/// "Same"-padded `k × k` cross-correlation. `w` is `[R, R, k, k]` with `R` the
/// channel count of `plane` in `shape`.
pub fn conv_forward(x: &[f64], shape: Shape3, plane: Plane, w: &Tensor) -> Vec<f64> {
    let (ah, aw, ac) = plane.axes();
    let st = strides(shape);
    let (hh, ww, r) = (shape[ah], shape[aw], shape[ac]);
    let k = w.shape()[2];
    let pad = k / 2;
    let wd = w.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..r {
        for ci in 0..r {
            for dy in 0..k {
                for dx in 0..k {
                    let wv = wd[((o * r + ci) * k + dy) * k + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in valid(hh, dy, pad) {
                        let sy = y + dy - pad;
                        for xx in valid(ww, dx, pad) {
                            let sx = xx + dx - pad;
                            out[o * st[ac] + y * st[ah] + xx * st[aw]] +=
                                wv * x[ci * st[ac] + sy * st[ah] + sx * st[aw]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(∂/∂x, ∂/∂w)` for upstream gradient `gy`.
pub fn conv_backward(x: &[f64], shape: Shape3, plane: Plane, w: &Tensor, gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ah, aw, ac) = plane.axes();
    let st = strides(shape);
    let (hh, ww, r) = (shape[ah], shape[aw], shape[ac]);
    let k = w.shape()[2];
    let pad = k / 2;
    let wd = w.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wd.len()];
    for o in 0..r {
        for ci in 0..r {
            for dy in 0..k {
                for dx in 0..k {
                    let wi = ((o * r + ci) * k + dy) * k + dx;
                    let wv = wd[wi];
                    let mut acc = 0.0;
                    for y in valid(hh, dy, pad) {
                        let sy = y + dy - pad;
                        for xx in valid(ww, dx, pad) {
                            let sx = xx + dx - pad;
                            let g = gy[o * st[ac] + y * st[ah] + xx * st[aw]];
                            let xi = ci * st[ac] + sy * st[ah] + sx * st[aw];
                            acc += g * x[xi];
                            gx[xi] += g * wv;
                        }
                    }
                    gw[wi] = acc;
                }
            }
        }
    }
    (gx, gw)
}

/// Adaptive average pooling bin for output index `i` of `to` over `from`
/// inputs. Bins overlap or repeat when upsampling.
pub fn bin(i: usize, from: usize, to: usize) -> std::ops::Range<usize> {
    let start = i * from / to;
    let end = ((i + 1) * from).div_ceil(to);
    start..end
}

pub fn pool_forward(x: &[f64], from: Shape3, to: Shape3) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let sf = strides(from);
    let mut out = Vec::with_capacity(volume(to));
    for i in 0..to[0] {
        let b0 = bin(i, from[0], to[0]);
        for j in 0..to[1] {
            let b1 = bin(j, from[1], to[1]);
            for l in 0..to[2] {
                let b2 = bin(l, from[2], to[2]);
                let mut s = 0.0;
                for a in b0.clone() {
                    for b in b1.clone() {
                        for c in b2.clone() {
                            s += x[a * sf[0] + b * sf[1] + c];
                        }
                    }
                }
                out.push(s / (b0.len() * b1.len() * b2.len()) as f64);
            }
        }
    }
    out
}

pub fn pool_backward(gy: &[f64], from: Shape3, to: Shape3) -> Vec<f64> {
    if from == to {
        return gy.to_vec();
    }
    let sf = strides(from);
    let mut gx = vec![0.0; volume(from)];
    let mut idx = 0;
    for i in 0..to[0] {
        let b0 = bin(i, from[0], to[0]);
        for j in 0..to[1] {
            let b1 = bin(j, from[1], to[1]);
            for l in 0..to[2] {
                let b2 = bin(l, from[2], to[2]);
                let g = gy[idx] / (b0.len() * b1.len() * b2.len()) as f64;
                idx += 1;
                for a in b0.clone() {
                    for b in b1.clone() {
                        for c in b2.clone() {
                            gx[a * sf[0] + b * sf[1] + c] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}
