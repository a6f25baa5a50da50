use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TaskModel;
use crate::error::{Result, SolarError};
use crate::tensor::Tensor;

/// Low-rank factors for one linear map: `A` is `r × d_in`, `B` is `d_out × r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    /// Keyed by layer id; iteration order is the canonical layer order.
    pub entries: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    /// Standard initialisation: `A ~ N(0, 1/d_in)`, `B = 0`, so the initial
    /// delta is zero. Attaches to every linear map of `model`.
    pub fn init(model: &TaskModel, rank: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = model
            .layers()
            .iter()
            .map(|l| {
                let normal = Normal::new(0.0, 1.0 / (l.d_in() as f64).sqrt()).expect("finite std");
                let pair = LoraPair {
                    a: Tensor::from_fn(&[rank, l.d_in()], |_| normal.sample(&mut rng)),
                    b: Tensor::zeros(&[l.d_out(), rank]),
                };
                (l.id.clone(), pair)
            })
            .collect();
        Self { rank, scale, entries }
    }

    pub fn zeros(model: &TaskModel, rank: usize, scale: f64) -> Self {
        let entries = model
            .layers()
            .iter()
            .map(|l| {
                let pair = LoraPair {
                    a: Tensor::zeros(&[rank, l.d_in()]),
                    b: Tensor::zeros(&[l.d_out(), rank]),
                };
                (l.id.clone(), pair)
            })
            .collect();
        Self { rank, scale, entries }
    }

    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, p)| {
                let pair = LoraPair {
                    a: Tensor::zeros(p.a.shape()),
                    b: Tensor::zeros(p.b.shape()),
                };
                (k.clone(), pair)
            })
            .collect();
        Self {
            rank: self.rank,
            scale: self.scale,
            entries,
        }
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Fails unless every entry names a layer of `model` with matching dims.
    pub fn check_compat(&self, model: &TaskModel) -> Result<()> {
        for (id, p) in &self.entries {
            let layer = model
                .layer(id)
                .ok_or_else(|| SolarError::AdapterShape(format!("layer {id:?} not in model")))?;
            if p.a.shape() != [self.rank, layer.d_in()] || p.b.shape() != [layer.d_out(), self.rank] {
                return Err(SolarError::AdapterShape(format!(
                    "layer {id:?}: A {:?}, B {:?} do not fit weight {:?} at rank {}",
                    p.a.shape(),
                    p.b.shape(),
                    layer.weight.shape(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Dense `scale · B · A` for one layer.
    pub fn delta(&self, layer_id: &str) -> Result<Tensor> {
        let p = self
            .entries
            .get(layer_id)
            .ok_or_else(|| SolarError::AdapterShape(format!("no entry for {layer_id:?}")))?;
        Ok(p.b.matmul(&p.a)?.scaled(self.scale))
    }

    pub fn same_shape(&self, other: &LoraAdapter) -> bool {
        self.rank == other.rank
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, pa), (kb, pb))| {
                ka == kb && pa.a.shape() == pb.a.shape() && pa.b.shape() == pb.b.shape()
            })
    }

    /// `self += alpha · other` over all factors.
    pub fn axpy(&mut self, alpha: f64, other: &LoraAdapter) -> Result<()> {
        if !self.same_shape(other) {
            return Err(SolarError::AdapterShape("adapters differ in shape".into()));
        }
        for (p, q) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, y) in p.a.data_mut().iter_mut().zip(q.a.data()) {
                *x += alpha * y;
            }
            for (x, y) in p.b.data_mut().iter_mut().zip(q.b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.a.is_finite() && p.b.is_finite())
    }

    /// Short content digest over shapes, scale and factor bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rank as u64).to_le_bytes());
        h.update(self.scale.to_le_bytes());
        for (k, p) in &self.entries {
            h.update(k.as_bytes());
            for v in p.a.data().iter().chain(p.b.data()) {
                h.update(v.to_le_bytes());
            }
        }
        let out = h.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    A,
    B,
}

/// One factor matrix inside a flattened adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer_id: String,
    pub kind: MatrixKind,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayout {
    pub rank: usize,
    pub scale: f64,
    pub segments: Vec<Segment>,
}

impl AdapterLayout {
    pub fn total_len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    /// `(offset, len)` of every segment in the flat vector.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.segments
            .iter()
            .map(|s| {
                let span = (off, s.len());
                off += s.len();
                span
            })
            .collect()
    }
}

/// Concatenates every layer's `A` then `B` (row-major) in canonical layer order.
pub fn flatten_adapter(adapter: &LoraAdapter) -> (Vec<f64>, AdapterLayout) {
    let mut flat = Vec::with_capacity(adapter.num_params());
    let mut segments = Vec::with_capacity(2 * adapter.entries.len());
    for (id, p) in &adapter.entries {
        for (kind, m) in [(MatrixKind::A, &p.a), (MatrixKind::B, &p.b)] {
            flat.extend_from_slice(m.data());
            segments.push(Segment {
                layer_id: id.clone(),
                kind,
                rows: m.rows(),
                cols: m.cols(),
            });
        }
    }
    let layout = AdapterLayout {
        rank: adapter.rank,
        scale: adapter.scale,
        segments,
    };
    (flat, layout)
}

pub fn unflatten_adapter(flat: &[f64], layout: &AdapterLayout) -> Result<LoraAdapter> {
    if flat.len() != layout.total_len() {
        return Err(SolarError::AdapterShape(format!(
            "flat vector has {} values, layout needs {}",
            flat.len(),
            layout.total_len()
        )));
    }
    let mut entries: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    for (seg, (off, len)) in layout.segments.iter().zip(layout.spans()) {
        let t = Tensor::new(vec![seg.rows, seg.cols], flat[off..off + len].to_vec())?;
        let slot = entries.entry(seg.layer_id.clone()).or_default();
        match seg.kind {
            MatrixKind::A => slot.0 = Some(t),
            MatrixKind::B => slot.1 = Some(t),
        }
    }
    let entries = entries
        .into_iter()
        .map(|(id, (a, b))| match (a, b) {
            (Some(a), Some(b)) => Ok((id, LoraPair { a, b })),
            _ => Err(SolarError::AdapterShape(format!("layer {id:?} missing a factor"))),
        })
        .collect::<Result<_>>()?;
    Ok(LoraAdapter {
        rank: layout.rank,
        scale: layout.scale,
        entries,
    })
}
