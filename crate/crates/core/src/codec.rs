//! Parameter tokenization: split a flattened adapter by factor matrix,
//! normalize each matrix, cut it into uniform tiles, pad every tile to a
//! common shape and tag it with a 2-D position (matrix index, tile index).
//! [`detokenize`] inverts [`tokenize`] exactly.

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Result, SolarError};
use crate::substrate::{flatten_adapter, AdapterLayout, LoraAdapter};
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-8;
pub const GRID_MAGIC: &[u8; 4] = b"SLRT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub token_rows: usize,
    pub token_cols: usize,
    pub pad_rows: usize,
    pub pad_cols: usize,
    pub pad_value: f64,
    pub perm_states: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TokenizerConfig {
    pub fn desk() -> Self {
        Self {
            token_rows: 4,
            token_cols: 8,
            pad_rows: 5,
            pad_cols: 10,
            pad_value: 0.0,
            perm_states: 1,
        }
    }

    /// 8×128 tiles padded to 10×130.
    pub fn full_scale() -> Self {
        Self {
            token_rows: 8,
            token_cols: 128,
            pad_rows: 10,
            pad_cols: 130,
            pad_value: 0.0,
            perm_states: 1,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.token_rows == 0 || self.token_cols == 0 || self.perm_states == 0 {
            return Err(SolarError::Config("token shape and perm_states must be positive".into()));
        }
        if self.pad_rows < self.token_rows || self.pad_cols < self.token_cols {
            return Err(SolarError::Config(format!(
                "pad {}x{} smaller than token {}x{}",
                self.pad_rows, self.pad_cols, self.token_rows, self.token_cols
            )));
        }
        if !self.pad_value.is_finite() {
            return Err(SolarError::Config("pad_value must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: f64,
    pub std: f64,
    /// The population std fell below [`STD_FLOOR`] and was replaced by it.
    pub floored: bool,
}

/// Per-matrix `(x − mean) / std` with population std floored at [`STD_FLOOR`].
pub fn normalize_layers(flat: &[f64], layout: &AdapterLayout) -> Result<(Vec<f64>, Vec<LayerStats>)> {
    check_layout(flat, layout)?;
    let mut out = Vec::with_capacity(flat.len());
    let mut stats = Vec::with_capacity(layout.segments.len());
    for (off, len) in layout.spans() {
        let xs = &flat[off..off + len];
        if len < 2 {
            return Err(SolarError::Config(format!("segment at {off} has {len} value(s), need 2")));
        }
        let n = len as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let raw = var.sqrt();
        let floored = raw < STD_FLOOR;
        let std = if floored { STD_FLOOR } else { raw };
        out.extend(xs.iter().map(|x| (x - mean) / std));
        stats.push(LayerStats { mean, std, floored });
    }
    Ok((out, stats))
}

pub fn denormalize_layers(normalized: &[f64], layout: &AdapterLayout, stats: &[LayerStats]) -> Result<Vec<f64>> {
    check_layout(normalized, layout)?;
    if stats.len() != layout.segments.len() {
        return Err(SolarError::CodecIntegrity(format!(
            "{} stats for {} segments",
            stats.len(),
            layout.segments.len()
        )));
    }
    let mut out = Vec::with_capacity(normalized.len());
    for ((off, len), st) in layout.spans().into_iter().zip(stats) {
        out.extend(normalized[off..off + len].iter().map(|z| z * st.std + st.mean));
    }
    Ok(out)
}

fn check_layout(flat: &[f64], layout: &AdapterLayout) -> Result<()> {
    if layout.segments.is_empty() {
        return Err(SolarError::Config("empty layout".into()));
    }
    if flat.len() != layout.total_len() {
        return Err(SolarError::CodecIntegrity(format!(
            "vector has {} values, layout needs {}",
            flat.len(),
            layout.total_len()
        )));
    }
    Ok(())
}

/// Where one tile comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub segment: usize,
    pub in_layer: usize,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Tiles in token order: segment by segment, row blocks outermost, column
/// blocks inner. A matrix with as many rows as a token is cut purely along
/// columns.
pub fn token_plan(layout: &AdapterLayout, cfg: &TokenizerConfig) -> Vec<Tile> {
    let mut plan = Vec::new();
    for (si, seg) in layout.segments.iter().enumerate() {
        let mut k = 0;
        for row0 in (0..seg.rows).step_by(cfg.token_rows) {
            for col0 in (0..seg.cols).step_by(cfg.token_cols) {
                plan.push(Tile {
                    segment: si,
                    in_layer: k,
                    row0,
                    col0,
                    rows: cfg.token_rows.min(seg.rows - row0),
                    cols: cfg.token_cols.min(seg.cols - col0),
                });
                k += 1;
            }
        }
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub pad_rows: usize,
    pub pad_cols: usize,
    /// Each `pad_rows × pad_cols`, row-major.
    pub tokens: Vec<Vec<f64>>,
    pub layer_index: Vec<usize>,
    pub in_layer_index: Vec<usize>,
    pub pad_mask: Vec<Vec<u8>>,
    pub norm_stats: Vec<LayerStats>,
    pub perm_state: usize,
    pub perm_states: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn perm_one_hot(&self) -> Vec<u8> {
        (0..self.perm_states).map(|i| u8::from(i == self.perm_state)).collect()
    }

    pub fn with_perm_state(mut self, state: usize) -> Result<Self> {
        if state >= self.perm_states {
            return Err(SolarError::Config(format!(
                "perm state {state} outside [0, {})",
                self.perm_states
            )));
        }
        self.perm_state = state;
        Ok(self)
    }

    pub fn real_count(&self) -> usize {
        self.pad_mask.iter().flatten().map(|&m| m as usize).sum()
    }

    /// Tokens stacked as a `[T, pad_rows, pad_cols]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.tokens.iter().flatten().copied().collect();
        Tensor::new(vec![self.len(), self.pad_rows, self.pad_cols], data).expect("consistent grid")
    }

    pub fn mask_flat(&self) -> Vec<u8> {
        self.pad_mask.iter().flatten().copied().collect()
    }
}

pub fn tokenize(
    normalized: &[f64],
    layout: &AdapterLayout,
    stats: &[LayerStats],
    cfg: &TokenizerConfig,
) -> Result<TokenGrid> {
    cfg.check()?;
    check_layout(normalized, layout)?;
    let spans = layout.spans();
    let plan = token_plan(layout, cfg);
    let cell = cfg.pad_rows * cfg.pad_cols;
    let mut grid = TokenGrid {
        pad_rows: cfg.pad_rows,
        pad_cols: cfg.pad_cols,
        tokens: Vec::with_capacity(plan.len()),
        layer_index: Vec::with_capacity(plan.len()),
        in_layer_index: Vec::with_capacity(plan.len()),
        pad_mask: Vec::with_capacity(plan.len()),
        norm_stats: stats.to_vec(),
        perm_state: 0,
        perm_states: cfg.perm_states,
    };
    for t in &plan {
        let seg = &layout.segments[t.segment];
        let (off, _) = spans[t.segment];
        let mut tok = vec![cfg.pad_value; cell];
        let mut mask = vec![0u8; cell];
        for r in 0..t.rows {
            for c in 0..t.cols {
                tok[r * cfg.pad_cols + c] = normalized[off + (t.row0 + r) * seg.cols + t.col0 + c];
                mask[r * cfg.pad_cols + c] = 1;
            }
        }
        grid.tokens.push(tok);
        grid.pad_mask.push(mask);
        grid.layer_index.push(t.segment);
        grid.in_layer_index.push(t.in_layer);
    }
    Ok(grid)
}

/// Flatten, normalize per matrix and tokenize in one step.
pub fn tokenize_adapter(adapter: &LoraAdapter, cfg: &TokenizerConfig) -> Result<(TokenGrid, AdapterLayout)> {
    let (flat, layout) = flatten_adapter(adapter);
    let (normalized, stats) = normalize_layers(&flat, &layout)?;
    Ok((tokenize(&normalized, &layout, &stats, cfg)?, layout))
}

/// Builds a grid around raw token values (e.g. decoder output) using the
/// positions and mask implied by `layout`. Padding entries are overwritten
/// with `pad_value`.
pub fn grid_from_values(
    values: &[f64],
    layout: &AdapterLayout,
    stats: &[LayerStats],
    cfg: &TokenizerConfig,
) -> Result<TokenGrid> {
    cfg.check()?;
    let zeros = vec![0.0; layout.total_len()];
    let mut grid = tokenize(&zeros, layout, stats, cfg)?;
    let cell = cfg.pad_rows * cfg.pad_cols;
    if values.len() != grid.len() * cell {
        return Err(SolarError::CodecIntegrity(format!(
            "{} values for {} tokens of {cell}",
            values.len(),
            grid.len()
        )));
    }
    for (i, (tok, mask)) in grid.tokens.iter_mut().zip(&grid.pad_mask).enumerate() {
        for j in 0..cell {
            tok[j] = if mask[j] == 1 { values[i * cell + j] } else { cfg.pad_value };
        }
    }
    Ok(grid)
}

pub fn detokenize(grid: &TokenGrid, layout: &AdapterLayout, cfg: &TokenizerConfig) -> Result<Vec<f64>> {
    cfg.check()?;
    if grid.pad_rows != cfg.pad_rows || grid.pad_cols != cfg.pad_cols {
        return Err(SolarError::CodecIntegrity(format!(
            "grid pad {}x{} vs config {}x{}",
            grid.pad_rows, grid.pad_cols, cfg.pad_rows, cfg.pad_cols
        )));
    }
    let plan = token_plan(layout, cfg);
    let n = grid.tokens.len();
    if plan.len() != n || grid.pad_mask.len() != n || grid.layer_index.len() != n || grid.in_layer_index.len() != n {
        return Err(SolarError::CodecIntegrity(format!(
            "grid has {n} tokens, layout implies {}",
            plan.len()
        )));
    }
    let spans = layout.spans();
    let cell = cfg.pad_rows * cfg.pad_cols;
    let mut out = vec![0.0; layout.total_len()];
    for (i, t) in plan.iter().enumerate() {
        if grid.layer_index[i] != t.segment || grid.in_layer_index[i] != t.in_layer {
            return Err(SolarError::CodecIntegrity(format!("token {i} position does not match layout")));
        }
        let (tok, mask) = (&grid.tokens[i], &grid.pad_mask[i]);
        if tok.len() != cell || mask.len() != cell {
            return Err(SolarError::CodecIntegrity(format!("token {i} has wrong size")));
        }
        for r in 0..cfg.pad_rows {
            for c in 0..cfg.pad_cols {
                let real = r < t.rows && c < t.cols;
                if mask[r * cfg.pad_cols + c] != u8::from(real) {
                    return Err(SolarError::CodecIntegrity(format!(
                        "token {i} mask disagrees with layout at ({r}, {c})"
                    )));
                }
            }
        }
        let seg = &layout.segments[t.segment];
        let (off, _) = spans[t.segment];
        for r in 0..t.rows {
            for c in 0..t.cols {
                out[off + (t.row0 + r) * seg.cols + t.col0 + c] = tok[r * cfg.pad_cols + c];
            }
        }
    }
    Ok(out)
}

const GRID_VERSION: u32 = 1;

/// Debug dump: header, one record per token (position, values, mask), then
/// the normalization stats section.
pub fn write_grid(grid: &TokenGrid) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.magic(GRID_MAGIC, GRID_VERSION);
    w.len_u32(grid.len());
    w.len_u32(grid.pad_rows);
    w.len_u32(grid.pad_cols);
    w.len_u32(grid.perm_states);
    w.len_u32(grid.perm_state);
    for i in 0..grid.len() {
        w.len_u32(grid.layer_index[i]);
        w.len_u32(grid.in_layer_index[i]);
        w.f64s(&grid.tokens[i]);
        grid.pad_mask[i].iter().for_each(|&m| w.u8(m));
    }
    w.len_u32(grid.norm_stats.len());
    for s in &grid.norm_stats {
        w.f64(s.mean);
        w.f64(s.std);
        w.u8(u8::from(s.floored));
    }
    w.buf
}

pub fn read_grid(bytes: &[u8]) -> Result<TokenGrid> {
    let mut r = ByteReader::new(bytes);
    let version = r.magic(GRID_MAGIC)?;
    if version != GRID_VERSION {
        return Err(SolarError::Format(format!("unsupported grid version {version}")));
    }
    let (n, pad_rows, pad_cols) = (r.usize()?, r.usize()?, r.usize()?);
    let (perm_states, perm_state) = (r.usize()?, r.usize()?);
    let cell = pad_rows * pad_cols;
    let mut grid = TokenGrid {
        pad_rows,
        pad_cols,
        tokens: Vec::with_capacity(n),
        layer_index: Vec::with_capacity(n),
        in_layer_index: Vec::with_capacity(n),
        pad_mask: Vec::with_capacity(n),
        norm_stats: Vec::new(),
        perm_state,
        perm_states,
    };
    for _ in 0..n {
        grid.layer_index.push(r.usize()?);
        grid.in_layer_index.push(r.usize()?);
        grid.tokens.push(r.f64s(cell)?);
        grid.pad_mask.push((0..cell).map(|_| r.u8()).collect::<Result<_>>()?);
    }
    let ns = r.usize()?;
    for _ in 0..ns {
        grid.norm_stats.push(LayerStats {
            mean: r.f64()?,
            std: r.f64()?,
            floored: r.u8()? != 0,
        });
    }
    r.finish()?;
    Ok(grid)
}
