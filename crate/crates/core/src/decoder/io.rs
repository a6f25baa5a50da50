//! `SLRD` container: schedule, kernel and seed, every block tensor, then the
//! embedder, codec, layout and normalization sections.

use super::{Decoder, DecoderConfig, DecoderParams};
use crate::binio::{ByteReader, ByteWriter};
use crate::codec::{LayerStats, TokenizerConfig};
use crate::embedding::EmbedderConfig;
use crate::error::{Result, SolarError};
use crate::substrate::{AdapterLayout, MatrixKind, Segment};

pub const DECODER_MAGIC: &[u8; 4] = b"SLRD";
const VERSION: u32 = 1;

pub fn write_decoder(p: &DecoderParams) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.magic(DECODER_MAGIC, VERSION);
    let cfg = &p.decoder.config;
    w.len_u32(cfg.kernel);
    w.u64(cfg.seed);
    w.len_u32(cfg.schedule.len());
    for s in &cfg.schedule {
        s.iter().for_each(|&d| w.len_u32(d));
    }
    for b in &p.decoder.blocks {
        for t in b.tensors() {
            w.f64s(t.data());
        }
    }
    w.len_u32(p.embedder.dim);
    w.len_u32(p.embedder.max_tokens);
    w.u8(u8::from(p.embedder.normalize));
    let c = &p.codec;
    for d in [c.token_rows, c.token_cols, c.pad_rows, c.pad_cols] {
        w.len_u32(d);
    }
    w.f64(c.pad_value);
    w.len_u32(c.perm_states);
    w.len_u32(p.layout.rank);
    w.f64(p.layout.scale);
    w.len_u32(p.layout.segments.len());
    for s in &p.layout.segments {
        w.str(&s.layer_id);
        w.u8(match s.kind {
            MatrixKind::A => 0,
            MatrixKind::B => 1,
        });
        w.len_u32(s.rows);
        w.len_u32(s.cols);
    }
    w.len_u32(p.norm_stats.len());
    for s in &p.norm_stats {
        w.f64(s.mean);
        w.f64(s.std);
        w.u8(u8::from(s.floored));
    }
    w.buf
}

pub fn read_decoder(bytes: &[u8]) -> Result<DecoderParams> {
    let mut r = ByteReader::new(bytes);
    let version = r.magic(DECODER_MAGIC)?;
    if version != VERSION {
        return Err(SolarError::Format(format!("unsupported decoder version {version}")));
    }
    let kernel = r.usize()?;
    let seed = r.u64()?;
    let n = r.usize()?;
    let mut schedule = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        schedule.push([r.usize()?, r.usize()?, r.usize()?]);
    }
    let config = DecoderConfig { schedule, kernel, seed };
    config.check()?;
    let mut decoder = Decoder {
        config: config.clone(),
        blocks: Vec::new(),
    };
    decoder.blocks = super::propagate_shapes(&config.schedule)?
        .iter()
        .map(|s| super::DecoderBlock::zeros(s.input, s.output, kernel))
        .collect();
    for b in &mut decoder.blocks {
        for t in b.tensors_mut() {
            let vals = r.f64s(t.len())?;
            t.data_mut().copy_from_slice(&vals);
        }
    }
    let embedder = EmbedderConfig {
        dim: r.usize()?,
        max_tokens: r.usize()?,
        normalize: r.u8()? != 0,
    };
    let codec = TokenizerConfig {
        token_rows: r.usize()?,
        token_cols: r.usize()?,
        pad_rows: r.usize()?,
        pad_cols: r.usize()?,
        pad_value: r.f64()?,
        perm_states: r.usize()?,
    };
    let rank = r.usize()?;
    let scale = r.f64()?;
    let ns = r.usize()?;
    let mut segments = Vec::with_capacity(ns.min(1024));
    for _ in 0..ns {
        let layer_id = r.str()?;
        let kind = match r.u8()? {
            0 => MatrixKind::A,
            1 => MatrixKind::B,
            k => return Err(SolarError::Format(format!("bad matrix kind {k}"))),
        };
        segments.push(Segment {
            layer_id,
            kind,
            rows: r.usize()?,
            cols: r.usize()?,
        });
    }
    let nstats = r.usize()?;
    let mut norm_stats = Vec::with_capacity(nstats.min(1024));
    for _ in 0..nstats {
        norm_stats.push(LayerStats {
            mean: r.f64()?,
            std: r.f64()?,
            floored: r.u8()? != 0,
        });
    }
    r.finish()?;
    let layout = AdapterLayout { rank, scale, segments };
    config.check_codec(&codec, &layout)?;
    Ok(DecoderParams {
        decoder,
        embedder,
        codec,
        layout,
        norm_stats,
    })
}
