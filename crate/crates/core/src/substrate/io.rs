//! Adapter checkpoint container.
//!
//! ```text
//! "SLRA" | version u32 | layer count u32
//! per layer: id (u32 len + utf-8) | r u32 | d_in u32 | d_out u32 | A f64[r·d_in] | B f64[d_out·r]
//! scale f64
//! ```
//! All integers and floats little-endian, matrices row-major.

use std::collections::BTreeMap;

use super::{LoraAdapter, LoraPair};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Result, SolarError};
use crate::tensor::Tensor;

pub const ADAPTER_MAGIC: &[u8; 4] = b"SLRA";
const VERSION: u32 = 1;

pub fn write_adapter(adapter: &LoraAdapter) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.magic(ADAPTER_MAGIC, VERSION);
    w.len_u32(adapter.entries.len());
    for (id, p) in &adapter.entries {
        w.str(id);
        w.len_u32(p.rank());
        w.len_u32(p.d_in());
        w.len_u32(p.d_out());
        w.f64s(p.a.data());
        w.f64s(p.b.data());
    }
    w.f64(adapter.scale);
    w.buf
}

pub fn read_adapter(bytes: &[u8]) -> Result<LoraAdapter> {
    let mut r = ByteReader::new(bytes);
    let version = r.magic(ADAPTER_MAGIC)?;
    if version != VERSION {
        return Err(SolarError::Format(format!("unsupported adapter version {version}")));
    }
    let count = r.usize()?;
    let mut entries = BTreeMap::new();
    let mut rank = None;
    for _ in 0..count {
        let id = r.str()?;
        let (rk, d_in, d_out) = (r.usize()?, r.usize()?, r.usize()?);
        if *rank.get_or_insert(rk) != rk {
            return Err(SolarError::Format(format!("layer {id:?} has rank {rk}, others differ")));
        }
        let a = Tensor::new(vec![rk, d_in], r.f64s(rk * d_in)?)?;
        let b = Tensor::new(vec![d_out, rk], r.f64s(d_out * rk)?)?;
        if entries.insert(id.clone(), LoraPair { a, b }).is_some() {
            return Err(SolarError::Format(format!("duplicate layer {id:?}")));
        }
    }
    let scale = r.f64()?;
    r.finish()?;
    Ok(LoraAdapter {
        rank: rank.unwrap_or(0),
        scale,
        entries,
    })
}
