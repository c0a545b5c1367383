//! Versioned binary parameter blobs: 8-byte magic, format version (u32 LE),
//! header length (u64 LE), JSON header, then every parameter as f64 LE.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const BLOB_VERSION: u32 = 1;
const PREFIX: usize = 20;

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, params: &ParamStore) -> Result<Vec<u8>> {
    let hjson = serde_json::to_vec(header).map_err(|e| Error::Input(e.to_string()))?;
    let mut buf = Vec::with_capacity(PREFIX + hjson.len() + 8 * params.scalar_count());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for v in &params.values {
        for x in v.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parses the header and returns it with the raw parameter payload.
pub fn decode<'a, H: DeserializeOwned>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    let bad = |m: String| Error::parse("checkpoint", m);
    if bytes.len() < PREFIX || &bytes[..8] != magic {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != BLOB_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(PREFIX..PREFIX + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: H = serde_json::from_slice(body).map_err(|e| Error::parse("checkpoint header", e.to_string()))?;
    Ok((header, &bytes[PREFIX + hlen..]))
}

/// Fills `params` (already shaped) from a payload, which must match exactly.
pub fn fill_params(params: &mut ParamStore, payload: &[u8]) -> Result<()> {
    if payload.len() != 8 * params.scalar_count() {
        return Err(Error::parse(
            "checkpoint",
            format!(
                "payload has {} bytes, parameters need {}",
                payload.len(),
                8 * params.scalar_count()
            ),
        ));
    }
    let mut chunks = payload.chunks_exact(8);
    for v in params.values.iter_mut() {
        for x in v.iter_mut() {
            *x = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
        }
    }
    Ok(())
}

pub fn shapes(params: &ParamStore) -> Vec<(String, [usize; 2])> {
    params
        .names
        .iter()
        .zip(&params.values)
        .map(|(n, v)| (n.clone(), [v.nrows(), v.ncols()]))
        .collect()
}
