//! Bit-exact f64 serialization as hex-encoded little-endian bytes.
//! JSON number round-trips are not guaranteed to preserve the exact bit
//! pattern, so replay files and checkpoints use this encoding instead.

use crate::error::{Error, Result};

pub fn encode_f64s(values: impl IntoIterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    hex::encode(bytes)
}

pub fn decode_f64s(encoded: &str) -> Result<Vec<f64>> {
    let bytes = hex::decode(encoded)
        .map_err(|e| Error::Schema(format!("bad hex float block: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Schema(format!(
            "hex float block length {} is not a multiple of 8 bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
