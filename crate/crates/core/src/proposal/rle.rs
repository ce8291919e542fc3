//! Run-length mask files: a sequence of little-endian `u32` pairs
//! `(skip, run)` over the row-major bitmap. Pixels after the last run are 0.

use bitvec::prelude::*;

use super::MaskBits;
use crate::error::{Error, Result};

pub fn encode_rle(bits: &BitSlice<u64, Lsb0>) -> Vec<u8> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(start) = bits[pos..].first_one().map(|o| o + pos) {
        let run = bits[start..].first_zero().unwrap_or(bits.len() - start);
        out.extend_from_slice(&((start - pos) as u32).to_le_bytes());
        out.extend_from_slice(&(run as u32).to_le_bytes());
        pos = start + run;
    }
    out
}

pub fn decode_rle(bytes: &[u8], len: usize) -> Result<MaskBits> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "RLE payload of {} bytes is not a whole number of (skip, run) pairs",
            bytes.len()
        )));
    }
    let mut bits = MaskBits::repeat(false, len);
    let mut pos = 0usize;
    for pair in bytes.chunks_exact(8) {
        let skip = u32::from_le_bytes(pair[..4].try_into().expect("4 bytes")) as usize;
        let run = u32::from_le_bytes(pair[4..].try_into().expect("4 bytes")) as usize;
        let start = pos + skip;
        let end = start + run;
        if end > len {
            return Err(Error::Format(format!(
                "RLE run ends at pixel {end}, beyond the {len}-pixel mask"
            )));
        }
        bits[start..end].fill(true);
        pos = end;
    }
    Ok(bits)
}
