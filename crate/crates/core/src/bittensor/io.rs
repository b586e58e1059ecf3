//! `BBT1` serialization: magic, rank, dims, bits_per_row (all little-endian
//! `u64`), then the packed words little-endian.

use std::io::{Read, Write};

use super::BitTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BBT1";
const MAX_RANK: u64 = 16;

pub fn write_bittensor<W: Write>(t: &BitTensor, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    out.write_all(&(t.bits_per_row() as u64).to_le_bytes())?;
    for &w in t.words() {
        out.write_all(&w.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_bittensor<R: Read>(mut r: R) -> Result<BitTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!("bad magic {magic:?}")));
    }
    let rank = read_u64(&mut r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Parse(format!("unsupported rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let bits = read_u64(&mut r)? as usize;
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let n_words = rows
        .checked_mul(super::words_for(bits))
        .ok_or_else(|| Error::Parse("word count overflows".into()))?;
    let mut words = Vec::with_capacity(n_words.min(1 << 24));
    for _ in 0..n_words {
        words.push(read_u64(&mut r)?);
    }
    BitTensor::from_words(words, shape, bits)
}
