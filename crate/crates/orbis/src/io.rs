//! Binary fixture formats.
//!
//! Three little-endian containers, each with a 4-byte magic and a u32
//! version:
//!
//! * `ORBT` — token matrix: `n_tokens: u32, n_channels: u32, dtype: u8`
//!   (0 = real32) followed by row-major f32 values;
//! * `ORBP` — token pair set: `n_tokens: u32, pair_count: u32` followed by
//!   `(src: u32, dst: u32, loss: f32)` triples. The dst set is reconstructed
//!   from the pairs on load;
//! * `ORBQ` — quantized activation: `n_tokens: u32, n_channels: u32`,
//!   per-channel f32 scales, then codes packed two per byte,
//!   little-nibble-first, as two's-complement nibbles.

use crate::error::{Error, Result};
use crate::matching::{TokenPair, TokenPairSet};
use crate::quant::QuantizedActivation;
use crate::tensor::TokenMatrix;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const DTYPE_REAL32: u8 = 0;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::MalformedFile(format!(
            "bad magic: expected {:?}, got {:?}",
            std::str::from_utf8(magic).unwrap_or("?"),
            buf
        )));
    }
    Ok(())
}

fn expect_version<R: Read>(r: &mut R) -> Result<()> {
    let v = read_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::MalformedFile(format!(
            "unsupported format version {v}"
        )));
    }
    Ok(())
}

fn check_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
}

/// Writes a token matrix as real32 values (precision is narrowed to f32).
pub fn write_token_matrix<W: Write>(w: &mut W, x: &TokenMatrix) -> Result<()> {
    w.write_all(b"ORBT")?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, check_u32(x.n_tokens(), "n_tokens")?)?;
    write_u32(w, check_u32(x.n_channels(), "n_channels")?)?;
    w.write_all(&[DTYPE_REAL32])?;
    for &v in x.data() {
        write_f32(w, v as f32)?;
    }
    Ok(())
}

pub fn read_token_matrix<R: Read>(r: &mut R) -> Result<TokenMatrix> {
    expect_magic(r, b"ORBT")?;
    expect_version(r)?;
    let n_tokens = read_u32(r)? as usize;
    let n_channels = read_u32(r)? as usize;
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] != DTYPE_REAL32 {
        return Err(Error::MalformedFile(format!(
            "unsupported dtype tag {}",
            dtype[0]
        )));
    }
    let count = n_tokens
        .checked_mul(n_channels)
        .ok_or_else(|| Error::MalformedFile("matrix size overflows".into()))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(read_f32(r)? as f64);
    }
    TokenMatrix::new(n_tokens, n_channels, data)
        .map_err(|e| Error::MalformedFile(format!("invalid matrix payload: {e}")))
}

/// Writes the retained pairs. Pair losses are narrowed to f32.
pub fn write_pair_set<W: Write>(w: &mut W, pairs: &TokenPairSet) -> Result<()> {
    w.write_all(b"ORBP")?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, check_u32(pairs.n_tokens(), "n_tokens")?)?;
    write_u32(w, check_u32(pairs.pairs().len(), "pair_count")?)?;
    for p in pairs.pairs() {
        write_u32(w, check_u32(p.src, "src")?)?;
        write_u32(w, check_u32(p.dst, "dst")?)?;
        write_f32(w, p.loss as f32)?;
    }
    Ok(())
}

/// Reads a pair set; the dst set becomes the set of dst indices that appear
/// in the pairs (destinations without a retained pair are not recoverable
/// from the wire format and are not needed by reduce/restore).
pub fn read_pair_set<R: Read>(r: &mut R) -> Result<TokenPairSet> {
    expect_magic(r, b"ORBP")?;
    expect_version(r)?;
    let n_tokens = read_u32(r)? as usize;
    let pair_count = read_u32(r)? as usize;
    let mut pairs = Vec::with_capacity(pair_count);
    let mut dst_set = Vec::new();
    for _ in 0..pair_count {
        let src = read_u32(r)? as usize;
        let dst = read_u32(r)? as usize;
        let loss = read_f32(r)? as f64;
        dst_set.push(dst);
        pairs.push(TokenPair { src, dst, loss });
    }
    TokenPairSet::new(n_tokens, pairs, dst_set)
        .map_err(|e| Error::MalformedFile(format!("invalid pair payload: {e}")))
}

/// Writes a quantized activation; codes are packed two per byte with the
/// even-index element in the low nibble.
pub fn write_quantized<W: Write>(w: &mut W, q: &QuantizedActivation) -> Result<()> {
    w.write_all(b"ORBQ")?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, check_u32(q.n_tokens(), "n_tokens")?)?;
    write_u32(w, check_u32(q.n_channels(), "n_channels")?)?;
    for &s in q.scales() {
        write_f32(w, s as f32)?;
    }
    let codes = q.codes();
    for chunk in codes.chunks(2) {
        let lo = (chunk[0] as u8) & 0x0F;
        let hi = if chunk.len() > 1 {
            ((chunk[1] as u8) & 0x0F) << 4
        } else {
            0
        };
        w.write_all(&[lo | hi])?;
    }
    Ok(())
}

fn nibble_to_code(n: u8) -> Result<i8> {
    let v = if n & 0x8 != 0 {
        (n | 0xF0) as i8
    } else {
        n as i8
    };
    if !(-7..=7).contains(&v) {
        return Err(Error::MalformedFile(format!("code nibble {v} out of range")));
    }
    Ok(v)
}

pub fn read_quantized<R: Read>(r: &mut R) -> Result<QuantizedActivation> {
    expect_magic(r, b"ORBQ")?;
    expect_version(r)?;
    let n_tokens = read_u32(r)? as usize;
    let n_channels = read_u32(r)? as usize;
    let mut scales = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        scales.push(read_f32(r)? as f64);
    }
    let count = n_tokens
        .checked_mul(n_channels)
        .ok_or_else(|| Error::MalformedFile("activation size overflows".into()))?;
    let mut codes = Vec::with_capacity(count);
    let mut byte = [0u8; 1];
    while codes.len() < count {
        r.read_exact(&mut byte)?;
        codes.push(nibble_to_code(byte[0] & 0x0F)?);
        if codes.len() < count {
            codes.push(nibble_to_code(byte[0] >> 4)?);
        }
    }
    QuantizedActivation::new(n_tokens, n_channels, codes, scales)
        .map_err(|e| Error::MalformedFile(format!("invalid quantized payload: {e}")))
}

pub fn save_token_matrix(path: &Path, x: &TokenMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_token_matrix(&mut f, x)
}

pub fn load_token_matrix(path: &Path) -> Result<TokenMatrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_token_matrix(&mut f)
}

pub fn save_pair_set(path: &Path, pairs: &TokenPairSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pair_set(&mut f, pairs)
}

pub fn load_pair_set(path: &Path) -> Result<TokenPairSet> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_pair_set(&mut f)
}

pub fn save_quantized(path: &Path, q: &QuantizedActivation) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_quantized(&mut f, q)
}

pub fn load_quantized(path: &Path) -> Result<QuantizedActivation> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_quantized(&mut f)
}
