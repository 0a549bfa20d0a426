//! Byte layouts for transcripts. All integers are little-endian.
//!
//! ```text
//! PairSeed       : u32 len = 40 | u32 i | u32 j | [u8; 32] seed
//! EncodedVector  : u32 len = 8 + 8d | u32 user | u32 d | d x f64 (IEEE-754 bits)
//! ```
//!
//! `len` counts the bytes after the length prefix.

use crate::correlated_noise::{EncodedVector, PairSeed};
use crate::error::{Error, Result};
use crate::rng::Seed;
use alloc::format;
use alloc::vec::Vec;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Decode(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.buf.len() < k {
            return Err(Error::Decode(format!("need {k} bytes, have {}", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(k);
        self.buf = tail;
        Ok(head)
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn frame(&mut self) -> Result<Reader<'a>> {
        let len = self.u32()?;
        Ok(Reader { buf: self.take(len)? })
    }
    fn done(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Decode(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

pub fn encode_pair_seed(p: &PairSeed) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(44);
    put_u32(&mut out, 40)?;
    put_u32(&mut out, p.i)?;
    put_u32(&mut out, p.j)?;
    out.extend_from_slice(&p.seed.0);
    Ok(out)
}

/// Decodes one frame and returns it with the number of bytes consumed.
pub fn decode_pair_seed(bytes: &[u8]) -> Result<(PairSeed, usize)> {
    let mut r = Reader { buf: bytes };
    let mut f = r.frame()?;
    let i = f.u32()?;
    let j = f.u32()?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(f.take(32)?);
    f.done()?;
    if i >= j {
        return Err(Error::Decode(format!("pair ({i}, {j}) not in canonical order")));
    }
    Ok((PairSeed { i, j, seed: Seed(seed) }, bytes.len() - r.buf.len()))
}

pub fn encode_vector(v: &EncodedVector) -> Result<Vec<u8>> {
    let d = v.payload.len();
    let mut out = Vec::with_capacity(12 + 8 * d);
    put_u32(&mut out, 8 + 8 * d)?;
    put_u32(&mut out, v.user)?;
    put_u32(&mut out, d)?;
    for x in &v.payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_vector(bytes: &[u8]) -> Result<(EncodedVector, usize)> {
    let mut r = Reader { buf: bytes };
    let mut f = r.frame()?;
    let user = f.u32()?;
    let d = f.u32()?;
    let mut payload = Vec::with_capacity(d.min(f.buf.len() / 8));
    for _ in 0..d {
        let b = f.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        payload.push(f64::from_le_bytes(a));
    }
    f.done()?;
    Ok((EncodedVector { user, payload }, bytes.len() - r.buf.len()))
}
