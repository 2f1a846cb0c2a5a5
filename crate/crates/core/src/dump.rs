//! Binary dump of channel blocks for cross-checking with external tools.
//!
//! Layout (little endian): magic `b"STBM"`, `u32` version, `u32` M, `u32` N,
//! `u32` K, then `K * N * M` complex samples as interleaved `f32` real and
//! imaginary parts, ordered user-major, then slot, then antenna.

use std::io::{Read, Write};

use crate::channel::ChannelBlock;
use crate::{CMatrix, Error, Result, C64};

pub const MAGIC: [u8; 4] = *b"STBM";
pub const VERSION: u32 = 1;

pub fn write_block<W: Write>(mut w: W, block: &ChannelBlock) -> Result<()> {
    let k = block.users();
    let n = block.slots();
    let m = block.h.first().map_or(0, |h| h.nrows());
    w.write_all(&MAGIC)?;
    for v in [VERSION, m as u32, n as u32, k as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * m * n * k);
    for h in &block.h {
        for j in 0..n {
            for i in 0..m {
                let c = h[(i, j)];
                buf.extend_from_slice(&(c.re as f32).to_le_bytes());
                buf.extend_from_slice(&(c.im as f32).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Per-user `M x N` matrices read back from a dump.
pub fn read_block<R: Read>(mut r: R) -> Result<Vec<CMatrix>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Parse("not a block dump".into()));
    }
    let mut word = [0u8; 4];
    let mut next = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let version = next(&mut r)?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported dump version {version}")));
    }
    let m = next(&mut r)? as usize;
    let n = next(&mut r)? as usize;
    let k = next(&mut r)? as usize;
    let mut raw = vec![0u8; 8 * m * n * k];
    r.read_exact(&mut raw)?;
    let mut it = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut h = CMatrix::zeros(m, n);
        for j in 0..n {
            for i in 0..m {
                let re = it.next().unwrap_or(0.0);
                let im = it.next().unwrap_or(0.0);
                h[(i, j)] = C64::new(re, im);
            }
        }
        out.push(h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_block, SpatialState, SystemConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_within_single_precision() {
        let cfg = SystemConfig { m: 16, n: 8, k: 2, ..Default::default() };
        let sp = [SpatialState::uniform(0.2, 0.01), SpatialState::uniform(-0.4, 0.02)];
        let b = generate_block(&cfg, &sp, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut bytes = Vec::new();
        write_block(&mut bytes, &b).unwrap();
        assert_eq!(bytes.len(), 20 + 8 * 16 * 8 * 2);
        let back = read_block(bytes.as_slice()).unwrap();
        for k in 0..2 {
            assert!((&back[k] - &b.h[k]).norm() < 1e-5 * b.h[k].norm());
        }
    }

    #[test]
    fn bad_magic() {
        assert!(read_block(&b"NOPE\x01\x00\x00\x00"[..]).is_err());
    }
}
