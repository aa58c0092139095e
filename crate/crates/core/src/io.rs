// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats shared by every stage.
//!
//! FSTN tensor layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "FSTN"
//! 4..8    u32 version (1)
//! 8       u8  dtype (0 = f32)
//! 9..13   u32 ndim
//! 13..    ndim x u64 dims
//! ...     row-major f32 payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FSTN_MAGIC: &[u8; 4] = b"FSTN";
pub const FSTN_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode_fstn(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * t.ndim() + 4 * t.len());
    out.extend_from_slice(FSTN_MAGIC);
    out.extend_from_slice(&FSTN_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("FSTN truncated at byte {at}")))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn decode_fstn(bytes: &[u8]) -> Result<Tensor> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != FSTN_MAGIC {
        return Err(Error::Format("bad FSTN magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap());
    if version != FSTN_VERSION {
        return Err(Error::Format(format!("unsupported FSTN version {version}")));
    }
    let dtype = take(bytes, &mut at, 1)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported FSTN dtype {dtype}")));
    }
    let ndim = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let payload = take(bytes, &mut at, n * 4)?;
    if at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after FSTN payload",
            bytes.len() - at
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_fstn(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_fstn(t))
}

pub fn read_fstn(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| missing_or_io(path, e))?;
    decode_fstn(&bytes)
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::Dependency(path.display().to_string())
    } else {
        Error::Io(e)
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Write one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let s = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| missing_or_io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode_fstn(&t);
        assert_eq!(&b[0..4], b"FSTN");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 0);
        assert_eq!(&b[9..13], &[2, 0, 0, 0]);
        assert_eq!(&b[13..21], &2u64.to_le_bytes());
        assert_eq!(&b[21..29], &1u64.to_le_bytes());
        assert_eq!(&b[29..33], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 37);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let mut b = encode_fstn(&t);
        assert!(decode_fstn(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode_fstn(&b).is_err());
        let mut b = encode_fstn(&t);
        b.push(0);
        assert!(decode_fstn(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut rng = crate::rng::RngStream::new(seed);
            let t = Tensor::new(dims.clone(), rng.uniform(&[n], -1e6, 1e6).into_data()).unwrap();
            let bytes = encode_fstn(&t);
            let back = decode_fstn(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(
                back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(encode_fstn(&back), bytes);
        }
    }
}
