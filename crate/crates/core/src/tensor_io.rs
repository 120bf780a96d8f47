//! Binary tensor records shared by datasets and checkpoints.
//!
//! Each record is an 8-byte magic, a 1-byte rank, `rank` little-endian `u32`
//! dimensions, then the elements as little-endian `f32`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::hex_digest;

pub const MAGIC: &[u8; 8] = b"CLTNSR01";

/// A decoded record: dimensions and elements.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims: dims.to_vec(), data }
    }
}

pub fn encoded_len(dims: &[usize]) -> usize {
    MAGIC.len() + 1 + 4 * dims.len() + 4 * dims.iter().product::<usize>()
}

/// Appends one record to `out`.
pub fn encode_record(dims: &[usize], data: &[f32], out: &mut Vec<u8>) -> Result<()> {
    if dims.len() > u8::MAX as usize {
        return Err(Error::Shape(format!("rank {} does not fit in one byte", dims.len())));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!("dims {dims:?} do not match {} elements", data.len())));
    }
    out.reserve(encoded_len(dims));
    out.extend_from_slice(MAGIC);
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Decodes the record starting at `offset`; returns it and the offset just
/// past it.
pub fn decode_record(bytes: &[u8], offset: usize, path: &Path) -> Result<(Record, usize)> {
    let truncated = |what: &str| Error::Corruption { path: path.to_path_buf(), reason: format!("truncated {what} at byte {offset}") };
    let header = bytes.get(offset..offset + MAGIC.len() + 1).ok_or_else(|| truncated("header"))?;
    if &header[..MAGIC.len()] != MAGIC {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("bad tensor magic at byte {offset}") });
    }
    let rank = header[MAGIC.len()] as usize;
    let mut pos = offset + MAGIC.len() + 1;
    let dim_bytes = bytes.get(pos..pos + 4 * rank).ok_or_else(|| truncated("dimensions"))?;
    let dims: Vec<usize> =
        dim_bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize).collect();
    pos += 4 * rank;
    let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| truncated("dimensions"))?;
    let payload = bytes.get(pos..pos + 4 * numel).ok_or_else(|| truncated("payload"))?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((Record { dims, data }, pos + 4 * numel))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn records_round_trip_bitwise(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let mut buf = Vec::new();
            encode_record(&dims, &data, &mut buf).unwrap();
            prop_assert_eq!(buf.len(), encoded_len(&dims));
            let (rec, end) = decode_record(&buf, 0, Path::new("mem")).unwrap();
            prop_assert_eq!(end, buf.len());
            prop_assert_eq!(&rec.dims, &dims);
            prop_assert!(rec.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn layout_is_fixed() {
        let mut buf = Vec::new();
        encode_record(&[2], &[1.0, -2.0], &mut buf).unwrap();
        let mut expected = MAGIC.to_vec();
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn truncation_and_bad_magic() {
        let mut buf = Vec::new();
        encode_record(&[3], &[1.0, 2.0, 3.0], &mut buf).unwrap();
        let cut = &buf[..buf.len() - 2];
        assert!(matches!(decode_record(cut, 0, Path::new("x")), Err(Error::Corruption { .. })));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_record(&bad, 0, Path::new("x")), Err(Error::Format { .. })));
    }
}
