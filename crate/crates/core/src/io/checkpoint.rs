//! Binary checkpoint format.
//!
//! Layout (all integers little-endian): the magic `NCDL`, a `u32` version,
//! a `u32` matrix count, then per matrix a `u16` name length, the UTF-8 name,
//! `u64` rows, `u64` cols and `rows × cols` `f64` values in row-major order.

use std::fs;
use std::path::Path;

use crate::linalg::DenseMatrix;
use crate::model::{NetworkState, ProblemSpec};

use super::IoError;

pub const MAGIC: &[u8; 4] = b"NCDL";
pub const VERSION: u32 = 1;

pub fn encode(matrices: &[(String, DenseMatrix)]) -> Result<Vec<u8>, IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(matrices.len())
        .map_err(|_| IoError::Checkpoint("too many matrices".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, m) in matrices {
        let len = u16::try_from(name.len())
            .map_err(|_| IoError::Checkpoint(format!("matrix name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| IoError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, DenseMatrix)>, IoError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(IoError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(IoError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| IoError::Checkpoint("matrix name is not UTF-8".into()))?
            .to_string();
        let rows = usize::try_from(r.u64()?)
            .map_err(|_| IoError::Checkpoint("row count overflows".into()))?;
        let cols = usize::try_from(r.u64()?)
            .map_err(|_| IoError::Checkpoint("column count overflows".into()))?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| IoError::Checkpoint(format!("{name}: size overflows")))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = DenseMatrix::new(rows, cols, data)
            .map_err(|e| IoError::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, m));
    }
    if r.pos != bytes.len() {
        return Err(IoError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Names `W1..WM`, `H1` and, when present, `b` (as a `K × 1` matrix).
pub fn state_to_named(state: &NetworkState) -> Vec<(String, DenseMatrix)> {
    let mut out: Vec<(String, DenseMatrix)> = state
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| (format!("W{}", i + 1), w.clone()))
        .collect();
    out.push(("H1".into(), state.features.clone()));
    if let Some(b) = &state.bias {
        out.push(("b".into(), DenseMatrix::column_vector(b)));
    }
    out
}

pub fn named_to_state(
    named: Vec<(String, DenseMatrix)>,
    spec: &ProblemSpec,
) -> Result<NetworkState, IoError> {
    let mut lookup: std::collections::HashMap<String, DenseMatrix> = named.into_iter().collect();
    let mut take = |name: &str| {
        lookup
            .remove(name)
            .ok_or_else(|| IoError::MissingMatrix(name.to_string()))
    };
    let weights = (1..=spec.depth())
        .map(|i| take(&format!("W{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let features = take("H1")?;
    let bias = if spec.bias_mode().has_bias() {
        let b = take("b")?;
        if b.cols() != 1 {
            return Err(IoError::Checkpoint(format!(
                "bias must be a column vector, got {:?}",
                b.shape()
            )));
        }
        Some(b.into_data())
    } else {
        None
    };
    let state = NetworkState {
        weights,
        features,
        bias,
    };
    state
        .validate(spec)
        .map_err(|e| IoError::Checkpoint(e.to_string()))?;
    Ok(state)
}

pub fn write_checkpoint(path: &Path, state: &NetworkState) -> Result<(), IoError> {
    fs::write(path, encode(&state_to_named(state))?).map_err(|e| IoError::file(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, DenseMatrix)>, IoError> {
    decode(&fs::read(path).map_err(|e| IoError::file(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_little_endian() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0]]);
        let bytes = encode(&[("W1".into(), m)]).unwrap();
        assert_eq!(&bytes[..4], b"NCDL");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..14], &[2, 0]);
        assert_eq!(&bytes[14..16], b"W1");
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &2u64.to_le_bytes());
        assert_eq!(&bytes[32..40], &1f64.to_le_bytes());
        assert_eq!(bytes.len(), 48);
    }

    #[test]
    fn rejects_bad_input() {
        let m = DenseMatrix::from_rows(&[vec![1.0]]);
        let mut bytes = encode(&[("H1".into(), m)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(IoError::Checkpoint(msg)) if msg.contains("version")));
        assert!(decode(b"XXXX").is_err());
    }
}
