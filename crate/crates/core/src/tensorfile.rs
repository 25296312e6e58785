//! Minimal binary tensor container used for every on-disk array.
//!
//! Layout: magic `DPT1`, one byte for the number of dimensions, one little-endian
//! u32 per dimension, then the row-major f32 payload. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DPT1";

#[derive(Error, Debug)]
pub enum TensorFileError {
    #[error("bad magic {0:?}, expected \"DPT1\"")]
    BadMagic([u8; 4]),
    #[error("dimension/payload mismatch: dims {dims:?} require {expected} values, file holds {actual}")]
    PayloadMismatch { dims: Vec<usize>, expected: usize, actual: usize },
    #[error("tensor has no dimensions")]
    NoDims,
    #[error("refusing to write non-finite values")]
    NonFinite,
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TensorFileError {
    TensorFileError::Io { path: path.display().to_string(), source }
}

/// Write a row-major f32 tensor. `dims` product must equal `values.len()`.
pub fn write_tensor(path: &Path, dims: &[usize], values: &[f32]) -> Result<(), TensorFileError> {
    if dims.is_empty() {
        return Err(TensorFileError::NoDims);
    }
    let expected: usize = dims.iter().product();
    if expected != values.len() {
        return Err(TensorFileError::PayloadMismatch {
            dims: dims.to_vec(),
            expected,
            actual: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TensorFileError::NonFinite);
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&[dims.len() as u8])?;
        for &d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    run().map_err(|e| io_err(path, e))
}

/// Read a tensor written by [`write_tensor`]. Returns (dims, values).
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>), TensorFileError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if magic != MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    let mut ndim = [0u8; 1];
    r.read_exact(&mut ndim).map_err(|e| io_err(path, e))?;
    if ndim[0] == 0 {
        return Err(TensorFileError::NoDims);
    }
    let mut dims = Vec::with_capacity(ndim[0] as usize);
    for _ in 0..ndim[0] {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| io_err(path, e))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let expected: usize = dims.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() != expected * 4 {
        return Err(TensorFileError::PayloadMismatch {
            dims,
            expected,
            actual: payload.len() / 4,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, values))
}

/// Write a 2-D f64 array, narrowing to f32.
pub fn write_array2(path: &Path, arr: &ndarray::Array2<f64>) -> Result<(), TensorFileError> {
    let (h, w) = arr.dim();
    let values: Vec<f32> = arr.iter().map(|&v| v as f32).collect();
    write_tensor(path, &[h, w], &values)
}

/// Read a 2-D array written by [`write_array2`], widening to f64.
pub fn read_array2(path: &Path) -> Result<ndarray::Array2<f64>, TensorFileError> {
    let (dims, values) = read_tensor(path)?;
    if dims.len() != 2 {
        return Err(TensorFileError::PayloadMismatch {
            expected: 2,
            actual: dims.len(),
            dims,
        });
    }
    let arr = ndarray::Array2::from_shape_vec(
        (dims[0], dims[1]),
        values.into_iter().map(f64::from).collect(),
    )
    .expect("shape checked above");
    Ok(arr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.dpt");
        write_tensor(&path, &[3, 2], &[0.0; 6]).unwrap();
        let (dims, values) = read_tensor(&path).unwrap();
        assert_eq!(dims, vec![3, 2]);
        assert_eq!(values, vec![0.0; 6]);
    }

    #[test]
    fn accepts_well_formed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.dpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DPT1");
        bytes.push(2);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, bytes).unwrap();
        let (dims, values) = read_tensor(&path).unwrap();
        assert_eq!(dims, vec![2, 2]);
        assert_eq!(values.len(), 4);
    }

    #[test]
    fn truncated_payload_is_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DPT1");
        bytes.push(1);
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]); // 3 floats, dims say 4
        std::fs::write(&path, bytes).unwrap();
        match read_tensor(&path) {
            Err(TensorFileError::PayloadMismatch { expected, actual, .. }) => {
                assert_eq!(expected, 4);
                assert_eq!(actual, 3);
            }
            other => panic!("expected payload mismatch, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dpt");
        std::fs::write(&path, b"NOPE\x01\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&path), Err(TensorFileError::BadMagic(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let p = Path::new("/nonexistent/dir/x.dpt");
        assert!(matches!(read_tensor(p), Err(TensorFileError::Io { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(-1e30f32..1e30, 1..64)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.dpt");
            write_tensor(&path, &[values.len()], &values).unwrap();
            let (dims, back) = read_tensor(&path).unwrap();
            prop_assert_eq!(dims, vec![values.len()]);
            for (a, b) in values.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
