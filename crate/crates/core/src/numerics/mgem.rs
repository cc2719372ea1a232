//! "MGEM" binary matrix files.
//!
//! Layout: magic `MGEM`, one version byte (1), `u32` rows and `u32` cols in
//! little endian, then `rows * cols` little-endian `f32` values in row-major
//! order. Values are widened to `f64` on load and narrowed on save.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Matrix, NumericsError};

pub const MAGIC: [u8; 4] = *b"MGEM";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

#[derive(Debug, Error)]
pub enum MgemError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("matrix too large for the format: {rows}x{cols}")]
    TooLarge { rows: usize, cols: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub fn encode(m: &Matrix) -> Result<Vec<u8>, MgemError> {
    let (rows, cols) = (m.rows(), m.cols());
    let (r, c) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(r), Ok(c)) => (r, c),
        _ => return Err(MgemError::TooLarge { rows, cols }),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&r.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Matrix, MgemError> {
    if bytes.len() < HEADER_LEN {
        return Err(MgemError::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
    if magic != MAGIC {
        return Err(MgemError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(MgemError::UnsupportedVersion(bytes[4]));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().expect("4-byte slice")) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().expect("4-byte slice")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(MgemError::TooLarge { rows, cols })?;
    if bytes.len() != expected {
        return Err(MgemError::Length {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Ok(Matrix::new(rows, cols, data)?)
}

pub fn read(path: impl AsRef<Path>) -> Result<Matrix, MgemError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| MgemError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

pub fn write(path: impl AsRef<Path>, m: &Matrix) -> Result<(), MgemError> {
    let path = path.as_ref();
    fs::write(path, encode(m)?).map_err(|source| MgemError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Rounds every entry to the nearest `f32`, i.e. what a save/load cycle yields.
pub fn quantize(m: &mut Matrix) {
    m.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let m = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[0..5], &[0x4D, 0x47, 0x45, 0x4D, 1]);
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &3u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[17..21], &(-2.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 13 + 12);
    }

    #[test]
    fn rejects_corrupt_input() {
        let m = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let mut bytes = encode(&m).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(MgemError::Length { .. })
        ));
        bytes[4] = 2;
        assert!(matches!(
            decode(&bytes),
            Err(MgemError::UnsupportedVersion(2))
        ));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(MgemError::BadMagic(_))));
        assert!(matches!(decode(b"MG"), Err(MgemError::Length { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mgem");
        let m = Matrix::from_rows(&[[0.25, 0.5], [-1.0, 8.0]]).unwrap();
        write(&path, &m).unwrap();
        assert_eq!(read(&path).unwrap(), m);
        assert!(matches!(
            read(dir.path().join("absent.mgem")),
            Err(MgemError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_on_f32_values(
            rows in 0usize..5,
            cols in 0usize..5,
            seed in prop::collection::vec(-1e6f32..1e6f32, 25),
        ) {
            let data: Vec<f64> = seed.iter().take(rows * cols).map(|v| *v as f64).collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            prop_assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
        }
    }
}
