//! The ATRJ v1 trajectory interchange format.
//!
//! Layout, all multi-byte values little-endian:
//!
//! ```text
//! magic    4 bytes  "ATRJ"
//! version  u32      1
//! n_samples u32
//! n_layers  u32
//! n_tokens  u32
//! dim       u32
//! dtype     u8      0 = f32, 1 = f64
//! roles     n_tokens bytes  0 = cls, 1 = register, 2 = patch
//! payload   n_samples*n_layers*n_tokens*dim scalars,
//!           index order sample-major, then layer, token, dim
//! ```
//!
//! Data is always `f64` in memory; an f32 payload is promoted on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{TokenRole, TrajectoryTensor};

const MAGIC: &[u8; 4] = b"ATRJ";
const VERSION: u32 = 1;

/// On-disk scalar width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn to_byte(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

/// Writes a trajectory as ATRJ v1 with full f64 payload.
///
/// Round-trips bit-exactly through [`read_trajectory`].
pub fn write_trajectory(t: &TrajectoryTensor, path: impl AsRef<Path>) -> Result<()> {
    write_trajectory_with_dtype(t, path, Dtype::F64)
}

/// Writes a trajectory with an explicit payload dtype. An `F32` payload
/// loses precision unless every value is exactly representable in f32.
pub fn write_trajectory_with_dtype(
    t: &TrajectoryTensor,
    path: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<()> {
    let path = path.as_ref();
    let as_str = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&as_str, e))?;
    let mut w = BufWriter::new(file);

    let mut emit = |bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(&as_str, e))
    };
    let header_fields = [
        t.n_samples() as u32,
        t.n_layers() as u32,
        t.n_tokens() as u32,
        t.dim() as u32,
    ];
    emit(MAGIC)?;
    emit(&VERSION.to_le_bytes())?;
    for f in header_fields {
        emit(&f.to_le_bytes())?;
    }
    emit(&[dtype.to_byte()])?;
    let role_bytes: Vec<u8> = t.roles().iter().map(|r| r.to_byte()).collect();
    emit(&role_bytes)?;
    match dtype {
        Dtype::F64 => {
            for v in t.data() {
                emit(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for v in t.data() {
                emit(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&as_str, e))
}

/// Reads an ATRJ v1 file, promoting f32 payloads to f64 and validating all
/// tensor invariants.
pub fn read_trajectory(path: impl AsRef<Path>) -> Result<TrajectoryTensor> {
    let path = path.as_ref();
    let as_str = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&as_str, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &as_str, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { path: as_str });
    }
    let version = read_u32(&mut r, &as_str, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            version,
            path: as_str,
        });
    }
    let n_samples = read_u32(&mut r, &as_str, "n_samples")? as usize;
    let n_layers = read_u32(&mut r, &as_str, "n_layers")? as usize;
    let n_tokens = read_u32(&mut r, &as_str, "n_tokens")? as usize;
    let dim = read_u32(&mut r, &as_str, "dim")? as usize;

    let mut dtype_byte = [0u8; 1];
    read_exact(&mut r, &mut dtype_byte, &as_str, "dtype")?;
    let dtype = match dtype_byte[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => {
            return Err(Error::InvalidData(format!(
                "unknown dtype byte {other} in {as_str}"
            )))
        }
    };

    let mut role_bytes = vec![0u8; n_tokens];
    read_exact(&mut r, &mut role_bytes, &as_str, "role table")?;
    let mut roles = Vec::with_capacity(n_tokens);
    for (i, b) in role_bytes.iter().enumerate() {
        match TokenRole::from_byte(*b) {
            Some(role) => roles.push(role),
            None => {
                return Err(Error::RoleViolation {
                    path: as_str,
                    detail: format!("invalid role byte {b} for token {i}"),
                })
            }
        }
    }
    let cls_count = roles.iter().filter(|r| **r == TokenRole::Cls).count();
    if cls_count != 1 {
        return Err(Error::RoleViolation {
            path: as_str,
            detail: format!("expected exactly one cls token, found {cls_count}"),
        });
    }

    let count = n_samples
        .checked_mul(n_layers)
        .and_then(|v| v.checked_mul(n_tokens))
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| Error::InvalidData(format!("payload size overflow in {as_str}")))?;

    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut payload = vec![0u8; count * width];
    if let Err(e) = r.read_exact(&mut payload) {
        return Err(Error::Truncated {
            path: as_str,
            detail: format!("payload of {count} values: {e}"),
        });
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::InvalidData(format!(
                "trailing bytes after payload in {as_str}"
            )))
        }
        Err(e) => return Err(Error::io(&as_str, e)),
    }

    let mut data = Vec::with_capacity(count);
    match dtype {
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinitePayload {
            path: as_str,
            index,
        });
    }

    TrajectoryTensor::new(n_samples, n_layers, n_tokens, dim, roles, data)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated {
        path: path.to_string(),
        detail: format!("while reading {what}"),
    })
}

fn read_u32(r: &mut impl Read, path: &str, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use tempfile::tempdir;

    fn small_tensor() -> TrajectoryTensor {
        TrajectoryTensor::new(
            1,
            2,
            1,
            2,
            vec![TokenRole::Cls],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap()
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.atrj");
        let t = small_tensor();
        write_trajectory(&t, &path).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(t, back);
        // Header: magic 4 + version 4 + four u32 16 + dtype 1 + roles 1 = 26,
        // payload 4 f64 = 32.
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 26 + 32);
    }

    #[test]
    fn f32_payload_is_sixteen_bytes_and_reads_back_equal() {
        // Values exactly representable in f32, so the narrow payload is
        // lossless here.
        let dir = tempdir().unwrap();
        let path = dir.path().join("t32.atrj");
        let t = small_tensor();
        write_trajectory_with_dtype(&t, &path, Dtype::F32).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 26 + 16);
        let back = read_trajectory(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn random_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.atrj");
        let mut rng = CounterRng::new(12);
        let t = TrajectoryTensor::from_states(
            3,
            4,
            vec![TokenRole::Cls, TokenRole::Register, TokenRole::Patch],
            5,
            |_, _| (0..15).map(|_| rng.next_normal()).collect(),
        )
        .unwrap();
        write_trajectory(&t, &path).unwrap();
        assert_eq!(read_trajectory(&path).unwrap(), t);
    }

    #[test]
    fn bad_magic_is_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.atrj");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        assert!(matches!(
            read_trajectory(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.atrj");
        write_trajectory(&small_tensor(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_trajectory(&path),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn non_finite_payload_is_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.atrj");
        write_trajectory(&small_tensor(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let nan = f64::NAN.to_le_bytes();
        let start = bytes.len() - 8;
        bytes[start..].copy_from_slice(&nan);
        std::fs::write(&path, &bytes).unwrap();
        match read_trajectory(&path) {
            Err(Error::NonFinitePayload { index, .. }) => assert_eq!(index, 3),
            other => panic!("expected NonFinitePayload, got {other:?}"),
        }
    }

    #[test]
    fn bad_role_byte_is_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("role.atrj");
        write_trajectory(&small_tensor(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[25] = 9; // role table starts after the 25-byte fixed header
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_trajectory(&path),
            Err(Error::RoleViolation { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v2.atrj");
        write_trajectory(&small_tensor(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_trajectory(&path),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));
    }
}
