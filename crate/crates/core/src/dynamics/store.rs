//! On-disk trajectory format.
//!
//! Binary file: 8-byte magic `EETRJ001`, two little-endian `u64` dims
//! `(T, d)`, then `T*d` little-endian `f64` values in row-major order.
//! A JSON sidecar (same path, `.json` extension) carries the metadata.

use crate::dynamics::{SystemId, Trajectory, TrajectoryMeta};
use crate::error::{CoreError, Result};
use crate::linalg::RowMatrix;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"EETRJ001";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    system: SystemId,
    params: Vec<f64>,
    dt: f64,
    seed: u64,
    #[serde(rename = "T")]
    t: usize,
    d: usize,
    filtered: bool,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn write_trajectory(path: &Path, z: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJECTORY_MAGIC)?;
    w.write_all(&(z.states.rows() as u64).to_le_bytes())?;
    w.write_all(&(z.states.cols() as u64).to_le_bytes())?;
    for &v in z.states.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;

    let sidecar = Sidecar {
        system: z.meta.system,
        params: z.meta.params.clone(),
        dt: z.dt,
        seed: z.meta.seed,
        t: z.states.rows(),
        d: z.states.cols(),
        filtered: z.meta.filtered,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(CoreError::invalid(format!(
            "bad trajectory magic in {}",
            path.display()
        )));
    }
    let mut dims = [0u8; 16];
    r.read_exact(&mut dims)?;
    let t = u64::from_le_bytes(dims[..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(dims[8..].try_into().unwrap()) as usize;

    let mut buf = vec![0u8; t * d * 8];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.t != t || sidecar.d != d {
        return Err(CoreError::invalid(format!(
            "sidecar dims ({}, {}) disagree with binary dims ({t}, {d})",
            sidecar.t, sidecar.d
        )));
    }

    Ok(Trajectory {
        states: RowMatrix::from_vec(t, d, data),
        dt: sidecar.dt,
        meta: TrajectoryMeta {
            system: sidecar.system,
            params: sidecar.params,
            seed: sidecar.seed,
            filtered: sidecar.filtered,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let z = Trajectory {
            states: RowMatrix::from_vec(3, 2, vec![1.0, -2.5, 3.25, 0.0, 1e-300, f64::MAX]),
            dt: 0.1,
            meta: TrajectoryMeta {
                system: SystemId::L96,
                params: vec![8.0, 1.0, 10.0, 10.0],
                seed: 99,
                filtered: true,
            },
        };
        write_trajectory(&path, &z).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        std::fs::write(&path, b"NOTMAGIC0000000000000000").unwrap();
        assert!(read_trajectory(&path).is_err());
    }
}
