//! Binary cloud snapshots and CSV trajectory export.
//!
//! Snapshot layout, all little-endian:
//!
//! ```text
//! "ZMFC"  version:u32
//! M:u64  N:u64  d:u64  D:u64  step:u64
//! t:f64  x:[f64; M*N]  y:[f64; M*d]  a:[f64; M*D]
//! ```

use std::io::{self, Read, Write};

use super::{SimError, Trajectory};
use crate::measures::ParticleCloud;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"ZMFC";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(cloud: &ParticleCloud, out: &mut W) -> io::Result<()> {
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    for v in [cloud.len(), cloud.n_states, cloud.dim_y, cloud.dim_a] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&cloud.step.to_le_bytes())?;
    out.write_all(&cloud.t.to_le_bytes())?;
    for v in cloud.x.iter().chain(&cloud.y).chain(&cloud.a) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, SimError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| SimError::Snapshot(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>, SimError> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|e| SimError::Snapshot(e.to_string()))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_snapshot<R: Read>(input: &mut R) -> Result<ParticleCloud, SimError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| SimError::Snapshot(e.to_string()))?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(SimError::Snapshot("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    input.read_exact(&mut ver).map_err(|e| SimError::Snapshot(e.to_string()))?;
    let version = u32::from_le_bytes(ver);
    if version != SNAPSHOT_VERSION {
        return Err(SimError::Snapshot(format!("unsupported version {version}")));
    }
    let m = read_u64(input)? as usize;
    let n = read_u64(input)? as usize;
    let d = read_u64(input)? as usize;
    let big_d = read_u64(input)? as usize;
    if m == 0 || n == 0 || m.checked_mul(n + d + big_d).is_none_or(|c| c > 1 << 32) {
        return Err(SimError::Snapshot("implausible dimensions".into()));
    }
    let step = read_u64(input)?;
    let t = read_f64s(input, 1)?[0];
    let x = read_f64s(input, m * n)?;
    let y = read_f64s(input, m * d)?;
    let a = read_f64s(input, m * big_d)?;
    Ok(ParticleCloud { n_states: n, dim_y: d, dim_a: big_d, t, step, x, y, a })
}

/// All recorded snapshots as CSV with header `t,particle_id,x_1..,y_1..,a_1..`.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: &mut W) -> io::Result<()> {
    if let Some(first) = traj.clouds.first() {
        writeln!(out, "{}", first.csv_header())?;
    }
    for cloud in &traj.clouds {
        cloud.write_csv_rows(out)?;
    }
    Ok(())
}
