//! Exact optimizer snapshots for resuming.
//!
//! Checkpoints hold single-precision weights; the snapshot keeps the
//! double-precision weights and both moment buffers so a resumed run
//! continues exactly where it stopped.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::AdamState;
use crate::autodiff::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SKORDOPT";

fn put_u64(w: &mut impl Write, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * xs.len());
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_snapshot(path: &Path, params: &[Tensor], state: &AdamState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        put_u64(&mut w, state.step)?;
        put_u64(&mut w, params.len() as u64)?;
        for ((p, m), v) in params.iter().zip(&state.m).zip(&state.v) {
            put_u64(&mut w, p.len() as u64)?;
            put_f64s(&mut w, p.data())?;
            put_f64s(&mut w, m)?;
            put_f64s(&mut w, v)?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Restores weights into `params` (shapes must already match) and
/// returns the optimizer state.
pub fn load_snapshot(path: &Path, params: &mut [Tensor]) -> Result<AdamState> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not an optimizer snapshot",
            path.display()
        )));
    }
    let step = get_u64(&mut r)?;
    let count = get_u64(&mut r)? as usize;
    if count != params.len() {
        return Err(Error::Format(format!(
            "snapshot holds {count} arrays, model has {}",
            params.len()
        )));
    }
    let mut state = AdamState {
        step,
        m: Vec::with_capacity(count),
        v: Vec::with_capacity(count),
    };
    for p in params.iter_mut() {
        let len = get_u64(&mut r)? as usize;
        if len != p.len() {
            return Err(Error::Format(format!(
                "snapshot array of {len} values, expected {}",
                p.len()
            )));
        }
        p.data_mut().copy_from_slice(&get_f64s(&mut r, len)?);
        state.m.push(get_f64s(&mut r, len)?);
        state.v.push(get_f64s(&mut r, len)?);
    }
    Ok(state)
}
