//! Binary checkpoint format.
//!
//! ```text
//! magic  "SKORDCKP"          8 bytes
//! u64    header length (LE)  8 bytes
//! header JSON                {"version", "config", "arrays": [{name, shape, offset}]}
//! data   f32 LE arrays, in manifest order; offsets are bytes from data start
//! ```
//!
//! Parameters are stored at single precision, so saving rounds each value
//! to the nearest `f32`. Loading and re-saving reproduces the file bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::autodiff::Tensor;
use crate::error::Error;
use crate::Result;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SKORDCKP";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: EncoderConfig,
    arrays: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn write_checkpoint(params: &EncoderParams, mut w: impl Write) -> Result<()> {
    let mut offset = 0u64;
    let arrays = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        arrays,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for t in params.tensors() {
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<EncoderParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * count;
        let bytes = data.get(start..end).ok_or_else(|| {
            Error::Format(format!("array `{}` runs past the end of the file", e.name))
        })?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        arrays.push((e.name, Tensor::new(&e.shape, values)?));
    }
    EncoderParams::from_named(header.config, arrays)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(params, &mut f)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn bytes_round_trip() {
        let params = EncoderParams::init(&EncoderConfig::tiny(), &mut SplitMix64::new(9)).unwrap();
        let mut first = Vec::new();
        write_checkpoint(&params, &mut first).unwrap();
        let loaded = read_checkpoint(first.as_slice()).unwrap();
        let mut second = Vec::new();
        write_checkpoint(&loaded, &mut second).unwrap();
        assert_eq!(first, second);
        for (a, b) in params.tensors().iter().zip(loaded.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        // Loaded values are exactly representable, so a second trip is lossless.
        assert_eq!(read_checkpoint(second.as_slice()).unwrap(), loaded);
    }

    #[test]
    fn rejects_corruption() {
        let params = EncoderParams::init(&EncoderConfig::tiny(), &mut SplitMix64::new(9)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&params, &mut bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 4]),
            Err(Error::Format(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            read_checkpoint(bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
