//! Flat little-endian parameter files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `TDPW`                  |
//! | 4      | 4    | format version (`u32`, = 1)   |
//! | 8      | 8    | parameter count (`u64`)       |
//! | 16     | 8·n  | parameters (`f64`)            |

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const PARAMS_MAGIC: [u8; 4] = *b"TDPW";
const VERSION: u32 = 1;

pub fn write_params_to<W: Write>(mut w: W, params: &[f64]) -> Result<()> {
    w.write_all(&PARAMS_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_params_from<R: Read>(mut r: R) -> Result<Vec<f64>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| Error::Parse {
        offset: 0,
        reason: "truncated header".into(),
    })?;
    if header[..4] != PARAMS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 24));
    let mut buf = [0u8; 8];
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|_| Error::Parse {
            offset: 16 + 8 * i,
            reason: format!("expected {count} parameters, file ends after {i}"),
        })?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

pub fn write_params(path: impl AsRef<Path>, params: &[f64]) -> Result<()> {
    write_params_to(BufWriter::new(File::create(path)?), params)
}

pub fn read_params(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    read_params_from(BufReader::new(File::open(path)?))
}
