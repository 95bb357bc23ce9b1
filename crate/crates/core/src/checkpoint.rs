//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field            | type                  |
//! |------------------|-----------------------|
//! | magic            | `b"SPFMCKPT"`         |
//! | version          | `u8` (currently 1)    |
//! | layer count + 1  | `u32`                 |
//! | widths           | `u32` each            |
//! | parameter count  | `u64`                 |
//! | parameters       | `f64` each            |
//! | Adam first moment| `f64` each            |
//! | Adam second moment| `f64` each           |
//! | optimizer step   | `u64`                 |
//! | config hash      | 32 bytes (SHA-256)    |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SpfmError};
use crate::net::{ModelParameters, OptimizerState};

pub const MAGIC: &[u8; 8] = b"SPFMCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub opt_state: OptimizerState,
    pub config_hash: [u8; 32],
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        let widths = self.params.widths();
        w.write_all(&(widths.len() as u32).to_le_bytes())?;
        for &width in widths {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for buf in [&self.params, &self.opt_state.m, &self.opt_state.v] {
            for v in buf.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&self.opt_state.step.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(SpfmError::Input("not a checkpoint file (bad magic)".into()));
        }
        let mut version = [0u8; 1];
        read_exact(&mut r, &mut version)?;
        if version[0] != VERSION {
            return Err(SpfmError::Input(format!(
                "checkpoint format version {} is not supported (expected {VERSION})",
                version[0]
            )));
        }
        let count = read_u32(&mut r)? as usize;
        if count > 64 {
            return Err(SpfmError::Input(format!("implausible layer count {count}")));
        }
        let widths = (0..count)
            .map(|_| read_u32(&mut r).map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = read_u64(&mut r)? as usize;
        let read_buf = |r: &mut R| -> Result<ModelParameters> {
            let mut data = Vec::with_capacity(len.min(1 << 24));
            for _ in 0..len {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            ModelParameters::from_flat(&widths, data)
        };
        let params = read_buf(&mut r)?;
        let m = read_buf(&mut r)?;
        let v = read_buf(&mut r)?;
        let step = read_u64(&mut r)?;
        let mut config_hash = [0u8; 32];
        read_exact(&mut r, &mut config_hash)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)
            .map_err(|e| SpfmError::Input(format!("reading checkpoint: {e}")))?;
        if !rest.is_empty() {
            return Err(SpfmError::Input(format!(
                "checkpoint has {} trailing bytes",
                rest.len()
            )));
        }
        Ok(Checkpoint {
            params,
            opt_state: OptimizerState { m, v, step },
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| SpfmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SpfmError::io(path, e))?;
        Self::read(bytes.as_slice())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| SpfmError::Input(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
