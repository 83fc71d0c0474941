//! Checkpoint file format for factorized models and adapters.
//!
//! One file holds a manifest followed by raw payloads:
//!
//! ```text
//! magic   8 bytes  b"WEFTCKP1"
//! count   u32 LE   number of entries
//! entry   repeated count times:
//!   name_len u32 LE, name bytes (UTF-8 slot id)
//!   rows     u32 LE
//!   cols     u32 LE
//!   rank     u32 LE   0 marks a dense entry
//! payloads in manifest order, little-endian f64:
//!   rank == 0 → rows·cols values (the dense tensor)
//!   rank == r → rows·r values (factor b), then r·cols values (factor a)
//! ```
//!
//! Values are stored as 64-bit floats regardless of the build's element
//! type. Writes go through a temp file and rename, so a checkpoint on disk
//! is never half-written.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lowrank::LowRankParam;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"WEFTCKP1";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Tensor),
    Factored { b: Tensor, a: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub slot_id: String,
    pub rows: usize,
    pub cols: usize,
    /// 0 for dense entries.
    pub rank: usize,
    pub payload: Payload,
}

impl CheckpointEntry {
    pub fn dense(slot_id: impl Into<String>, t: &Tensor) -> Self {
        // Non-2-D tensors (biases, conv kernels) are stored through their
        // row-major 2-D view: 1×len for vectors, out×rest for kernels.
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            [o, rest @ ..] => (*o, rest.iter().product()),
            [] => (1, 1),
        };
        CheckpointEntry {
            slot_id: slot_id.into(),
            rows,
            cols,
            rank: 0,
            payload: Payload::Dense(t.clone()),
        }
    }

    pub fn factored(p: &LowRankParam) -> Self {
        CheckpointEntry {
            slot_id: p.slot_id.clone(),
            rows: p.rows(),
            cols: p.cols(),
            rank: p.rank,
            payload: Payload::Factored {
                b: p.b.clone(),
                a: p.a.clone(),
            },
        }
    }

    pub fn scalar_count(&self) -> usize {
        match self.rank {
            0 => self.rows * self.cols,
            r => self.rows * r + r * self.cols,
        }
    }
}

fn push_f64s(buf: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        buf.extend_from_slice(&(v as f64).to_le_bytes());
    }
}

pub fn encode(entries: &[CheckpointEntry]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.slot_id.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(e.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(e.cols as u32).to_le_bytes());
        buf.extend_from_slice(&(e.rank as u32).to_le_bytes());
    }
    for e in entries {
        match (&e.payload, e.rank) {
            (Payload::Dense(t), 0) => {
                if t.len() != e.rows * e.cols {
                    return Err(Error::format(format!(
                        "entry {}: dense payload length {} != {}×{}",
                        e.slot_id,
                        t.len(),
                        e.rows,
                        e.cols
                    )));
                }
                push_f64s(&mut buf, t);
            }
            (Payload::Factored { b, a }, r) if r > 0 => {
                if b.len() != e.rows * r || a.len() != r * e.cols {
                    return Err(Error::format(format!(
                        "entry {}: factor shapes do not match manifest",
                        e.slot_id
                    )));
                }
                push_f64s(&mut buf, b);
                push_f64s(&mut buf, a);
            }
            _ => {
                return Err(Error::format(format!(
                    "entry {}: payload kind does not match rank {}",
                    e.slot_id, e.rank
                )))
            }
        }
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let count = take_u32(&mut pos)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::format("slot id is not UTF-8"))?
            .to_string();
        let rows = take_u32(&mut pos)? as usize;
        let cols = take_u32(&mut pos)? as usize;
        let rank = take_u32(&mut pos)? as usize;
        manifest.push((name, rows, cols, rank));
    }
    let take_tensor = |pos: &mut usize, shape: Vec<usize>| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = take(pos, n * 8)?;
        let data: Vec<Real> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        Tensor::new(shape, data)
    };

    let mut out = Vec::with_capacity(count);
    for (name, rows, cols, rank) in manifest {
        let payload = if rank == 0 {
            Payload::Dense(take_tensor(&mut pos, vec![rows, cols])?)
        } else {
            let b = take_tensor(&mut pos, vec![rows, rank])?;
            let a = take_tensor(&mut pos, vec![rank, cols])?;
            Payload::Factored { b, a }
        };
        out.push(CheckpointEntry {
            slot_id: name,
            rows,
            cols,
            rank,
            payload,
        });
    }
    if pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after checkpoint payloads",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

/// Write atomically: temp file in the same directory, then rename.
pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let bytes = encode(entries)?;
    write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    decode(&fs::read(path)?)
}

/// Shared atomic write for all harness outputs.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
