//! Binary tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LUVTCKPT"  u32 version  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u32 dim, f32 data... }
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LUVTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Validation(format!("checkpoint: {}", msg.into()))
}

pub fn write_checkpoint<'a, W: Write>(
    mut out: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> std::io::Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut data = Vec::new();
    input
        .read_to_end(&mut data)
        .map_err(|e| bad(format!("read failed: {e}")))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, values)?));
    }
    if c.pos != data.len() {
        return Err(bad(format!("{} trailing bytes", data.len() - c.pos)));
    }
    Ok(out)
}
