//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PKAN" | version: u32 | config length: u32 | config text (UTF-8)
//! block count: u32
//! per block: name length: u32 | name | element count: u64 | f64 values
//! ```
//!
//! Blocks are the trainable parameters in visiting order followed by the
//! batch-norm running statistics. The config text is the output of
//! [`format_config`], so a checkpoint fully determines its model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config_file::{format_config, parse_config};
use super::points::write_atomic;
use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::params::Params;

pub const MAGIC: &[u8; 4] = b"PKAN";
pub const VERSION: u32 = 1;

fn blocks(model: &Model) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit("", &mut |name, s| out.push((name.to_string(), s.to_vec())));
    model.visit_buffers(&mut |name, s| out.push((name.to_string(), s.to_vec())));
    out
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let config = format_config(&model.config);
    let blocks = blocks(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, values) in &blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8 text".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    let config = parse_config(r.string(len)?).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, usize)> = blocks(&model).into_iter().map(|(n, v)| (n, v.len())).collect();

    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} blocks, model has {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (want_name, want_len) in &expected {
        let n = r.u32()? as usize;
        let name = r.string(n)?;
        let len = r.u64()?;
        if name != want_name || len != *want_len as u64 {
            return Err(Error::Checkpoint(format!(
                "block '{name}' of {len} values, expected '{want_name}' of {want_len}"
            )));
        }
        let raw = r.take(want_len * 8)?;
        values.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<_>>(),
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut it = values.into_iter();
    model.visit_mut("", &mut |_, s| s.copy_from_slice(&it.next().expect("counted")));
    model.visit_buffers_mut(&mut |_, s| s.copy_from_slice(&it.next().expect("counted")));
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &to_bytes(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
