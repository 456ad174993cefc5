//! Binary checkpoint: `XMCL`, version byte, u32-LE manifest length, JSON
//! manifest `[{path, shape}]`, then every value as little-endian f64 in
//! manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numel, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XMCL";
const VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    path: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint(params: &ParamStore, mut w: impl Write) -> std::io::Result<()> {
    let manifest: Vec<Entry> = params
        .iter()
        .map(|(p, t)| Entry { path: p.clone(), shape: t.shape().to_vec() })
        .collect();
    let json = serde_json::to_vec(&manifest).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.num_values() * 8);
    for (_, t) in params.iter() {
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn read_checkpoint(bytes: &[u8], origin: &Path) -> Result<ParamStore> {
    let bad = |msg: String| Error::parse(origin, msg);
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(bad("missing XMCL magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let json = bytes
        .get(9..9 + len)
        .ok_or_else(|| bad(format!("manifest truncated at offset 9 (needs {len} bytes)")))?;
    let manifest: Vec<Entry> =
        serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    let mut off = 9 + len;
    let mut store = ParamStore::new();
    for e in manifest {
        let n = numel(&e.shape);
        let raw = bytes
            .get(off..off + 8 * n)
            .ok_or_else(|| bad(format!("values for `{}` truncated at offset {off}", e.path)))?;
        let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(e.path, vals, &e.shape)?;
        off += 8 * n;
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes at offset {off}", bytes.len() - off)));
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
