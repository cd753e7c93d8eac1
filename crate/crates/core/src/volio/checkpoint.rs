//! Versioned checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "SVRCKPT\0"
//! version   u32
//! hdr_len   u64
//! header    hdr_len bytes of JSON (CheckpointHeader)
//! payload   per group in header order: data, m, v as f32 (rows*cols each)
//! ```

use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::cinr::{CinrConfig, CinrModel};
use crate::encoding::DomainMap;
use crate::error::{Error, Result};
use crate::numgrad::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SVRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: u64,
    pub groups: Vec<GroupMeta>,
    /// Caller-defined metadata (model config, domain, ...).
    pub meta: serde_json::Value,
}

/// Serializes a parameter store with its optimizer state.
pub fn save_store(store: &ParamStore<f32>, meta: serde_json::Value, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        step: store.step(),
        groups: store
            .groups()
            .iter()
            .map(|g| GroupMeta {
                name: g.name.clone(),
                rows: g.rows,
                cols: g.cols,
                frozen: g.frozen,
            })
            .collect(),
        meta,
    };
    let hdr = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + hdr.len() + store.num_params() * 12);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
    buf.write_u64::<LE>(hdr.len() as u64).unwrap();
    buf.extend_from_slice(&hdr);
    for g in store.groups() {
        for arr in [&g.data, &g.m, &g.v] {
            for &x in arr.iter() {
                buf.write_f32::<LE>(x).unwrap();
            }
        }
    }
    super::write_atomic(path, &buf)
}

/// Reads a store written by [`save_store`]; nothing is returned unless the
/// whole file validates.
pub fn load_store(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let bytes = super::read_file(path)?;
    let corrupt = |m: String| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing checkpoint magic".into()));
    }
    let mut c = Cursor::new(&bytes[8..20]);
    let version = c.read_u32::<LE>().unwrap();
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hdr_len = c.read_u64::<LE>().unwrap();
    let rest = (bytes.len() - 20) as u64;
    if hdr_len > rest {
        return Err(corrupt(format!("header length {hdr_len} exceeds file size")));
    }
    let hdr_end = 20 + hdr_len as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..hdr_end]).map_err(|e| corrupt(format!("header: {e}")))?;
    let total: u64 = header.groups.iter().map(|g| (g.rows * g.cols) as u64 * 12).sum();
    if (bytes.len() - hdr_end) as u64 != total {
        return Err(corrupt(format!(
            "payload is {} bytes, header describes {total}",
            bytes.len() - hdr_end
        )));
    }
    let mut store = ParamStore::new();
    let mut cur = Cursor::new(&bytes[hdr_end..]);
    for g in &header.groups {
        let n = g.rows * g.cols;
        let mut read = || -> Result<Vec<f32>> {
            let mut v = vec![0f32; n];
            cur.read_f32_into::<LE>(&mut v).map_err(|e| corrupt(e.to_string()))?;
            Ok(v)
        };
        let (data, m, v) = (read()?, read()?, read()?);
        let id = store.add(&g.name, g.rows, g.cols, data)?;
        let grp = store.group_mut(id);
        grp.m = m;
        grp.v = v;
        grp.frozen = g.frozen;
    }
    store.set_step(header.step);
    Ok((store, header.meta))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    kind: String,
    config: CinrConfig,
    domain: DomainMap,
    n_slices: usize,
}

pub fn save_checkpoint(model: &CinrModel, path: &Path) -> Result<()> {
    let meta = ModelMeta {
        kind: "cinr".into(),
        config: model.config.clone(),
        domain: model.domain,
        n_slices: model.n_slices,
    };
    save_store(&model.store, serde_json::to_value(meta)?, path)
}

pub fn load_checkpoint(path: &Path) -> Result<CinrModel> {
    let (store, meta) = load_store(path)?;
    let meta: ModelMeta = serde_json::from_value(meta)
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: model metadata: {e}", path.display())))?;
    if meta.kind != "cinr" {
        return Err(Error::CorruptCheckpoint(format!("{}: not a model checkpoint", path.display())));
    }
    CinrModel::from_store(meta.config, meta.domain, meta.n_slices, store)
}
