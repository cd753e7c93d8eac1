//! On-disk formats: NIfTI-1 volumes, JSON stack bundles, the checkpoint
//! container and run configuration.

mod bundle;
mod checkpoint;
mod config;
mod nifti;

pub use bundle::{
    read_stack_bundle, read_transforms, write_stack_bundle, write_transforms, StackMeta, TransformSet, BUNDLE_FILE,
    TRUTH_FILE,
};
pub use checkpoint::{
    load_checkpoint, load_store, save_checkpoint, save_store, CheckpointHeader, GroupMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{parse_config, parse_config_str, NoiseConfig, RunConfig};
pub use nifti::{read_volume, write_volume, HEADER_SIZE, VOX_OFFSET};

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary sibling, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParam(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}
