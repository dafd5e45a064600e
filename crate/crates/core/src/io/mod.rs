//! Files: run configuration, model checkpoints, PGM images, dataset
//! manifests and experiment reports. Every file is written atomically by
//! writing a sibling temporary file and renaming it into place.

mod checkpoint;
mod config;
mod images;
mod reports;

pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{RunConfig, CONFIG_FILE};
pub use images::{read_dataset, read_pgm, write_dataset, write_pgm, write_pgm_sheet, MANIFEST_FILE};
pub use reports::{
    write_augmentations, write_crossval, write_loss_curve, write_sweep, write_sweep_plot,
};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders CSV rows (header first) to bytes.
pub(crate) fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format {
        path: "<csv>".into(),
        detail: e.to_string(),
    };
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format {
        path: "<csv>".into(),
        detail: e.to_string(),
    })
}
