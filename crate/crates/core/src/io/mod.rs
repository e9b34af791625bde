//! On-disk formats: scenes, weak labels, manifests, checkpoints, run
//! configs, PLY exports and CSV reports.

mod checkpoint;
mod config;
mod manifest;
mod ply;
mod report;
mod scene;
mod weak;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{
    read_checkpoint, read_sections, write_checkpoint, write_sections, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{RunConfig, CONFIG_KEYS};
pub use manifest::{Manifest, ManifestEntry, MANIFEST_FILE};
pub use ply::{magnitude_color, region_color, write_ply};
pub use report::{write_lap_diagnostics, write_metrics, write_train_log, write_validations};
pub use scene::{read_scene, write_scene};
pub use weak::{read_weak, write_weak};

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes through a buffered file, flushing before returning.
pub fn save<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let file =
        File::create(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<crate::scene::LabeledScene> {
    read_scene(open(path)?)
}

pub fn load_weak(path: &Path) -> Result<crate::annotation::WeakLabels> {
    read_weak(open(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<crate::backbone::ModelParams> {
    read_checkpoint(&mut open(path)?)
}
