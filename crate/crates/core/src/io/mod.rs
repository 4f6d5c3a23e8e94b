//! On-disk formats: PPM/PGM rasters, FCTL checkpoints and `key=value` run configs.

mod checkpoint;
mod config;
mod dataset;
mod raster;

use std::path::Path;

use crate::error::Result;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::RunConfig;
pub use dataset::{dataset_names, image_name, read_dataset, write_dataset};
pub use raster::{read_pgm, read_ppm, write_pgm, write_ppm, RgbImage};

fn with_path(path: &Path) -> impl Fn(std::io::Error) -> std::io::Error + '_ {
    move |e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

/// `std::fs::read` with the path in the error message.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path).map_err(with_path(path))?)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(with_path(path))?;
    tmp.write_all(bytes).map_err(with_path(path))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // tempfile creates 0600; outputs are ordinary data files.
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(with_path(path))?;
    }
    tmp.as_file().sync_all().map_err(with_path(path))?;
    tmp.persist(path).map_err(|e| with_path(path)(e.error))?;
    Ok(())
}
