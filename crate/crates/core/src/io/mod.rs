//! File formats: images, the model container, landmark and parameter text.
//!
//! All writers go through [`write_atomic`], so a failed write never leaves a
//! partial file at the destination.

mod container;
mod images;
mod text;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use container::{read_model, write_model, MAGIC as MODEL_MAGIC};
pub use images::{
    flat_to_image, image_to_flat, read_image, read_mask_png, write_mask_png, write_png, write_png16_gray, write_ppm,
};
pub use text::{
    parse_key_values, parse_theta, read_landmarks, read_theta, theta_to_string, write_landmarks, write_theta,
};

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(tmp.path(), std::fs::Permissions::from_mode(0o644)).map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
