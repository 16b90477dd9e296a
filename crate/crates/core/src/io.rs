//! Small file helpers shared by the writers.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;

/// `<path>.partial`: where writers stage output before the final rename.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Writes via `<path>.partial` and renames into place once `fill` succeeds.
/// On failure the partial file is left behind for inspection.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let partial = partial_path(path);
    {
        let mut w = BufWriter::new(File::create(&partial)?);
        fill(&mut w)?;
        w.flush()?;
    }
    fs::rename(&partial, path)?;
    Ok(())
}
