//! Whole-file writes that never leave a partial file at the destination.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Environment variable naming the scratch directory for temporary files.
pub const TMP_ENV: &str = "STATERANK_TMP";

pub fn scratch_dir() -> PathBuf {
    std::env::var_os(TMP_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
}

fn temp_path(dir: &Path, dest: &Path) -> PathBuf {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let name = dest.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    dir.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ))
}

/// Write `bytes` to a temporary file, then move it over `dest`. Falls back
/// to copy-and-delete when the scratch directory is on another filesystem.
pub fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let dir = scratch_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tmp = temp_path(&dir, dest);
    let result = (|| {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        if fs::rename(&tmp, dest).is_err() {
            // Copy into a sibling of dest first so the final step is still a rename.
            let sibling = temp_path(dest.parent().unwrap_or(Path::new(".")), dest);
            fs::copy(&tmp, &sibling).map_err(|e| Error::io(&sibling, e))?;
            fs::rename(&sibling, dest).map_err(|e| {
                let _ = fs::remove_file(&sibling);
                Error::io(dest, e)
            })?;
            let _ = fs::remove_file(&tmp);
        }
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
