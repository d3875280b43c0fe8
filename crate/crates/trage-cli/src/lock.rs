//! Exclusive ownership of an output directory for the duration of a run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// A `run.lock` file created atomically in the output directory and
/// removed when the run ends (RAII). A pre-existing lock aborts the run so
/// two processes never interleave artifacts.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let path = dir.join("run.lock");
        match fs::File::create_new(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "output directory {} is owned by another run; if that run is gone, delete {}",
                dir.display(),
                path.display()
            ),
            Err(e) => {
                Err(e).with_context(|| format!("cannot create lock file {}", path.display()))
            }
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
