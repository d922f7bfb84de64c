//! File access: atomic artifact writes and the timestamped sidecar log.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use tempfile::NamedTempFile;

use crate::error::{Error, Result};

/// Name of the sidecar log; the only output allowed to differ between identical runs.
pub const RUN_LOG: &str = "run.log";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Reads an input artifact; a missing file is reported as [`Error::Missing`].
pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io { path: path.to_path_buf(), source: e },
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read(path)?;
    String::from_utf8(bytes).map_err(|e| Error::format(&path.display().to_string(), e.utf8_error().valid_up_to() as u64, "not UTF-8 text"))
}

/// Writes through a temporary file in the same directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Appends timestamped lines to `run.log` and echoes them to standard error.
#[derive(Debug)]
pub struct RunLog {
    path: PathBuf,
    quiet: bool,
}

impl RunLog {
    pub fn open(dir: &Path, quiet: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(RunLog { path: dir.join(RUN_LOG), quiet })
    }

    pub fn line(&self, msg: &str) -> Result<()> {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        if !self.quiet {
            eprintln!("{msg}");
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io_err(&self.path))?;
        writeln!(f, "{t:.3} {msg}").map_err(io_err(&self.path))
    }
}
