//! Staged artifact writes: every file goes to a temporary sibling first and
//! is renamed into place only after the whole command succeeded.

use std::io::Write;
use std::path::{Path, PathBuf};

use desne::{Error, Result};
use tempfile::NamedTempFile;

#[derive(Default)]
pub struct Staged {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    pub fn add(&mut self, path: &Path, contents: &str) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
        tmp.write_all(contents.as_bytes())
            .map_err(|e| io_err(path, e))?;
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    /// Move every staged file into place. On failure, files already
    /// committed by this call are removed again.
    pub fn commit(self) -> Result<()> {
        let mut done: Vec<PathBuf> = Vec::new();
        for (tmp, path) in self.files {
            if let Err(e) = tmp.persist(&path) {
                for p in &done {
                    let _ = std::fs::remove_file(p);
                }
                return Err(io_err(&path, e.error));
            }
            done.push(path);
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `<path>.meta.json`, the companion carrying config and hash for a CSV.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}
