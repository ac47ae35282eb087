//! All-or-nothing output directories.
//!
//! Files are written into a staging directory inside the target and moved
//! into place only by [`OutputDir::commit`]. Dropping an uncommitted
//! `OutputDir` deletes everything it wrote.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{io_at, Result};
use crate::manifest::csv_columns;

pub struct OutputDir {
    target: PathBuf,
    staging: PathBuf,
    created_target: bool,
    files: Vec<String>,
    committed: bool,
}

impl OutputDir {
    pub fn create(target: &Path) -> Result<Self> {
        let created_target = !target.exists();
        fs::create_dir_all(target).map_err(io_at(target))?;
        let staging = target.join(format!(".partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_at(&staging))?;
        }
        fs::create_dir(&staging).map_err(io_at(&staging))?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            created_target,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    fn staged(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.staging.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.staged(name);
        fs::write(&path, bytes).map_err(io_at(path))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// A CSV writer with the registered header for `name` already written.
    pub fn csv(&mut self, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
        let path = self.staged(name);
        let file = File::create(&path).map_err(io_at(&path))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(csv_columns(name))?;
        Ok(w)
    }

    pub fn with_file<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.staged(name);
        let file = File::create(&path).map_err(io_at(&path))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(io_at(path))
    }

    /// Moves every staged file into the target directory.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let (from, to) = (self.staging.join(name), self.target.join(name));
            fs::rename(&from, &to).map_err(io_at(&to))?;
            out.push(to);
        }
        fs::remove_dir(&self.staging).map_err(io_at(&self.staging))?;
        self.committed = true;
        Ok(out)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        let _ = fs::remove_dir_all(&self.staging);
        if self.created_target {
            // Only succeeds if nothing else landed there.
            let _ = fs::remove_dir(&self.target);
        }
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
