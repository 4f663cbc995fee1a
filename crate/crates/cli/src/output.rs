//! Output-directory plumbing: config snapshots and CSV files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::Global;

/// The output directory, created if missing.
pub fn out_dir(g: &Global) -> Result<PathBuf> {
    let dir = g.out.clone().context("--out is required for this command")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes `config.<command>.json`: the fully resolved flags with sorted keys.
pub fn snapshot<A: Serialize>(dir: &Path, command: &str, g: &Global, args: &A) -> Result<()> {
    let value = serde_json::json!({
        "command": command,
        "global": g,
        "args": args,
        "version": env!("CARGO_PKG_VERSION"),
    });
    // serde_json's map is ordered by key, so this is canonical
    let text = serde_json::to_string_pretty(&value)?;
    let path = dir.join(format!("config.{command}.json"));
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub struct Csv {
    path: PathBuf,
    w: BufWriter<File>,
}

impl Csv {
    pub fn create(path: impl Into<PathBuf>, header: &str) -> Result<Self> {
        let path = path.into();
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut c = Self { path, w: BufWriter::new(f) };
        c.row(header)?;
        Ok(c)
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.w, "{line}").with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().with_context(|| format!("writing {}", self.path.display()))
    }
}

/// Runs `f` on a buffered file and flushes it.
pub fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
