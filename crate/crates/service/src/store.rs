//! Append-only JSON-lines logs and the on-disk layout of a data directory.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// One JSON value per line, appended and flushed on every write.
#[derive(Debug)]
pub struct JsonlLog {
    path: PathBuf,
    file: File,
}

impl JsonlLog {
    /// Opens for appending, first cutting off any torn final line so new
    /// entries start on a fresh line.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Ok(data) = std::fs::read(&path) {
            if data.last().is_some_and(|&b| b != b'\n') {
                let keep = data.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                OpenOptions::new().write(true).open(&path)?.set_len(keep as u64)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }

    /// Reads every complete entry. A final line without its newline is a
    /// torn write from a crash and is ignored.
    pub fn replay<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
        let data = match std::fs::read(path) {
            Ok(d) => d,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
        };
        let complete = match data.iter().rposition(|&b| b == b'\n') {
            Some(i) => &data[..=i],
            None => &[][..],
        };
        complete
            .split(|&b| b == b'\n')
            .enumerate()
            .filter(|(_, line)| !line.is_empty())
            .map(|(i, line)| {
                serde_json::from_slice(line).with_context(|| format!("{} line {}", path.display(), i + 1))
            })
            .collect()
    }
}

/// Files under a data directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("models"))
            .with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn intents(&self) -> PathBuf {
        self.root.join("intents.jsonl")
    }

    pub fn corrections(&self) -> PathBuf {
        self.root.join("corrections.jsonl")
    }

    pub fn registry(&self) -> PathBuf {
        self.root.join("registry.jsonl")
    }

    pub fn checkpoint(&self, version: &str) -> PathBuf {
        self.root.join("models").join(format!("{version}.ckpt"))
    }
}
