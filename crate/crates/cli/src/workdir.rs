//! Work-directory layout, the advisory lock and provenance records.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use dfbpath::Error;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn other(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Self { code: 4, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => Failure::missing(e.to_string()),
            Error::Io { .. } => Failure::other(e.to_string()),
            _ => Failure::invariant(e.to_string()),
        }
    }
}

pub fn file_digest(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.into(), source })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub struct Workdir {
    pub root: PathBuf,
}

/// Held for the lifetime of a command; removed on drop.
pub struct Lock {
    path: PathBuf,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub const LOCK_FILE: &str = ".dfbpath.lock";

impl Workdir {
    pub fn open(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root).map_err(|e| Failure::other(format!("{}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn lock(&self) -> Result<Lock, Failure> {
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Failure::other(format!(
                "{} is in use by another dfbpath command (delete {} if it is stale)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(Failure::other(format!("{}: {e}", path.display()))),
        }
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn slides_dir(&self, cfg: &RunConfig) -> PathBuf {
        cfg.input_dir.clone().unwrap_or_else(|| self.path("slides"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.path("masks").join(format!("{id}.png"))
    }

    pub fn dfb_png_path(&self, id: &str) -> PathBuf {
        self.path("dfb").join(format!("{id}.png"))
    }

    pub fn dfb_raw_path(&self, id: &str) -> PathBuf {
        self.path("dfb").join(format!("{id}.f32"))
    }

    /// Records what produced the outputs: no timestamps or absolute paths,
    /// so reruns produce identical files.
    pub fn write_provenance(
        &self,
        command: &str,
        cfg: &RunConfig,
        extra: serde_json::Map<String, serde_json::Value>,
    ) -> Result<(), Failure> {
        let mut rec = serde_json::Map::new();
        rec.insert("command".into(), command.into());
        rec.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        rec.insert("seed".into(), cfg.seed.into());
        rec.insert("config_sha256".into(), cfg.hash().into());
        rec.insert("config".into(), serde_json::to_value(cfg).expect("config serialises"));
        rec.extend(extra);
        let path = self.path("provenance").join(format!("{command}.json"));
        dfbpath::io::write_json(&path, &rec)?;
        Ok(())
    }
}
