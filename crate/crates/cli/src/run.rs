//! Output directories, the per-directory write lock, resolved configs and
//! error classification.

use std::fs::{File, TryLockError};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
const LOCK_FILE: &str = ".mdvae.lock";

/// Bad flags or flag combinations; exits with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit status for an error: 1 usage, 2 data, 3 numeric.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<mdvae_core::Error>() {
            return if e.is_numeric() { 3 } else { 2 };
        }
    }
    2
}

/// An output directory held exclusively for the lifetime of the value.
pub struct OutDir {
    pub path: PathBuf,
    _lock: File,
}

impl OutDir {
    pub fn open(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).with_context(|| format!("creating output directory {}", path.display()))?;
        let lock_path = path.join(LOCK_FILE);
        let lock = File::create(&lock_path).with_context(|| format!("creating {}", lock_path.display()))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => {
                anyhow::bail!("another mdvae run is writing to {}; wait for it or choose another --out", path.display())
            }
            Err(TryLockError::Error(e)) => return Err(e).with_context(|| format!("locking {}", lock_path.display())),
        }
        Ok(Self {
            path: path.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        let path = self.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let path = self.join(rel);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// A command config: defaults, overlaid by an optional JSON file, overlaid
/// by flags.
pub fn load_config<T: DeserializeOwned + Default>(file: Option<&Path>) -> Result<T> {
    match file {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| mdvae_core::Error::io(p, e))?;
            let cfg = serde_json::from_str(&text)
                .map_err(|e| mdvae_core::Error::parse(p.display().to_string(), format!("line {}: {e}", e.line())))?;
            Ok(cfg)
        }
    }
}

/// Overwrite `$field` with `$flag` when the flag was given.
macro_rules! set {
    ($field:expr, $flag:expr) => {
        if let Some(v) = $flag {
            $field = v;
        }
    };
}
pub(crate) use set;

/// Fail with an actionable message when a prerequisite artifact is missing.
pub fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if !path.exists() {
        return Err(mdvae_core::Error::Invalid(format!("{what} {} does not exist; {hint}", path.display())).into());
    }
    Ok(())
}
