use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};

pub const CONFIG_FILE: &str = "config.json";

/// Resolves paths against the run directory.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text)
    }

    /// Record the effective settings of `section` in `config.json`, keeping
    /// the sections written by earlier subcommands.
    pub fn record_config<T: Serialize>(&self, section: &str, value: &T) -> Result<()> {
        let mut all = read_config(&self.root)?.unwrap_or_default();
        all.insert(section.to_string(), serde_json::to_value(value)?);
        all.insert(
            "version".into(),
            Value::String(env!("CARGO_PKG_VERSION").into()),
        );
        self.write_json(CONFIG_FILE, &all)?;
        Ok(())
    }
}

pub fn read_config(dir: &Path) -> Result<Option<Map<String, Value>>> {
    let p = dir.join(CONFIG_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    match v {
        Value::Object(m) => Ok(Some(m)),
        _ => anyhow::bail!("{} is not a JSON object", p.display()),
    }
}

/// Seed of the trace a run directory was built on.
pub fn trace_seed(config: &Map<String, Value>) -> Option<u64> {
    config
        .get("gen-trace")
        .and_then(|s| s.get("seed"))
        .and_then(Value::as_u64)
}
