//! Run directories, manifests and configuration loading.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use injectors::config::ExperimentConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const OUT_ENV: &str = "INJECTORS_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub args: Vec<String>,
    pub artifacts: Vec<String>,
}

/// Output directory of one invocation; the manifest is written on finish.
pub struct Run {
    pub dir: PathBuf,
    manifest: RunManifest,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

/// Short hex digest of everything that identifies an invocation.
pub fn run_id(command: &str, config: &str, seed: u64, started_at: &str) -> String {
    let mut h = Sha256::new();
    for part in [
        command,
        config,
        &seed.to_string(),
        started_at,
        &std::process::id().to_string(),
    ] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())[..12].to_string()
}

impl Run {
    /// Creates the output directory: `out` when given, otherwise
    /// `<out_root>/<command>-<run id>`.
    pub fn start(
        command: &str,
        config_path: Option<&Path>,
        config: &ExperimentConfig,
        seed: u64,
        out: Option<&Path>,
        out_root: &Path,
    ) -> Result<Self> {
        let started_at = now();
        let text = config.to_toml()?;
        let id = run_id(command, &text, seed, &started_at);
        let dir = match out {
            Some(d) => d.to_path_buf(),
            None => out_root.join(format!("{command}-{id}")),
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join(CONFIG_COPY), &text)?;
        Ok(Self {
            manifest: RunManifest {
                run_id: id,
                command: command.to_string(),
                config_path: config_path.map(Path::to_path_buf),
                out_dir: dir.clone(),
                seed,
                started_at,
                finished_at: None,
                args: std::env::args().collect(),
                artifacts: vec![CONFIG_COPY.to_string()],
            },
            dir,
        })
    }

    /// Path of an artifact inside the run directory, recorded in the manifest.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.manifest.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.artifact(name);
        std::fs::write(path, serde_json::to_string_pretty(value)?)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_at = Some(now());
        std::fs::write(
            self.dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(self.manifest)
    }
}

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Sets `a.b.c = value`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, inner) = parts.split_last().context("empty override key")?;
    let mut cur = table;
    for p in inner {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads the config file (defaults when absent) and applies `KEY=VALUE`
/// overrides; overrides win over the file.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text)
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(ExperimentConfig::from_table(table)?)
}
