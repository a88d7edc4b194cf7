//! Run directories and provenance.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use gormpo_core::Container;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Container entry carrying the config hash of the run that wrote it.
pub const HASH_ENTRY: &str = "provenance.config_hash";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub gormpo: String,
    pub container_format: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub started_unix: f64,
    pub wall_clock_secs: f64,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub inputs: Vec<String>,
    pub status: String,
    pub config: RunConfig,
}

impl Manifest {
    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Output directory plus the bookkeeping for one subcommand.
pub struct RunContext {
    pub command: &'static str,
    pub out: PathBuf,
    pub config: RunConfig,
    pub hash: String,
    started: Instant,
    started_unix: f64,
    outputs: Vec<String>,
    inputs: Vec<String>,
}

impl RunContext {
    pub fn new(command: &'static str, out: PathBuf, config: RunConfig) -> Result<Self> {
        fs::create_dir_all(&out).map_err(CliError::io(&out))?;
        let hash = config.hash();
        Ok(Self {
            command,
            out,
            config,
            hash,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            outputs: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.out).unwrap_or(path).display().to_string()
    }

    /// Fails before any work if a required input is absent.
    pub fn require(&mut self, path: &Path, what: &'static str) -> Result<()> {
        if !path.is_file() {
            return Err(CliError::MissingArtifact { path: path.to_owned(), what });
        }
        self.inputs.push(path.display().to_string());
        Ok(())
    }

    fn created(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        let rel = self.relative(path);
        if !self.outputs.contains(&rel) {
            self.outputs.push(rel);
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        self.created(&path)?;
        fs::write(&path, bytes).map_err(CliError::io(&path))?;
        Ok(path)
    }

    /// Saves a container stamped with the config hash.
    pub fn write_container(&mut self, name: &str, mut c: Container) -> Result<PathBuf> {
        c.put_str(HASH_ENTRY, &self.hash);
        let path = self.path(name);
        self.created(&path)?;
        c.write(&path)?;
        Ok(path)
    }

    /// Pretty JSON object with a `config_hash` field added.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut v = serde_json::to_value(value)?;
        if let Value::Object(map) = &mut v {
            map.insert("config_hash".into(), Value::String(self.hash.clone()));
        }
        let text = serde_json::to_string_pretty(&v)? + "\n";
        self.write_bytes(name, text.as_bytes())
    }

    /// One JSON object per line, each carrying `config_hash`.
    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut text = String::new();
        for row in rows {
            let mut v = serde_json::to_value(row)?;
            if let Value::Object(map) = &mut v {
                map.insert("config_hash".into(), Value::String(self.hash.clone()));
            }
            text.push_str(&v.to_string());
            text.push('\n');
        }
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Plot(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    /// Registers a file written by another routine.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        self.created(path)
    }

    pub fn finish(self, status: &str) -> Result<Manifest> {
        let manifest = Manifest {
            command: self.command.into(),
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            versions: Versions {
                gormpo: env!("CARGO_PKG_VERSION").into(),
                container_format: gormpo_core::container::VERSION.into(),
            },
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
            inputs: self.inputs,
            status: status.into(),
            config: self.config,
        };
        let path = self.out.join(Manifest::file_name(self.command));
        let mut f = fs::File::create(&path).map_err(CliError::io(&path))?;
        f.write_all((serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
            .map_err(CliError::io(&path))?;
        Ok(manifest)
    }
}
