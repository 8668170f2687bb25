//! Run directories: one subdirectory per stage, each holding a copy of the
//! config that produced it, the hashes of its inputs, an event log and its
//! artifacts. Stage directories are write-once.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::{CliError, Result};

/// Environment variable naming the directory that relative run names live in.
pub const RUNS_ENV: &str = "CONDENSEGAN_RUNS";

/// Resolves `--run`: paths with a separator are used as given, bare names
/// are placed under `$CONDENSEGAN_RUNS` (default `runs`).
pub fn resolve_run(name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() || p.components().count() > 1 {
        return p.to_path_buf();
    }
    let root = std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(p)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::missing(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

pub struct Stage {
    pub name: &'static str,
    pub dir: PathBuf,
    log: File,
    started: Instant,
    deterministic: bool,
    inputs: Vec<(String, String)>,
}

impl Stage {
    /// Creates `<run>/<name>`. An existing stage directory is an error
    /// unless `force` is set, in which case it is replaced.
    pub fn create(run: &Path, name: &'static str, cfg: &RunConfig, force: bool) -> Result<Stage> {
        let dir = run.join(name);
        if dir.exists() {
            if !force {
                return Err(CliError::Config(format!(
                    "{} already exists; stage outputs are write-once (use --force to replace)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let stage = Stage {
            name,
            log: File::create(dir.join("report.jsonl")).map_err(|e| io_err(&dir, e))?,
            dir,
            started: Instant::now(),
            deterministic: cfg.deterministic(),
            inputs: Vec::new(),
        };
        stage.write("config.txt", cfg.canonical().as_bytes())?;
        stage.write("config.sha256", format!("{}\n", cfg.hash()).as_bytes())?;
        Ok(stage)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Writes a new file inside the stage directory; never overwrites.
    pub fn write(&self, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(bytes).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    pub fn write_json(&self, file: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        self.write(file, (text + "\n").as_bytes())
    }

    /// Records the hash of an input artifact; `label` is how it is listed.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.push((label.to_string(), file_sha256(path)?));
        Ok(())
    }

    /// Appends one event line. Wall time is included only outside
    /// deterministic mode.
    pub fn event(&mut self, event: &str, fields: Value) -> Result<()> {
        let mut line = Map::new();
        line.insert("stage".into(), json!(self.name));
        line.insert("event".into(), json!(event));
        if let Value::Object(m) = fields {
            line.extend(m);
        }
        if !self.deterministic {
            line.insert("wall_s".into(), json!(self.started.elapsed().as_secs_f64()));
        }
        let text = Value::Object(line).to_string();
        writeln!(self.log, "{text}").map_err(|e| io_err(&self.dir, e))
    }

    /// Writes `inputs.json` and `summary.json` and closes the stage.
    pub fn finish(mut self, summary: Value) -> Result<()> {
        let inputs: Map<String, Value> = self.inputs.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        self.write_json("inputs.json", &Value::Object(inputs))?;
        self.event("done", json!({}))?;
        self.write_json("summary.json", &summary)?;
        self.log.flush().map_err(|e| io_err(&self.dir, e))
    }
}
