use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use skorder::encoder::CHECKPOINT_VERSION;
use skorder::trainer::write_atomic;
use skorder::Result;

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Fully resolved configuration (defaults, presets and overrides applied).
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub checkpoint_format: u32,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: f64,
    pub wall_seconds: f64,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(args: Vec<String>) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        RunManifest {
            command: String::new(),
            args,
            config: serde_json::Value::Null,
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix,
            wall_seconds: 0.0,
            clock: Some(Instant::now()),
        }
    }

    pub fn named(mut self, command: &str) -> Self {
        self.command = command.to_string();
        self
    }

    /// Writes the manifest with the wall time so far.
    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.wall_seconds = self.clock.map(|c| c.elapsed().as_secs_f64()).unwrap_or(0.0);
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.write(path)
    }
}
