//! The `run.json` record written by every invocation.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use punet_core::ExperimentConfig;
use serde_json::{json, Value};
use sha1::{Digest, Sha1};

use crate::Cli;

pub const RUN_FILE: &str = "run.json";

pub fn code_version() -> String {
    format!("punet {}", env!("CARGO_PKG_VERSION"))
}

/// Hash of `s` as git stores a blob: SHA-1 over `blob <len>\0<s>`.
pub fn git_blob_hash(s: &str) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", s.len()).as_bytes());
    h.update(s.as_bytes());
    format!("{:x}", h.finalize())
}

pub struct Run {
    command: &'static str,
    args: Vec<String>,
    started: u64,
    clock: Instant,
    config: Option<ExperimentConfig>,
    outputs: Vec<PathBuf>,
    extra: serde_json::Map<String, Value>,
}

impl Run {
    pub fn start(cli: &Cli) -> Self {
        Run {
            command: cli.command.name(),
            args: std::env::args().skip(1).collect(),
            started: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            clock: Instant::now(),
            config: None,
            outputs: Vec::new(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn set_config(&mut self, cfg: &ExperimentConfig) {
        self.config = Some(cfg.clone());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn note(&mut self, key: &str, value: Value) {
        self.extra.insert(key.to_string(), value);
    }

    pub fn finish(self, out: &Path, code: u8, err: Option<&anyhow::Error>) -> anyhow::Result<()> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let version = code_version();
        let record = json!({
            "command": self.command,
            "args": self.args,
            "status": if code == 0 { "ok" } else { "failed" },
            "exit_code": code,
            "error": err.map(|e| format!("{e:#}")),
            "started_unix": self.started,
            "duration_s": self.clock.elapsed().as_secs_f64(),
            "code_version": version,
            "code_version_hash": git_blob_hash(&version),
            "config_hash": self.config.as_ref().map(|c| c.hash()),
            "seeds": { "config": self.config.as_ref().map(|c| c.seed), "env": std::env::var("PUNET_SEED").ok() },
            "config": self.config,
            "outputs": self.outputs,
            "details": self.extra,
        });
        let path = out.join(RUN_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
