//! Per-command record of what a run wrote and when.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use vitp_core::eval::sweeps::write_atomic;

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub code_version: String,
    pub started: u64,
    /// Unset until the command has finished writing its outputs.
    pub finished: Option<u64>,
    /// Relative to the run directory.
    pub outputs: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn path(run_dir: &Path, command: &str) -> PathBuf {
        run_dir.join("manifest").join(format!("{command}.txt"))
    }

    /// Writes the manifest with its planned outputs before any of them exist.
    pub fn begin(run_dir: &Path, command: &str, digest: &str, seed: u64, outputs: Vec<PathBuf>) -> Result<Self> {
        let m = RunManifest {
            command: command.into(),
            config_digest: digest.into(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            started: now(),
            finished: None,
            outputs,
        };
        m.write(run_dir)?;
        Ok(m)
    }

    /// Records the end time; `extra` lists files that only appeared while running.
    pub fn finish(mut self, run_dir: &Path, extra: impl IntoIterator<Item = PathBuf>) -> Result<Self> {
        for p in extra {
            if !self.outputs.contains(&p) {
                self.outputs.push(p);
            }
        }
        self.finished = Some(now());
        self.write(run_dir)?;
        Ok(self)
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        write_atomic(&Self::path(run_dir, &self.command), self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "command={}\nconfig_digest={}\nseed={}\ncode_version={}\nstarted_unix={}\nfinished_unix={}\n",
            self.command,
            self.config_digest,
            self.seed,
            self.code_version,
            self.started,
            self.finished.map(|t| t.to_string()).unwrap_or_default()
        );
        for o in &self.outputs {
            s.push_str(&format!("output={}\n", o.display()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = RunManifest {
            command: String::new(),
            config_digest: String::new(),
            seed: 0,
            code_version: String::new(),
            started: 0,
            finished: None,
            outputs: Vec::new(),
        };
        for line in text.lines() {
            let (k, v) = line.split_once('=').with_context(|| format!("manifest line {line:?}"))?;
            match k {
                "command" => m.command = v.into(),
                "config_digest" => m.config_digest = v.into(),
                "seed" => m.seed = v.parse()?,
                "code_version" => m.code_version = v.into(),
                "started_unix" => m.started = v.parse()?,
                "finished_unix" => m.finished = if v.is_empty() { None } else { Some(v.parse()?) },
                "output" => m.outputs.push(v.into()),
                _ => bail!("unknown manifest key {k:?}"),
            }
        }
        Ok(m)
    }

    pub fn load(run_dir: &Path, command: &str) -> Result<Self> {
        let p = Self::path(run_dir, command);
        Self::from_text(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)
    }
}
