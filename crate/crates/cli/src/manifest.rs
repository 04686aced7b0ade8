use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use xmutest::pipeline::content_hash;

use crate::config::RunConfig;
use crate::failure::{Context, Failure, Kind, ResultExt};

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub started_unix: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputHash>,
    pub artifacts: Vec<PathBuf>,
    pub timings: Vec<Timing>,
}

/// Bookkeeping for one subcommand invocation.
pub struct Run {
    pub cfg: RunConfig,
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    pub fn new(command: &str, cfg: RunConfig) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Run {
            manifest: RunManifest {
                command: command.to_string(),
                started_unix,
                config: cfg.clone(),
                inputs: Vec::new(),
                artifacts: Vec::new(),
                timings: Vec::new(),
            },
            cfg,
            clock: Instant::now(),
        }
    }

    /// Reads an input file, recording its hash. Read failures get `kind`.
    pub fn read_input(&mut self, path: &Path, kind: Kind) -> Result<Vec<u8>, Failure> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("reading {}", path.display()))
            .kind(kind)?;
        self.manifest.inputs.push(InputHash {
            path: path.to_path_buf(),
            sha256: content_hash(&bytes),
        });
        Ok(bytes)
    }

    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.manifest.timings.push(Timing {
            phase: name.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn write_artifact(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.cfg.artifact(name);
        self.write_to(&path, bytes)?;
        Ok(path)
    }

    pub fn write_to(&mut self, path: &Path, bytes: &[u8]) -> Result<(), Failure> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .kind(Kind::Data)?;
        }
        std::fs::write(path, bytes)
            .with_context(|| format!("writing {}", path.display()))
            .kind(Kind::Data)?;
        self.manifest.artifacts.push(path.to_path_buf());
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), Failure> {
        self.manifest.timings.push(Timing {
            phase: "total".to_string(),
            seconds: self.clock.elapsed().as_secs_f64(),
        });
        let path = self.cfg.artifact(&format!("{}.manifest.json", self.manifest.command));
        let json = serde_json::to_vec_pretty(&self.manifest).kind(Kind::Data)?;
        std::fs::create_dir_all(&self.cfg.output_dir).kind(Kind::Data)?;
        std::fs::write(&path, json)
            .with_context(|| format!("writing {}", path.display()))
            .kind(Kind::Data)?;
        let _ = std::fs::remove_file(failed_marker(&self.cfg.output_dir, &self.manifest.command));
        Ok(())
    }
}

pub fn failed_marker(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.FAILED"))
}
