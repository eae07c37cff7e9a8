//! Checksummed stages: a stage is skipped when its key (config slice plus
//! input checksums) matches the stored manifest and every recorded output is
//! still present and unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use ant_lab_core::util::{sha256_bytes, write_atomic};

use crate::config::RunConfig;

pub struct Workspace {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

pub type Artifacts = Vec<(String, Vec<u8>)>;

impl Workspace {
    pub fn new(cfg: RunConfig, force: bool) -> Self {
        let dir = cfg.run_dir.clone();
        Self { cfg, dir, force }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn read(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, bytes).with_context(|| format!("cannot write {}", p.display()))
    }

    /// Store the resolved configuration next to the artifacts.
    pub fn write_resolved_config(&self) -> Result<()> {
        self.write("config.resolved", self.cfg.to_text().as_bytes())
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.dir.join(".stages").join(format!("{stage}.manifest"))
    }

    fn stage_key(&self, stage: &str, namespaces: &[&str], inputs: &[&str]) -> Result<String> {
        let mut material = format!("stage={stage}\n{}", self.cfg.fingerprint(namespaces));
        for name in inputs {
            let p = self.path(name);
            let bytes = fs::read(&p).with_context(|| {
                format!("missing input {}; run the stage that produces it first", p.display())
            })?;
            material.push_str(&format!("input {name} {}\n", sha256_bytes(&bytes)));
        }
        Ok(sha256_bytes(material.as_bytes()))
    }

    fn is_current(&self, stage: &str, key: &str) -> bool {
        let Ok(text) = fs::read_to_string(self.manifest_path(stage)) else {
            return false;
        };
        let mut lines = text.lines();
        if lines.next() != Some(&format!("key {key}")) {
            return false;
        }
        let mut any = false;
        for line in lines {
            let Some((name, sum)) = line.rsplit_once(' ') else {
                return false;
            };
            match fs::read(self.path(name)) {
                Ok(bytes) if sha256_bytes(&bytes) == sum => any = true,
                _ => return false,
            }
        }
        any
    }

    /// Run `body` unless the stage is current. `body` returns the artifacts
    /// to write; they are written atomically, then the manifest.
    pub fn run_stage(
        &self,
        stage: &str,
        namespaces: &[&str],
        inputs: &[&str],
        body: impl FnOnce() -> Result<Artifacts>,
    ) -> Result<Outcome> {
        let key = self.stage_key(stage, namespaces, inputs)?;
        if !self.force && self.is_current(stage, &key) {
            log::info!("{stage}: up to date, skipped");
            return Ok(Outcome::Skipped);
        }
        let started = std::time::Instant::now();
        let artifacts = body()?;
        if artifacts.is_empty() {
            bail!("stage {stage} produced no artifacts");
        }
        let mut manifest = format!("key {key}\n");
        for (name, bytes) in &artifacts {
            self.write(name, bytes)?;
            manifest.push_str(&format!("{name} {}\n", sha256_bytes(bytes)));
        }
        write_atomic(&self.manifest_path(stage), manifest.as_bytes())
            .context("cannot write stage manifest")?;
        log::info!("{stage}: done in {:.1} s", started.elapsed().as_secs_f64());
        Ok(Outcome::Ran)
    }
}

pub fn exists(dir: &Path, name: &str) -> bool {
    dir.join(name).is_file()
}
