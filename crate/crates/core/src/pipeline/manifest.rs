//! Per-unit manifests and the resumable stage runner.
//!
//! A stage is skipped when the manifest already records it as successful under
//! the same config hash and every recorded input and output still hashes to
//! the recorded digest. Wall-clock timings (latest run of each stage) go to a
//! separate `timings.json`, so manifests stay byte-identical across reruns.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Running,
    Ok,
    Failed,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub unit: String,
    pub config_hash: String,
    pub status: UnitStatus,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Writes through a temporary file so an interrupted run never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub ran: bool,
    pub seconds: f64,
    pub finished_unix: u64,
}

/// Latest timing of every stage of a unit, in first-run order.
pub fn read_timings(dir: &Path) -> Result<Vec<Timing>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("timings.json"))?)?)
}

/// Runs the stages of one unit (a subject or the cohort) against its manifest.
pub struct StageRunner {
    manifest: Manifest,
    manifest_path: PathBuf,
    timings_path: PathBuf,
    timings: Vec<Timing>,
    roots: Vec<(String, PathBuf)>,
}

impl StageRunner {
    /// `roots` name the directories that recorded paths are made relative to
    /// (e.g. `("out", out_dir)`), so manifests do not depend on absolute locations.
    pub fn open(dir: &Path, unit: &str, config_hash: &str, roots: Vec<(String, PathBuf)>) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let previous = Manifest::read(&manifest_path).ok();
        let stages = match previous {
            Some(m) if m.config_hash == config_hash && m.unit == unit => m.stages,
            _ => Vec::new(),
        };
        Ok(Self {
            manifest: Manifest { unit: unit.to_string(), config_hash: config_hash.to_string(), status: UnitStatus::Running, stages },
            manifest_path,
            timings_path: dir.join("timings.json"),
            timings: read_timings(dir).unwrap_or_default(),
            roots,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn display(&self, path: &Path) -> String {
        for (name, root) in &self.roots {
            if let Ok(rel) = path.strip_prefix(root) {
                return format!("{name}:{}", rel.display());
            }
        }
        path.display().to_string()
    }

    fn records(&self, paths: &[PathBuf]) -> Result<Vec<FileRecord>> {
        paths
            .iter()
            .map(|p| {
                let sha256 = sha256_file(p).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))?;
                Ok(FileRecord { path: self.display(p), sha256 })
            })
            .collect()
    }

    fn up_to_date(&self, name: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> bool {
        let Some(prev) = self.manifest.stage(name) else { return false };
        if prev.status != StageStatus::Ok || prev.inputs.len() != inputs.len() || prev.outputs.len() != outputs.len() {
            return false;
        }
        let same = |recorded: &[FileRecord], paths: &[PathBuf]| {
            recorded.iter().zip(paths).all(|(r, p)| {
                r.path == self.display(p) && p.exists() && sha256_file(p).map(|h| h == r.sha256).unwrap_or(false)
            })
        };
        same(&prev.inputs, inputs) && same(&prev.outputs, outputs)
    }

    fn put(&mut self, record: StageRecord) {
        match self.manifest.stages.iter_mut().find(|s| s.name == record.name) {
            Some(slot) => *slot = record,
            None => self.manifest.stages.push(record),
        }
    }

    /// Runs `f` unless the stage is up to date. Returns whether it ran.
    pub fn run<F>(&mut self, name: &str, inputs: &[PathBuf], outputs: &[PathBuf], f: F) -> Result<bool>
    where
        F: FnOnce() -> Result<()>,
    {
        let start = Instant::now();
        if self.up_to_date(name, inputs, outputs) {
            self.time(name, false, start);
            return Ok(false);
        }
        let result = self.records(inputs).and_then(|ins| f().map(|_| ins)).and_then(|ins| {
            let missing: Vec<String> = outputs.iter().filter(|p| !p.exists()).map(|p| self.display(p)).collect();
            if !missing.is_empty() {
                return Err(Error::InvalidInput(format!("stage did not produce {}", missing.join(", "))));
            }
            Ok((ins, self.records(outputs)?))
        });
        self.time(name, true, start);
        match result {
            Ok((ins, outs)) => {
                self.put(StageRecord { name: name.into(), status: StageStatus::Ok, inputs: ins, outputs: outs, message: None });
                self.save()?;
                Ok(true)
            }
            Err(e) => {
                let ins = inputs.iter().map(|p| FileRecord { path: self.display(p), sha256: String::new() }).collect();
                self.put(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    inputs: ins,
                    outputs: Vec::new(),
                    message: Some(e.to_string()),
                });
                self.manifest.status = UnitStatus::Failed;
                self.save()?;
                Err(Error::Stage { subject: self.manifest.unit.clone(), stage: name.into(), message: e.to_string() })
            }
        }
    }

    fn time(&mut self, name: &str, ran: bool, start: Instant) {
        let finished_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let t = Timing { stage: name.into(), ran, seconds: start.elapsed().as_secs_f64(), finished_unix };
        match self.timings.iter_mut().find(|x| x.stage == name) {
            Some(slot) => *slot = t,
            None => self.timings.push(t),
        }
    }

    pub fn save(&self) -> Result<()> {
        self.manifest.write(&self.manifest_path)?;
        write_atomic(&self.timings_path, serde_json::to_string_pretty(&self.timings)?.as_bytes())
    }

    pub fn finish(mut self, status: UnitStatus) -> Result<Manifest> {
        self.manifest.status = status;
        self.save()?;
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_skips_until_an_output_disappears() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.txt");
        let roots = vec![("out".to_string(), dir.path().to_path_buf())];
        let mut calls = 0;
        for expect_run in [true, false] {
            let mut r = StageRunner::open(dir.path(), "u", "h", roots.clone()).unwrap();
            let ran = r.run("write", &[], &[out.clone()], || { calls += 1; std::fs::write(&out, "x").map_err(Into::into) }).unwrap();
            assert_eq!(ran, expect_run);
            r.finish(UnitStatus::Ok).unwrap();
        }
        let first = std::fs::read(dir.path().join("manifest.json")).unwrap();
        std::fs::remove_file(&out).unwrap();
        let mut r = StageRunner::open(dir.path(), "u", "h", roots.clone()).unwrap();
        assert!(r.run("write", &[], &[out.clone()], || std::fs::write(&out, "x").map_err(Into::into)).unwrap());
        r.finish(UnitStatus::Ok).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("manifest.json")).unwrap());
        assert_eq!(calls, 1);
        let m = Manifest::read(dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.stages[0].outputs[0].path, "out:a.txt");

        // a different config hash forces a rerun
        let mut r = StageRunner::open(dir.path(), "u", "other", roots).unwrap();
        assert!(r.run("write", &[], &[out.clone()], || std::fs::write(&out, "x").map_err(Into::into)).unwrap());
    }

    #[test]
    fn failure_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = StageRunner::open(dir.path(), "u", "h", vec![]).unwrap();
        let err = r.run("boom", &[], &[], || Err(Error::NoVentricleFound)).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }));
        let m = Manifest::read(dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.status, UnitStatus::Failed);
        assert_eq!(m.stages[0].status, StageStatus::Failed);
    }
}
