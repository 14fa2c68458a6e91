use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;

use crate::exit::{Failure, IoContext, Outcome};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub dataset: Option<String>,
    pub started: String,
    pub finished: Option<String>,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Output directory plus its manifest. The manifest is written as soon as
/// the run starts and rewritten whenever an artifact is added.
pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start(
        dir: &Path,
        command: &str,
        config: serde_json::Value,
        seed: u64,
        dataset: Option<String>,
    ) -> Outcome<Run> {
        std::fs::create_dir_all(dir)
            .io_context(|| format!("cannot create output directory {}", dir.display()))?;
        let mut run = Run {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config,
                seed,
                dataset,
                started: now(),
                finished: None,
                artifacts: vec![dir.join(MANIFEST_FILE)],
            },
        };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&mut self) -> Outcome {
        let path = self.dir.join(MANIFEST_FILE);
        let text =
            serde_json::to_string_pretty(&self.manifest).map_err(|e| Failure::Check(e.into()))?;
        std::fs::write(&path, text + "\n").io_context(|| format!("cannot write {}", path.display()))
    }

    /// Writes `contents` to `name` inside the output directory and records it.
    pub fn emit(&mut self, name: &str, contents: &str) -> Outcome<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .io_context(|| format!("cannot create {}", parent.display()))?;
        }
        std::fs::write(&path, contents)
            .io_context(|| format!("cannot write {}", path.display()))?;
        self.manifest.artifacts.push(path.clone());
        self.write_manifest()?;
        Ok(path)
    }

    pub fn emit_json<T: Serialize>(&mut self, name: &str, value: &T) -> Outcome<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Check(e.into()))?;
        self.emit(name, &(text + "\n"))
    }

    /// Records a file written by someone else.
    pub fn record(&mut self, path: PathBuf) -> Outcome {
        self.manifest.artifacts.push(path);
        self.write_manifest()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn finish(mut self) -> Outcome {
        self.manifest.finished = Some(now());
        self.write_manifest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::start(dir.path(), "cv", serde_json::json!({"k": 3}), 7, None).unwrap();
        let early: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert!(early["finished"].is_null());
        run.emit("a.txt", "x").unwrap();
        run.emit_json("sub/b.json", &[1, 2]).unwrap();
        run.finish().unwrap();
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        let listed: Vec<String> = m["artifacts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        assert_eq!(listed.len(), 3);
        for p in &listed {
            assert!(Path::new(p).exists(), "{p}");
        }
        assert_eq!(m["seed"], 7);
        assert!(m["finished"].is_string());
    }
}
