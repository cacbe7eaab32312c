use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to redo a run: the exact arguments, the digests of what
/// went in and of what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Arguments after the program name.
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<FileDigest>,
    pub parallel: bool,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &[String], seed: Option<u64>, config: Option<serde_json::Value>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_vec(),
            seed,
            config,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            parallel: metok_core::par::is_parallel(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Record `out/name`.
    pub fn add_artifact(&mut self, out: &Path, name: &str) -> Result<()> {
        self.artifacts.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_file(&out.join(name))?,
        });
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(FILE_NAME);
        crate::write_json(&path, self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Fail unless every recorded input still has its recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = sha256_file(Path::new(&input.path))?;
            if now != input.sha256 {
                bail!(
                    "input {} changed since the run (sha256 {} != {})",
                    input.path,
                    now,
                    input.sha256
                );
            }
        }
        Ok(())
    }

    /// Compare recorded artifact digests with the files under `out`.
    /// Returns the names that differ.
    pub fn diff_artifacts(&self, out: &Path) -> Result<Vec<String>> {
        let mut changed = Vec::new();
        for a in &self.artifacts {
            if sha256_file(&out.join(&a.path))? != a.sha256 {
                changed.push(a.path.clone());
            }
        }
        Ok(changed)
    }
}

/// `command` with the value of `--out` replaced.
pub fn with_out(command: &[String], out: &Path) -> Vec<String> {
    let mut args = Vec::with_capacity(command.len() + 2);
    let mut replaced = false;
    let mut iter = command.iter();
    while let Some(a) = iter.next() {
        if a == "--out" {
            iter.next();
            args.push(a.clone());
            args.push(out.display().to_string());
            replaced = true;
        } else if a.starts_with("--out=") {
            args.push(format!("--out={}", out.display()));
            replaced = true;
        } else {
            args.push(a.clone());
        }
    }
    if !replaced {
        args.push("--out".into());
        args.push(out.display().to_string());
    }
    args
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn out_replacement() {
        let p = Path::new("/new");
        assert_eq!(
            with_out(&s(&["simulate", "--out", "a", "--steps", "3"]), p),
            s(&["simulate", "--out", "/new", "--steps", "3"])
        );
        assert_eq!(with_out(&s(&["gen", "--out=a"]), p), s(&["gen", "--out=/new"]));
        assert_eq!(with_out(&s(&["gen"]), p), s(&["gen", "--out", "/new"]));
    }

    #[test]
    fn digests_detect_changes() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x");
        fs::write(&f, b"abc").unwrap();
        assert_eq!(
            sha256_file(&f).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let mut m = RunManifest::new(&s(&["gen"]), Some(1), None);
        m.add_input(&f).unwrap();
        m.add_artifact(dir.path(), "x").unwrap();
        m.verify_inputs().unwrap();
        assert!(m.diff_artifacts(dir.path()).unwrap().is_empty());
        fs::write(&f, b"abd").unwrap();
        assert!(m.verify_inputs().is_err());
        assert_eq!(m.diff_artifacts(dir.path()).unwrap(), vec!["x".to_string()]);
    }
}
