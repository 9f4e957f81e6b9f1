//! Experiment manifests: what was run, with which resolved settings, on
//! which inputs, producing which outputs.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_FORMAT: &str = "koopctl-manifest/v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved settings; enough to run the command again.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Absolute input paths keyed by role.
    pub inputs: BTreeMap<String, FileDigest>,
    /// Output paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub wall_clock_s: f64,
    /// Timing measurements that vary between runs.
    #[serde(default)]
    pub timing: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let abs = std::path::absolute(path)?;
    Ok(FileDigest {
        sha256: sha256_file(&abs)?,
        path: abs,
    })
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.format != MANIFEST_FORMAT {
            bail!(
                "{}: unsupported manifest format `{}`",
                path.display(),
                m.format
            );
        }
        Ok(m)
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        koopman_core::container::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Fails if any recorded input is missing or changed.
    pub fn verify_inputs(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (role, d) in &self.inputs {
            match sha256_file(&d.path) {
                Ok(h) if h == d.sha256 => {}
                Ok(_) => bad.push(format!("{role} {} changed", d.path.display())),
                Err(_) => bad.push(format!("{role} {} is missing", d.path.display())),
            }
        }
        if !bad.is_empty() {
            bail!("inputs do not match the manifest: {}", bad.join("; "));
        }
        Ok(())
    }
}

/// If `path` sits next to a manifest that lists it as an output, the file
/// must still have the recorded digest.
pub fn check_against_producer(path: &Path) -> Result<FileDigest> {
    let d = digest(path)?;
    let dir = d.path.parent().unwrap_or(Path::new("."));
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        log::warn!(
            "{} has no producing manifest; digest not verified",
            path.display()
        );
        return Ok(d);
    }
    let m = Manifest::load(&mpath)?;
    let name = d.path.file_name().map(PathBuf::from).unwrap_or_default();
    match m.outputs.iter().find(|o| o.path == name) {
        Some(o) if o.sha256 == d.sha256 => Ok(d),
        Some(_) => bail!(
            "{} does not match the digest recorded in {}",
            path.display(),
            mpath.display()
        ),
        None => {
            log::warn!("{} is not listed in {}", path.display(), mpath.display());
            Ok(d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(out: &Path, file: &str) -> Manifest {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            tool_version: "0".into(),
            command: "simulate".into(),
            argv: vec![],
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: vec![FileDigest {
                path: file.into(),
                sha256: sha256_file(&out.join(file)).unwrap(),
            }],
            wall_clock_s: 0.0,
            timing: BTreeMap::new(),
        }
    }

    #[test]
    fn tampered_outputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("data.bin");
        std::fs::write(&f, b"abc").unwrap();
        let m = manifest(dir.path(), "data.bin");
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
        check_against_producer(&f).unwrap();
        std::fs::write(&f, b"abd").unwrap();
        assert!(check_against_producer(&f).is_err());
    }

    #[test]
    fn changed_inputs_fail_verification() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("in.bin");
        std::fs::write(&f, b"x").unwrap();
        let mut m = manifest(dir.path(), "in.bin");
        m.inputs.insert("dataset".into(), digest(&f).unwrap());
        m.verify_inputs().unwrap();
        std::fs::write(&f, b"y").unwrap();
        assert!(m.verify_inputs().is_err());
    }
}
