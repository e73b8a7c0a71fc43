//! Run manifests. Every stage writes one manifest listing the files it read
//! and wrote with their SHA-256, and the hash of the manifest before it, so
//! a run directory forms a verifiable chain.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::sha256_hex;

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    /// SHA-256 of the previous manifest file in the chain.
    pub previous: Option<String>,
    pub wall_time_secs: f64,
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn artifact(root: &Path, path: &Path) -> Result<Artifact> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Artifact {
        path: relative(root, path),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Appends manifests to `root/manifests`, numbered in write order.
#[derive(Debug)]
pub struct ManifestChain {
    root: PathBuf,
    next: usize,
    last: Option<String>,
}

impl ManifestChain {
    /// Opens the chain in `root`, continuing after any manifests already
    /// there.
    pub fn open(root: &Path) -> Result<Self> {
        let existing = manifest_files(root)?;
        let last = match existing.last() {
            Some(p) => Some(sha256_hex(&std::fs::read(p)?)),
            None => None,
        };
        Ok(Self {
            root: root.to_path_buf(),
            next: existing.len(),
            last,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes the manifest for one stage and returns its path.
    pub fn record(
        &mut self,
        command: &str,
        config: BTreeMap<String, String>,
        seed: u64,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        wall_time_secs: f64,
    ) -> Result<PathBuf> {
        let hash_all = |paths: &[PathBuf]| -> Result<Vec<Artifact>> {
            paths.iter().map(|p| artifact(&self.root, p)).collect()
        };
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
            previous: self.last.clone(),
            wall_time_secs,
        };
        let dir = self.root.join(MANIFEST_DIR);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{:03}_{}.json", self.next, command));
        let body = serde_json::to_vec_pretty(&manifest)?;
        std::fs::write(&path, &body)?;
        self.last = Some(sha256_hex(&body));
        self.next += 1;
        Ok(path)
    }
}

/// Manifest files of a run directory in chain order.
pub fn manifest_files(root: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join(MANIFEST_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    Ok(files)
}

/// Checks the chain links and that every recorded output still hashes to
/// its recorded value and is recorded by exactly one manifest. Returns the
/// number of manifests.
pub fn verify_chain(root: &Path) -> Result<usize> {
    let files = manifest_files(root)?;
    let mut previous: Option<String> = None;
    let mut owners: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in &files {
        let body = std::fs::read(path)?;
        let m: RunManifest = serde_json::from_slice(&body).with_context(|| format!("parsing {}", path.display()))?;
        if m.previous != previous {
            bail!("{} does not link to the manifest before it", path.display());
        }
        for a in &m.outputs {
            let now = artifact(root, &root.join(&a.path))?;
            if now.sha256 != a.sha256 {
                bail!("{} changed since {} recorded it", a.path, path.display());
            }
            if let Some(first) = owners.insert(a.path.clone(), path.clone()) {
                bail!("{} is recorded by both {} and {}", a.path, first.display(), path.display());
            }
        }
        previous = Some(sha256_hex(&body));
    }
    Ok(files.len())
}
