//! Output directory writer. Every file goes through [`Artifacts`], which
//! records it with its SHA-256 in `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use prosody_priors::corpus::{file_checksum, hex_digest};
use serde::Serialize;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct InputEntry {
    role: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    file: String,
    kind: String,
    sha256: String,
    /// Corpus process checksum or checkpoint parameter checksum.
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    config_hash: String,
    inputs: Vec<InputEntry>,
    artifacts: Vec<ArtifactEntry>,
}

pub struct Artifacts {
    dir: PathBuf,
    manifest: Manifest,
}

pub fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    bytes
}

impl Artifacts {
    /// Creates `dir` if needed and writes the effective config.
    pub fn create<C: Serialize>(dir: &Path, command: &str, config: &C) -> anyhow::Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let bytes = pretty_json(config);
        let mut a = Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                command: command.into(),
                config_hash: hex_digest(&bytes),
                inputs: Vec::new(),
                artifacts: Vec::new(),
            },
        };
        a.bytes(CONFIG_FILE, "config", None, &bytes)?;
        Ok(a)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn input(&mut self, role: &str, path: &Path) -> anyhow::Result<()> {
        let sha256 = file_checksum(path)?;
        self.manifest.inputs.push(InputEntry {
            role: role.into(),
            sha256,
        });
        Ok(())
    }

    /// Writes `file` through `write` and records its checksum.
    pub fn file(
        &mut self,
        file: &str,
        kind: &str,
        id: Option<String>,
        write: impl FnOnce(&Path) -> anyhow::Result<()>,
    ) -> anyhow::Result<()> {
        let path = self.path(file);
        write(&path).with_context(|| format!("cannot write {}", path.display()))?;
        self.manifest.artifacts.push(ArtifactEntry {
            file: file.into(),
            kind: kind.into(),
            sha256: file_checksum(&path)?,
            id,
        });
        Ok(())
    }

    pub fn bytes(
        &mut self,
        file: &str,
        kind: &str,
        id: Option<String>,
        bytes: &[u8],
    ) -> anyhow::Result<()> {
        self.file(file, kind, id, |p| Ok(fs::write(p, bytes)?))
    }

    pub fn finish(self) -> anyhow::Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, pretty_json(&self.manifest))
            .with_context(|| format!("cannot write {}", path.display()))
    }
}
