//! Provenance-stamped artifacts confined to the output directory.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use siphi_core::datastore::Manifest;

use crate::error::{CliError, CliResult};

/// Content digest of one input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub command: Vec<String>,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
}

impl Provenance {
    pub fn new(command: Vec<String>, seed: u64) -> Self {
        Self {
            tool: format!("siphi {}", env!("CARGO_PKG_VERSION")),
            command,
            seed,
            inputs: Vec::new(),
        }
    }

    pub fn add_file(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let bytes = read(path)?;
        self.push(role, path, hex::encode(blob_hash(&bytes)));
        Ok(())
    }

    /// A manifest together with every feature file it references.
    pub fn add_dataset(&mut self, role: &str, manifest_path: &Path) -> CliResult<()> {
        let digest = dataset_digest(manifest_path)?;
        self.push(role, manifest_path, digest);
        Ok(())
    }

    fn push(&mut self, role: &str, path: &Path, sha256: String) {
        log::info!("input {role} {} sha256:{sha256}", path.display());
        self.inputs.push(InputDigest {
            role: role.into(),
            path: path.display().to_string(),
            sha256,
        });
    }

    /// Comment block prepended to plain-text artifacts.
    fn text_header(&self) -> String {
        let mut s = format!("# {}\n# command: {}\n# seed: {}\n", self.tool, self.command.join(" "), self.seed);
        for i in &self.inputs {
            s.push_str(&format!("# input {} {} sha256:{}\n", i.role, i.path, i.sha256));
        }
        s.push('\n');
        s
    }
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    provenance: &'a Provenance,
    payload: &'a T,
}

/// SHA-256 of `blob <len>\0<bytes>`, as git hashes file contents.
pub fn blob_hash(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().into()
}

/// Tree-style digest: one `<blob hash> <path>` line for the manifest and
/// each feature file in manifest order, hashed together.
pub fn dataset_digest(manifest_path: &Path) -> CliResult<String> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(""));
    let mut listing = format!("{} manifest\n", hex::encode(blob_hash(&read(manifest_path)?)));
    for s in &manifest.samples {
        let bytes = read(&root.join(&s.feature_path))?;
        listing.push_str(&format!("{} {}\n", hex::encode(blob_hash(&bytes)), s.feature_path));
    }
    Ok(hex::encode(Sha256::digest(listing.as_bytes())))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Read a JSON artifact, accepting both stamped envelopes and bare payloads.
pub fn read_payload<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parse = |e: serde_json::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse)?;
    let inner = match value {
        serde_json::Value::Object(mut m) if m.contains_key("provenance") && m.contains_key("payload") => {
            m.remove("payload").unwrap_or_default()
        }
        v => v,
    };
    serde_json::from_value(inner).map_err(parse)
}

/// The output directory; every write goes through it.
pub struct OutDir {
    root: PathBuf,
    provenance: Provenance,
}

impl OutDir {
    pub fn create(root: &Path, provenance: Provenance) -> CliResult<Self> {
        if root.exists() && !root.is_dir() {
            return Err(CliError::usage("--out", format!("{} exists and is not a directory", root.display())));
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            provenance,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Resolve a relative artifact path, refusing anything that could
    /// leave the output directory.
    pub fn path(&self, name: &str) -> CliResult<PathBuf> {
        let rel = Path::new(name);
        let confined = !name.is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_)));
        if !confined {
            return Err(CliError::Runtime(format!("artifact name {name:?} would escape the output directory")));
        }
        Ok(self.root.join(rel))
    }

    /// Write via a temporary sibling and rename, so an interrupted run
    /// never leaves a truncated artifact behind.
    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name)?;
        let dir = path.parent().unwrap_or(&self.root);
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = dir.join(format!(".{file}.partial"));
        fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, payload: &T) -> CliResult<PathBuf> {
        let env = Envelope {
            provenance: &self.provenance,
            payload,
        };
        let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_text(&self, name: &str, body: &str) -> CliResult<PathBuf> {
        let text = format!("{}{body}", self.provenance.text_header());
        self.write_bytes(name, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `git hash-object` of "hello\n" under the SHA-256 object format.
        assert_eq!(
            hex::encode(blob_hash(b"hello\n")),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn names_cannot_escape() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path(), Provenance::new(vec![], 0)).unwrap();
        for bad in ["", "../x", "/etc/passwd", "a/../../b", "./a"] {
            assert!(out.path(bad).is_err(), "{bad}");
        }
        assert_eq!(out.path("m/a.json").unwrap(), dir.path().join("m/a.json"));
    }

    #[test]
    fn payload_reads_envelope_or_bare() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path(), Provenance::new(vec!["siphi".into()], 3)).unwrap();
        let p = out.write_json("v.json", &vec![0.1f64, 1.0 / 3.0]).unwrap();
        assert_eq!(read_payload::<Vec<f64>>(&p).unwrap(), vec![0.1, 1.0 / 3.0]);
        fs::write(dir.path().join("bare.json"), "[1.5]").unwrap();
        assert_eq!(read_payload::<Vec<f64>>(&dir.path().join("bare.json")).unwrap(), vec![1.5]);
    }
}
