use std::path::{Path, PathBuf};

use anyhow::Context;
use prockt_core::seeds;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record of one command invocation. `config` is the fully resolved
/// settings, so `prockt replay` can rerun the command from this file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub sub_seeds: SubSeeds,
    /// Tree hash over the input files, see [`hash_inputs`].
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubSeeds {
    pub split: u64,
    pub init: u64,
    pub dropout: u64,
    pub shuffle: u64,
    pub simulator: u64,
}

impl SubSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            split: seeds::sub_seed(seed, seeds::SPLIT),
            init: seeds::sub_seed(seed, seeds::INIT),
            dropout: seeds::sub_seed(seed, seeds::DROPOUT),
            shuffle: seeds::sub_seed(seed, seeds::SHUFFLE),
            simulator: seeds::sub_seed(seed, seeds::SIMULATOR),
        }
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Git-style content hash: each file is hashed as a `blob <len>\0` object,
/// then the sorted `(blob, path)` listing is hashed again. Paths are taken
/// relative to the input they were found under, so moving a data directory
/// does not change the hash.
pub fn hash_inputs(inputs: &[PathBuf]) -> anyhow::Result<String> {
    let mut tree = Sha256::new();
    for input in inputs {
        let mut files = Vec::new();
        collect_files(input, &mut files).with_context(|| format!("hashing {}", input.display()))?;
        let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for f in files {
            let bytes = std::fs::read(&f).with_context(|| format!("hashing {}", f.display()))?;
            let rel = f.strip_prefix(input).unwrap_or(&f);
            let rel = if rel.as_os_str().is_empty() { Path::new(&name) } else { rel };
            tree.update(format!("{} {}\n", blob_hash(&bytes), rel.display()));
        }
    }
    Ok(hex::encode(tree.finalize()))
}

pub fn write(path: &Path, manifest: &RunManifest) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> anyhow::Result<RunManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
