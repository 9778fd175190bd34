use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::PipelineError;

/// Content-addressed store of raw completions, one file per
/// `sha256(stage, prompt)`.
#[derive(Debug, Clone)]
pub struct CompletionCache {
    dir: PathBuf,
}

fn cache_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Cache {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes via a temp file in the same directory, then renames.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(cache_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(cache_err(dir))?;
    tmp.write_all(bytes).map_err(cache_err(path))?;
    tmp.persist(path).map_err(|e| cache_err(path)(e.error))?;
    Ok(())
}

impl CompletionCache {
    pub fn new(cache_dir: &Path) -> Self {
        Self {
            dir: cache_dir.join("completions"),
        }
    }

    pub fn key(stage: &str, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update([0u8]);
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, stage: &str, prompt: &str) -> Result<Option<String>, PipelineError> {
        let path = self.path(&Self::key(stage, prompt));
        match std::fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(cache_err(&path)(e)),
        }
    }

    pub fn put(&self, stage: &str, prompt: &str, completion: &str) -> Result<(), PipelineError> {
        write_atomic(&self.path(&Self::key(stage, prompt)), completion.as_bytes())
    }

    pub fn len(&self) -> usize {
        std::fs::read_dir(&self.dir)
            .map(|rd| rd.filter_map(Result::ok).filter(|e| e.path().extension().is_some_and(|x| x == "txt")).count())
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
