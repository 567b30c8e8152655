//! On-disk response cache: `<key>.txt` holds the raw completion text and
//! `<key>.meta` one JSON object describing the request.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PromptRequest;
use crate::error::{Error, Result};

/// Digest over everything that identifies one sampled completion.
pub fn cache_key(backend_id: &str, req: &PromptRequest, ordinal: usize, run_seed: u64) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(b"selfner-completion-v1");
    field(backend_id.as_bytes());
    field(req.model.as_bytes());
    field(req.prompt.as_bytes());
    field(&req.temperature.to_bits().to_le_bytes());
    field(&(ordinal as u64).to_le_bytes());
    field(&run_seed.to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheMeta {
    pub model: String,
    pub temperature: f64,
    pub ordinal: usize,
    pub timestamp: u64,
    #[serde(default)]
    pub prompt: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating cache {}", dir.display()), e))?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{key}.{ext}"))
    }

    /// `Ok(None)` on a miss.
    pub fn lookup(&self, key: &str) -> Result<Option<String>> {
        match fs::read_to_string(self.path(key, "txt")) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(format!("reading cache entry {key}"), e)),
        }
    }

    pub fn store(&self, key: &str, text: &str, meta: Option<&CacheMeta>) -> Result<()> {
        if let Some(meta) = meta {
            write_atomic(&self.path(key, "meta"), serde_json::to_string(meta)?.as_bytes())?;
        }
        // the .txt file is the commit point: it is written last
        write_atomic(&self.path(key, "txt"), text.as_bytes())
    }

    pub fn meta_now(req: &PromptRequest, ordinal: usize) -> CacheMeta {
        CacheMeta {
            model: req.model.clone(),
            temperature: req.temperature,
            ordinal,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            prompt: req.prompt.clone(),
        }
    }

    /// Number of `.txt` entries.
    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|it| {
                it.filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().is_some_and(|x| x == "txt"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "tmp{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming into {}", path.display()), e))
}
