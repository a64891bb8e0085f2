use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionResult, TemplateId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub template: TemplateId,
    pub prompt_hash: String,
    pub model_id: String,
    pub temperature: f64,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.template.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update(self.prompt_hash.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.model_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.temperature.to_bits().to_le_bytes());
        hex::encode(hasher.finalize())
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Serialize, Deserialize)]
struct Entry {
    key: CacheKey,
    result: CompletionResult,
}

/// Content-addressed response store, one JSON file per key. Writes go
/// through a temp file and rename, so concurrent writers of the same key
/// leave one complete file.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, String> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest()))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CompletionResult>, String> {
        let path = self.path(key);
        match fs::read_to_string(&path) {
            Ok(raw) => {
                let entry: Entry =
                    serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
                Ok(Some(entry.result))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(format!("{}: {e}", path.display())),
        }
    }

    pub fn put(&self, key: &CacheKey, result: &CompletionResult) -> Result<(), String> {
        let path = self.path(key);
        let entry = Entry {
            key: key.clone(),
            result: result.clone(),
        };
        let raw = serde_json::to_string_pretty(&entry).map_err(|e| e.to_string())?;
        let unique = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .dir
            .join(format!(".{}.{}-{unique}.tmp", key.digest(), std::process::id()));
        fs::write(&tmp, raw).map_err(|e| format!("{}: {e}", tmp.display()))?;
        fs::rename(&tmp, &path).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|it| {
                it.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
