//! On-disk response cache keyed by request digest.
//!
//! One JSON file per key under the cache directory. Writes go through a
//! temp-file rename, and a process-wide mutex serializes them, so
//! concurrent readers never see partial entries.

use std::path::PathBuf;
use std::sync::Mutex;

use super::CompletionResult;
use crate::Result;

pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<ResponseCache> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{}.json", key))
    }

    pub fn get(&self, key: &str) -> Result<Option<CompletionResult>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        let body = std::fs::read_to_string(&path)?;
        Ok(Some(serde_json::from_str(&body)?))
    }

    pub fn put(&self, key: &str, result: &CompletionResult) -> Result<()> {
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        let mut stored = result.clone();
        stored.cached = false;
        crate::util::write_atomic(&self.path(key), serde_json::to_string(&stored)?.as_bytes())
    }
}
