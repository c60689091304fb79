//! Durable profile cache.
//!
//! Profiles append to `profiles.jsonl` (one record per line, later
//! lines win on reload) next to a regenerated `index.json` listing the
//! stored keys. A per-key build lock makes `get_or_build` at-most-once
//! per key even under concurrent builders.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{Profile, SelectionStrategy, SubjectKind};
use crate::corpus::ReviewId;
use crate::util::{sha256_hex, write_atomic};
use crate::{Error, Result};

const DATA_FILE: &str = "profiles.jsonl";
const INDEX_FILE: &str = "index.json";

/// Cache key for a profile build: subject, strategy (with the target
/// user for personalized strategies), and a digest of the exact source
/// review set, so any change to the inputs triggers a rebuild.
pub fn profile_key(
    kind: SubjectKind,
    subject_id: &str,
    strategy: SelectionStrategy,
    target_user: Option<&str>,
    source_review_ids: &[ReviewId],
) -> String {
    let mut ids: Vec<ReviewId> = source_review_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let joined = ids
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let strategy_repr = match (strategy, target_user) {
        (SelectionStrategy::NeighborBased(_), Some(target)) => {
            format!("{}@{}", strategy, target)
        }
        _ => strategy.to_string(),
    };
    format!(
        "{}:{}:{}:{}",
        kind,
        subject_id,
        strategy_repr,
        sha256_hex(joined.as_bytes())
    )
}

#[derive(Serialize, Deserialize)]
struct StoredProfile {
    key: String,
    profile: Profile,
}

#[derive(Serialize)]
struct Index<'a> {
    entries: usize,
    keys: Vec<&'a String>,
}

pub struct ProfileStore {
    dir: PathBuf,
    /// Loaded profiles; also serializes appends and index rewrites.
    inner: Mutex<BTreeMap<String, Profile>>,
    build_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ProfileStore {
    /// Opens (or creates) a store directory, loading any existing data
    /// file. The index is derived data and is regenerated on open.
    pub fn open(dir: &Path) -> Result<ProfileStore> {
        std::fs::create_dir_all(dir)?;
        let mut map = BTreeMap::new();
        let data = dir.join(DATA_FILE);
        if data.exists() {
            let text = std::fs::read_to_string(&data)?;
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let stored: StoredProfile = serde_json::from_str(line).map_err(|e| {
                    Error::Storage(format!("{}:{}: {}", data.display(), n + 1, e))
                })?;
                map.insert(stored.key, stored.profile);
            }
        }
        let store = ProfileStore {
            dir: dir.to_path_buf(),
            inner: Mutex::new(map),
            build_locks: Mutex::new(HashMap::new()),
        };
        store.rewrite_index(&store.inner.lock().unwrap())?;
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Profile> {
        self.inner.lock().unwrap().get(key).cloned()
    }

    /// Returns the cached profile for `key`, or runs `build`, persists
    /// its output, and returns it. Concurrent callers with the same key
    /// build at most once; distinct keys build independently.
    pub fn get_or_build<F>(&self, key: &str, build: F) -> Result<Profile>
    where
        F: FnOnce() -> Result<Profile>,
    {
        if let Some(hit) = self.get(key) {
            return Ok(hit);
        }
        let key_lock = {
            let mut locks = self.build_locks.lock().unwrap();
            Arc::clone(locks.entry(key.to_string()).or_default())
        };
        let _guard = key_lock.lock().unwrap();
        // Another builder may have won the race while we waited.
        if let Some(hit) = self.get(key) {
            return Ok(hit);
        }
        let profile = build()?;
        self.persist(key, &profile)?;
        Ok(profile)
    }

    fn persist(&self, key: &str, profile: &Profile) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let line = serde_json::to_string(&StoredProfile {
            key: key.to_string(),
            profile: profile.clone(),
        })?;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(DATA_FILE))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        inner.insert(key.to_string(), profile.clone());
        self.rewrite_index(&inner)
    }

    fn rewrite_index(&self, inner: &BTreeMap<String, Profile>) -> Result<()> {
        let index = Index {
            entries: inner.len(),
            keys: inner.keys().collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&index)?;
        bytes.push(b'\n');
        write_atomic(&self.dir.join(INDEX_FILE), &bytes)
    }
}
