//! Collaborative-filtering engines.
//!
//! Two native models: biased matrix factorization trained on explicit
//! ratings ([`mf`]) and BPR-MF trained on implicit positives ([`bpr`]),
//! the latter feeding top-n candidate generation for the rerank
//! pipeline. Externally produced candidate lists can be loaded from
//! JSONL instead of training a native generator.
//!
//! Training is single-threaded and seeded; identical inputs produce
//! bitwise-identical parameters. Trained models are immutable and safe
//! to share across threads for scoring.

pub mod bpr;
pub mod mf;

pub use bpr::{generate_candidates, train_bpr, BprModel};
pub use mf::{train_mf, MfModel};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hyperparameters shared by both engines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without improvement tolerated before early stop.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 32,
            learning_rate: 0.01,
            regularization: 0.02,
            epochs: 100,
            seed: 42,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::Config("cf dimension must be ≥ 1".to_string()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("cf learning rate must be positive".to_string()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("cf epochs must be ≥ 1".to_string()));
        }
        Ok(())
    }
}

/// Ranked candidates for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub user_id: String,
    /// (item_id, generator score), non-increasing by score.
    pub items: Vec<(String, f64)>,
    pub generator: String,
    /// Set when fewer unseen items existed than were requested.
    pub short: bool,
}

impl CandidateList {
    pub fn verify(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (item, _) in &self.items {
            if !seen.insert(item.as_str()) {
                return Err(Error::Config(format!(
                    "candidate list for {} repeats item {}",
                    self.user_id, item
                )));
            }
        }
        if self
            .items
            .windows(2)
            .any(|w| w[0].1 < w[1].1)
        {
            return Err(Error::Config(format!(
                "candidate list for {} is not sorted by score descending",
                self.user_id
            )));
        }
        Ok(())
    }
}

/// Serialization wrapper so checkpoints stay portable JSON (arrays of
/// reals, no binary blobs).
#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    format_version: u32,
    model: T,
}

pub(crate) fn save_checkpoint<T: Serialize>(model: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(&Checkpoint {
        format_version: 1,
        model,
    })?;
    crate::util::write_atomic(path, body.as_bytes())
}

pub(crate) fn load_checkpoint<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let cp: Checkpoint<T> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if cp.format_version != 1 {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            cp.format_version
        )));
    }
    Ok(cp.model)
}

#[derive(Deserialize)]
struct ExternalCandidateLine {
    user_id: String,
    items: Vec<ExternalCandidateItem>,
    generator: String,
}

#[derive(Deserialize)]
struct ExternalCandidateItem {
    item_id: String,
    score: f64,
}

/// Loads per-user candidate lists from JSONL, enforcing the same
/// invariants native generation guarantees: known items, no train-seen
/// items, distinct items, non-increasing scores. Violations name the
/// offending line.
pub fn load_external_candidates(
    path: &Path,
    known_items: &BTreeSet<String>,
    train_seen: &BTreeMap<String, BTreeSet<String>>,
) -> Result<BTreeMap<String, CandidateList>> {
    let body = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, raw) in body.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: ExternalCandidateLine =
            serde_json::from_str(raw).map_err(|e| Error::Record {
                line,
                message: format!("candidate record: {}", e),
            })?;
        let seen = train_seen.get(&parsed.user_id);
        let mut items = Vec::with_capacity(parsed.items.len());
        let mut distinct = BTreeSet::new();
        for item in &parsed.items {
            if !known_items.contains(&item.item_id) {
                return Err(Error::Record {
                    line,
                    message: format!("unknown item {:?}", item.item_id),
                });
            }
            if seen.is_some_and(|s| s.contains(&item.item_id)) {
                return Err(Error::Record {
                    line,
                    message: format!(
                        "item {:?} already interacted with by user {:?} in train",
                        item.item_id, parsed.user_id
                    ),
                });
            }
            if !distinct.insert(item.item_id.as_str()) {
                return Err(Error::Record {
                    line,
                    message: format!("duplicate item {:?}", item.item_id),
                });
            }
            items.push((item.item_id.clone(), item.score));
        }
        let list = CandidateList {
            user_id: parsed.user_id.clone(),
            items,
            generator: parsed.generator,
            short: false,
        };
        list.verify().map_err(|e| Error::Record {
            line,
            message: e.to_string(),
        })?;
        if out.insert(parsed.user_id.clone(), list).is_some() {
            return Err(Error::Record {
                line,
                message: format!("duplicate user {:?}", parsed.user_id),
            });
        }
    }
    if out.is_empty() {
        log::warn!("external candidate file {:?} contains no lists", path);
    }
    Ok(out)
}

/// Renders a short reproducibility fingerprint of model parameters for
/// logs: dimension plus a digest of the serialized weights.
pub fn params_fingerprint<T: Serialize>(model: &T) -> Result<String> {
    let json = crate::util::canonical_json(model)?;
    let mut out = String::new();
    write!(out, "{}", &crate::util::sha256_hex(json.as_bytes())[..16]).expect("write to string");
    Ok(out)
}
