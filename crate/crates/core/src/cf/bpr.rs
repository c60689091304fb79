//! Bayesian personalized ranking over implicit feedback.
//!
//! Scores are plain inner products `p_u·q_i`; training maximizes
//! `ln σ(s_ui − s_uj)` over observed/unobserved item pairs with
//! uniformly sampled negatives. Training is single-threaded and fully
//! seeded, so a fixed seed reproduces parameters bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{CandidateList, TrainConfig};
use crate::{Error, Result};

/// An implicit positive: the user interacted with the item.
pub type Interaction = (String, String);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BprModel {
    user_index: BTreeMap<String, usize>,
    item_index: BTreeMap<String, usize>,
    user_factors: Vec<Vec<f64>>,
    item_factors: Vec<Vec<f64>>,
    dim: usize,
}

impl BprModel {
    /// Preference score for (user, item); higher means more likely to
    /// interact. Unknown users or items score 0.
    pub fn score(&self, user: &str, item: &str) -> f64 {
        match (self.user_index.get(user), self.item_index.get(item)) {
            (Some(&u), Some(&i)) => self.user_factors[u]
                .iter()
                .zip(&self.item_factors[i])
                .map(|(x, y)| x * y)
                .sum(),
            _ => 0.0,
        }
    }

    pub fn knows_user(&self, user: &str) -> bool {
        self.user_index.contains_key(user)
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.item_index.keys().map(String::as_str)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::save_checkpoint(self, path)
    }

    pub fn load(path: &Path) -> Result<BprModel> {
        super::load_checkpoint(path)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains a BPR model on implicit positives. Duplicate pairs are
/// deduplicated. Per-epoch loss (mean `−ln σ`) drives early stopping.
pub fn train_bpr(interactions: &[Interaction], config: &TrainConfig) -> Result<BprModel> {
    config.validate()?;
    if interactions.is_empty() {
        return Err(Error::Train("bpr: empty interaction set".to_string()));
    }
    let mut user_index = BTreeMap::new();
    let mut item_index = BTreeMap::new();
    for (u, i) in interactions {
        let next = user_index.len();
        user_index.entry(u.clone()).or_insert(next);
        let next = item_index.len();
        item_index.entry(i.clone()).or_insert(next);
    }
    let n_users = user_index.len();
    let n_items = item_index.len();

    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_users];
    let mut positives: Vec<(usize, usize)> = Vec::new();
    for (u, i) in interactions {
        let (u, i) = (user_index[u], item_index[i]);
        if seen[u].insert(i) {
            positives.push((u, i));
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut init = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..config.dim)
                    .map(|_| (rng.random::<f64>() - 0.5) * 0.1)
                    .collect()
            })
            .collect()
    };
    let mut model = BprModel {
        user_factors: init(n_users),
        item_factors: init(n_items),
        dim: config.dim,
        user_index,
        item_index,
    };

    let lr = config.learning_rate;
    let reg = config.regularization;
    let mut best_loss = f64::INFINITY;
    let mut best: Option<BprModel> = None;
    let mut stale = 0usize;

    for epoch in 0..config.epochs {
        positives.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut updates = 0usize;
        for &(u, i) in &positives {
            if seen[u].len() >= n_items {
                continue; // no negative exists for this user
            }
            let j = loop {
                let j = rng.random_range(0..n_items);
                if !seen[u].contains(&j) {
                    break j;
                }
            };
            let x: f64 = model.user_factors[u]
                .iter()
                .zip(&model.item_factors[i])
                .zip(&model.item_factors[j])
                .map(|((p, qi), qj)| p * (qi - qj))
                .sum();
            if !x.is_finite() {
                return Err(Error::Train(format!(
                    "bpr diverged at epoch {}; try a smaller learning rate",
                    epoch
                )));
            }
            let g = sigmoid(-x);
            loss += (1.0 + (-x).exp()).ln();
            updates += 1;
            for d in 0..config.dim {
                let pu = model.user_factors[u][d];
                let qi = model.item_factors[i][d];
                let qj = model.item_factors[j][d];
                model.user_factors[u][d] += lr * (g * (qi - qj) - reg * pu);
                model.item_factors[i][d] += lr * (g * pu - reg * qi);
                model.item_factors[j][d] += lr * (-g * pu - reg * qj);
            }
        }
        if updates == 0 {
            log::warn!("bpr: no trainable pairs (every user saw every item)");
            break;
        }
        let loss = loss / updates as f64;
        if loss + 1e-6 < best_loss {
            best_loss = loss;
            best = Some(model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                log::debug!("bpr early stop after epoch {} (best loss {:.4})", epoch, best_loss);
                break;
            }
        }
    }
    Ok(best.unwrap_or(model))
}

/// Top-`n` unseen items for a user, scored by the model. Ties break by
/// item id so the list is deterministic. `short` is set when fewer
/// than `n` candidates exist; unknown users get the same deterministic
/// list with all-zero scores.
pub fn generate_candidates(
    model: &BprModel,
    user: &str,
    n: usize,
    train_seen: &BTreeSet<String>,
) -> CandidateList {
    if !model.knows_user(user) {
        log::warn!("bpr candidates: unknown user {:?}; scores degenerate to 0", user);
    }
    let mut scored: Vec<(String, f64)> = model
        .item_ids()
        .filter(|i| !train_seen.contains(*i))
        .map(|i| (i.to_string(), model.score(user, i)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let short = scored.len() < n;
    scored.truncate(n);
    CandidateList {
        user_id: user.to_string(),
        items: scored,
        generator: "bpr".to_string(),
        short,
    }
}
