//! Biased matrix factorization trained by SGD on squared error.
//!
//! Prediction is `global + b_u + b_i + p_u·q_i`, clamped to the
//! configured bounds. Unknown users or items degrade to whichever bias
//! terms are known, bottoming out at the global mean, so the model
//! always returns a finite rating.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use super::TrainConfig;
use crate::{Error, Result};

/// A rating observation: (user, item, value). Values are reals, not
/// scale integers, so synthetic and preprocessed data train without
/// quantization.
pub type RatingExample = (String, String, f64);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfModel {
    user_index: BTreeMap<String, usize>,
    item_index: BTreeMap<String, usize>,
    user_factors: Vec<Vec<f64>>,
    item_factors: Vec<Vec<f64>>,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    global_mean: f64,
    dim: usize,
    /// Inclusive output clamp.
    bounds: (f64, f64),
}

impl MfModel {
    /// Predicted rating for (user, item); unknown entities fall back to
    /// the biases that are known.
    pub fn predict(&self, user: &str, item: &str) -> f64 {
        let mut score = self.global_mean;
        let u = self.user_index.get(user);
        let i = self.item_index.get(item);
        if let Some(&u) = u {
            score += self.user_bias[u];
        }
        if let Some(&i) = i {
            score += self.item_bias[i];
        }
        if let (Some(&u), Some(&i)) = (u, i) {
            score += dot(&self.user_factors[u], &self.item_factors[i]);
        }
        score.clamp(self.bounds.0, self.bounds.1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::save_checkpoint(self, path)
    }

    pub fn load(path: &Path) -> Result<MfModel> {
        super::load_checkpoint(path)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rmse_on(model: &MfModel, data: &[RatingExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let sse: f64 = data
        .iter()
        .map(|(u, i, r)| {
            let e = r - model.predict(u, i);
            e * e
        })
        .sum();
    (sse / data.len() as f64).sqrt()
}

/// Trains biased MF. `bounds` clamps predictions (pass the rating-scale
/// bounds, or wider bounds for unconstrained synthetic data). When a
/// validation set is given it drives early stopping; otherwise the
/// train RMSE plateau does. The best-seen parameters are kept.
pub fn train_mf(
    train: &[RatingExample],
    bounds: (f64, f64),
    config: &TrainConfig,
    valid: Option<&[RatingExample]>,
) -> Result<MfModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Train("mf: empty train set".to_string()));
    }
    if bounds.0 > bounds.1 {
        return Err(Error::Config(format!(
            "mf bounds inverted: {:?}",
            bounds
        )));
    }
    let mut user_index = BTreeMap::new();
    let mut item_index = BTreeMap::new();
    for (u, i, _) in train {
        let next = user_index.len();
        user_index.entry(u.clone()).or_insert(next);
        let next = item_index.len();
        item_index.entry(i.clone()).or_insert(next);
    }
    let n_users = user_index.len();
    let n_items = item_index.len();
    let global_mean = train.iter().map(|(_, _, r)| r).sum::<f64>() / train.len() as f64;

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut init = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..config.dim)
                    .map(|_| (rand::Rng::random::<f64>(&mut rng) - 0.5) * 0.1)
                    .collect()
            })
            .collect()
    };
    let mut model = MfModel {
        user_factors: init(n_users),
        item_factors: init(n_items),
        user_bias: vec![0.0; n_users],
        item_bias: vec![0.0; n_items],
        global_mean,
        dim: config.dim,
        bounds,
        user_index,
        item_index,
    };

    // Precompute index triples once; epochs shuffle this order.
    let mut order: Vec<(usize, usize, f64)> = train
        .iter()
        .map(|(u, i, r)| (model.user_index[u], model.item_index[i], *r))
        .collect();

    let lr = config.learning_rate;
    let reg = config.regularization;
    let monitor_own = valid.is_none();
    let mut best_rmse = f64::INFINITY;
    let mut best: Option<MfModel> = None;
    let mut stale = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &(u, i, r) in &order {
            let pred = model.global_mean
                + model.user_bias[u]
                + model.item_bias[i]
                + dot(&model.user_factors[u], &model.item_factors[i]);
            let err = r - pred;
            if !err.is_finite() {
                return Err(Error::Train(format!(
                    "mf diverged at epoch {}; try a smaller learning rate",
                    epoch
                )));
            }
            model.user_bias[u] += lr * (err - reg * model.user_bias[u]);
            model.item_bias[i] += lr * (err - reg * model.item_bias[i]);
            for d in 0..config.dim {
                let pu = model.user_factors[u][d];
                let qi = model.item_factors[i][d];
                model.user_factors[u][d] += lr * (err * qi - reg * pu);
                model.item_factors[i][d] += lr * (err * pu - reg * qi);
            }
        }
        let monitored = if monitor_own {
            rmse_on(&model, train)
        } else {
            rmse_on(&model, valid.unwrap())
        };
        if !monitored.is_finite() {
            return Err(Error::Train(format!(
                "mf diverged at epoch {}; try a smaller learning rate",
                epoch
            )));
        }
        if monitored + 1e-6 < best_rmse {
            best_rmse = monitored;
            best = Some(model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                log::debug!("mf early stop after epoch {} (best rmse {:.4})", epoch, best_rmse);
                break;
            }
        }
    }
    Ok(best.unwrap_or(model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_corpus(c: f64) -> Vec<RatingExample> {
        let mut data = Vec::new();
        for u in 0..12 {
            for i in 0..8 {
                data.push((format!("u{}", u), format!("i{}", i), c));
            }
        }
        data
    }

    #[test]
    fn constant_corpus_predicts_the_constant() {
        let data = constant_corpus(7.0);
        let model = train_mf(&data, (1.0, 10.0), &TrainConfig::default(), None).unwrap();
        for (u, i, _) in &data {
            assert!((model.predict(u, i) - 7.0).abs() < 0.05);
        }
    }

    #[test]
    fn unknown_entities_degrade_gracefully() {
        let data = constant_corpus(4.0);
        let model = train_mf(&data, (1.0, 10.0), &TrainConfig::default(), None).unwrap();
        // Unknown user, known item → global + item bias, near 4.
        assert!((model.predict("ghost", "i0") - 4.0).abs() < 0.1);
        // Both unknown → global mean.
        assert!((model.predict("ghost", "phantom") - 4.0).abs() < 1e-9);
    }

    #[test]
    fn predictions_respect_clamp() {
        let mut data = constant_corpus(9.5);
        data.push(("u0".to_string(), "i0x".to_string(), 10.0));
        let model = train_mf(&data, (1.0, 10.0), &TrainConfig::default(), None).unwrap();
        for u in 0..12 {
            for i in 0..8 {
                let p = model.predict(&format!("u{}", u), &format!("i{}", i));
                assert!((1.0..=10.0).contains(&p));
            }
        }
    }

    #[test]
    fn empty_train_errors() {
        assert!(train_mf(&[], (1.0, 10.0), &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn divergent_learning_rate_reports_training_error() {
        let mut data = Vec::new();
        for u in 0..10 {
            for i in 0..10 {
                data.push((format!("u{}", u), format!("i{}", i), ((u * i) % 10) as f64));
            }
        }
        let config = TrainConfig {
            learning_rate: 50.0,
            epochs: 50,
            ..TrainConfig::default()
        };
        match train_mf(&data, (f64::MIN, f64::MAX), &config, None) {
            Err(Error::Train(msg)) => assert!(msg.contains("smaller learning rate")),
            other => panic!("expected divergence, got {:?}", other.map(|m| m.dim())),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = constant_corpus(5.0);
        let model = train_mf(&data, (1.0, 10.0), &TrainConfig::default(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mf.json");
        model.save(&p).unwrap();
        let loaded = MfModel::load(&p).unwrap();
        assert_eq!(loaded.predict("u0", "i0"), model.predict("u0", "i0"));
    }

    #[test]
    fn seeded_training_reproduces_exactly() {
        let data = constant_corpus(3.0);
        let a = train_mf(&data, (1.0, 10.0), &TrainConfig::default(), None).unwrap();
        let b = train_mf(&data, (1.0, 10.0), &TrainConfig::default(), None).unwrap();
        assert_eq!(
            super::super::params_fingerprint(&a).unwrap(),
            super::super::params_fingerprint(&b).unwrap()
        );
    }
}
