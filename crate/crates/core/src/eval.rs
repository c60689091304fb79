//! Metrics and evaluation protocols.
//!
//! Rating prediction is scored with RMSE/MAE, pooled and broken down
//! by how much train history each test user has (warm / cold /
//! unseen). Ranking is scored with binary-relevance Recall@k and
//! NDCG@k over a balanced testbed that holds out half of each user's
//! most highly preferred items.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{Corpus, Review, ReviewId, SubsetTag};
use crate::util::sha256_hex;
use crate::{Error, Result};

/// Root mean squared error over (predicted, actual) pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Eval("rmse of an empty pair set".to_string()));
    }
    let sse: f64 = pairs.iter().map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sse / pairs.len() as f64).sqrt())
}

/// Mean absolute error over (predicted, actual) pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Eval("mae of an empty pair set".to_string()));
    }
    let sae: f64 = pairs.iter().map(|(p, a)| (p - a).abs()).sum();
    Ok(sae / pairs.len() as f64)
}

/// Fraction of the relevant set found in the top k. An empty relevant
/// set scores 0 with a warning (the ratio is undefined).
pub fn recall_at_k(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    debug_assert!(k >= 1);
    if relevant.is_empty() {
        log::warn!("recall@{}: empty relevant set scores 0", k);
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.contains(*i))
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG: gains 1/log2(rank+1) with ranks from 1,
/// normalized by the ideal ordering of min(|relevant|, k) items.
pub fn ndcg_at_k(ranked: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    debug_assert!(k >= 1);
    if relevant.is_empty() {
        log::warn!("ndcg@{}: empty relevant set scores 0", k);
        return 0.0;
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| relevant.contains(*item))
        .map(|(idx, _)| gain(idx + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(k)).map(gain).sum();
    // An empty float sum is -0.0; keep zero scores positively signed
    // so they serialize as "0" rather than "-0.0".
    if dcg == 0.0 {
        return 0.0;
    }
    dcg / ideal
}

/// One scored cell of the evaluation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub support: usize,
    pub subset: String,
    pub config_digest: String,
}

/// Rating-evaluation output: reports plus coverage bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingEvalOutcome {
    pub reports: Vec<MetricReport>,
    /// Test reviews that had no prediction.
    pub missing: Vec<ReviewId>,
    /// Fraction of test reviews covered by predictions.
    pub coverage: f64,
    pub warnings: Vec<String>,
}

fn subset_label(tag: SubsetTag) -> &'static str {
    match tag {
        SubsetTag::Warm => "warm",
        SubsetTag::Cold => "cold",
        SubsetTag::Unseen => "unseen",
    }
}

/// RMSE/MAE over the test split, pooled ("total") and per subset tag.
/// Predictions are keyed by test review id. Coverage below the
/// threshold raises a warning; zero-member subsets are omitted with a
/// note rather than reported as empty rows.
pub fn evaluate_rating(
    predicted: &BTreeMap<ReviewId, f64>,
    test: &[&Review],
    tags: &BTreeMap<ReviewId, SubsetTag>,
    config_digest: &str,
    coverage_threshold: f64,
) -> Result<RatingEvalOutcome> {
    if test.is_empty() {
        return Err(Error::Eval("empty test set".to_string()));
    }
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let mut by_subset: BTreeMap<&'static str, Vec<(f64, f64)>> = BTreeMap::new();
    let mut missing = Vec::new();
    for review in test {
        let tag = *tags.get(&review.id).ok_or_else(|| {
            Error::Eval(format!("test review {} has no subset tag", review.id))
        })?;
        let Some(&prediction) = predicted.get(&review.id) else {
            missing.push(review.id);
            continue;
        };
        let pair = (prediction, review.rating as f64);
        pooled.push(pair);
        by_subset.entry(subset_label(tag)).or_default().push(pair);
    }
    let coverage = pooled.len() as f64 / test.len() as f64;
    let mut warnings = Vec::new();
    if coverage < coverage_threshold {
        let warning = format!(
            "prediction coverage {:.1}% below threshold {:.1}% ({} of {} test reviews missing)",
            coverage * 100.0,
            coverage_threshold * 100.0,
            missing.len(),
            test.len()
        );
        log::warn!("{}", warning);
        warnings.push(warning);
    }
    if pooled.is_empty() {
        return Err(Error::Eval(
            "no test review had a prediction; nothing to score".to_string(),
        ));
    }

    let mut reports = Vec::new();
    let mut push_rows = |subset: &str, pairs: &[(f64, f64)]| -> Result<()> {
        reports.push(MetricReport {
            metric: "rmse".to_string(),
            value: rmse(pairs)?,
            support: pairs.len(),
            subset: subset.to_string(),
            config_digest: config_digest.to_string(),
        });
        reports.push(MetricReport {
            metric: "mae".to_string(),
            value: mae(pairs)?,
            support: pairs.len(),
            subset: subset.to_string(),
            config_digest: config_digest.to_string(),
        });
        Ok(())
    };
    push_rows("total", &pooled)?;
    for tag in [SubsetTag::Warm, SubsetTag::Cold, SubsetTag::Unseen] {
        let label = subset_label(tag);
        match by_subset.get(label) {
            Some(pairs) => push_rows(label, pairs)?,
            None => {
                let note = format!("subset {:?} has zero members; omitted", label);
                log::info!("{}", note);
                warnings.push(note);
            }
        }
    }
    Ok(RatingEvalOutcome {
        reports,
        missing,
        coverage,
        warnings,
    })
}

/// The balanced top-k evaluation testbed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopkTestbed {
    /// Review ids kept for training (ratings ≥ 6, plus the train half
    /// of the highly preferred interactions).
    pub train: Vec<ReviewId>,
    /// Held-out highly preferred review ids.
    pub test: Vec<ReviewId>,
    /// Per-user relevance: the items of their held-out reviews.
    pub relevant: BTreeMap<String, BTreeSet<String>>,
}

/// Builds the balanced testbed: keep interactions rated ≥ 6; mark 9–10
/// as highly preferred and split them evenly per user between train
/// and test (seeded; an odd count leaves the extra one in train). Test
/// relevance is exactly the held-out highly preferred items.
pub fn build_balanced_topk_testbed(corpus: &Corpus, seed: u64) -> Result<TopkTestbed> {
    let scale = corpus.scale();
    if scale.max < 9 {
        return Err(Error::Eval(format!(
            "balanced top-k protocol needs ratings 9-10 on the scale; max is {}",
            scale.max
        )));
    }
    let mut train: Vec<ReviewId> = Vec::new();
    let mut highly: BTreeMap<&str, Vec<&Review>> = BTreeMap::new();
    for review in corpus.reviews() {
        if review.rating < 6 {
            continue;
        }
        if review.rating >= 9 {
            highly.entry(review.user_id.as_str()).or_default().push(review);
        } else {
            train.push(review.id);
        }
    }
    let mut test = Vec::new();
    let mut relevant: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (user, mut reviews) in highly {
        reviews.sort_by_key(|r| r.id);
        // Per-user rng: stable no matter how other users change.
        let mut user_seed = [0u8; 8];
        user_seed.copy_from_slice(&hex::decode(&sha256_hex(user.as_bytes())[..16]).unwrap());
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ u64::from_be_bytes(user_seed));
        reviews.shuffle(&mut rng);
        let test_half = reviews.len() / 2; // odd count → extra stays in train
        for (idx, review) in reviews.iter().enumerate() {
            if idx < test_half {
                test.push(review.id);
                relevant
                    .entry(user.to_string())
                    .or_default()
                    .insert(review.item_id.clone());
            } else {
                train.push(review.id);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(TopkTestbed {
        train,
        test,
        relevant,
    })
}
