//! Review corpus: domain types, preprocessing, and train-time bias
//! signals.
//!
//! A [`Corpus`] is an immutable set of rated reviews plus an item
//! metadata side table. Construction validates every invariant once;
//! afterwards the corpus is safely shareable for concurrent reads.
//! Preprocessing consists of k-core filtering ([`kcore_filter`]) and a
//! global chronological split ([`temporal_split`]), after which test
//! reviews are tagged by how much training history their user has
//! ([`tag_test_subsets`]).

mod ingest;
mod kcore;
mod split;

pub use ingest::{ingest, IngestOutcome, IngestSource, RecordIssue, SourceFormat};
pub use kcore::kcore_filter;
pub use split::{largest_remainder_sizes, temporal_split};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::scale::RatingScale;
use crate::util::{canonical_json, sha256_hex};
use crate::{Error, Result};

/// Stable review identifier. Ingest assigns the 1-based source line
/// number; synthetic corpora assign their own unique ids.
pub type ReviewId = u64;

/// One rated review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub id: ReviewId,
    pub user_id: String,
    pub item_id: String,
    pub rating: i64,
    pub text: String,
    pub timestamp: i64,
    pub helpful_votes: u64,
}

/// Objective item metadata (title, description, free-form attributes).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// An immutable, validated review corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    reviews: Vec<Review>,
    items: BTreeMap<String, ItemMeta>,
    scale: RatingScale,
}

impl Corpus {
    /// Builds a corpus from parts, validating every invariant: unique
    /// review ids, ratings on scale, non-negative timestamps, and no
    /// duplicate (user, item, timestamp) triples. Reviews are kept
    /// sorted by id.
    pub fn from_parts(
        mut reviews: Vec<Review>,
        items: BTreeMap<String, ItemMeta>,
        scale: RatingScale,
    ) -> Result<Corpus> {
        scale.validate()?;
        reviews.sort_by_key(|r| r.id);
        for w in reviews.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Config(format!("duplicate review id {}", w[0].id)));
            }
        }
        let mut triples = BTreeSet::new();
        for r in &reviews {
            if !scale.contains(r.rating) {
                return Err(Error::Config(format!(
                    "review {}: rating {} outside scale {}..={}",
                    r.id, r.rating, scale.min, scale.max
                )));
            }
            if r.timestamp < 0 {
                return Err(Error::Config(format!(
                    "review {}: negative timestamp {}",
                    r.id, r.timestamp
                )));
            }
            if !triples.insert((r.user_id.clone(), r.item_id.clone(), r.timestamp)) {
                return Err(Error::Config(format!(
                    "review {}: duplicate interaction ({}, {}, {})",
                    r.id, r.user_id, r.item_id, r.timestamp
                )));
            }
        }
        for (key, meta) in &items {
            if key != &meta.item_id {
                return Err(Error::Config(format!(
                    "item metadata key {:?} does not match item_id {:?}",
                    key, meta.item_id
                )));
            }
        }
        Ok(Corpus {
            reviews,
            items,
            scale,
        })
    }

    pub fn reviews(&self) -> &[Review] {
        &self.reviews
    }

    pub fn items(&self) -> &BTreeMap<String, ItemMeta> {
        &self.items
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    /// Looks a review up by id. Reviews are sorted by id, so this is a
    /// binary search.
    pub fn review(&self, id: ReviewId) -> Option<&Review> {
        self.reviews
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.reviews[i])
    }

    pub fn item(&self, item_id: &str) -> Option<&ItemMeta> {
        self.items.get(item_id)
    }

    /// Distinct user ids, ascending.
    pub fn user_ids(&self) -> Vec<&str> {
        let ids: BTreeSet<&str> = self.reviews.iter().map(|r| r.user_id.as_str()).collect();
        ids.into_iter().collect()
    }

    /// Distinct item ids appearing in reviews, ascending.
    pub fn interacted_item_ids(&self) -> Vec<&str> {
        let ids: BTreeSet<&str> = self.reviews.iter().map(|r| r.item_id.as_str()).collect();
        ids.into_iter().collect()
    }

    /// Content digest over the canonical serialization; stable across
    /// runs for manifest chaining.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(canonical_json(self)?.as_bytes()))
    }

    /// Re-runs `from_parts` validation, for corpora loaded from disk.
    pub fn verify(&self) -> Result<()> {
        Corpus::from_parts(self.reviews.clone(), self.items.clone(), self.scale).map(|_| ())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        crate::util::write_atomic(path, body.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Corpus> {
        let corpus: Corpus = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        corpus.verify()?;
        Ok(corpus)
    }
}

/// Review-id partition produced by [`temporal_split`]. Ids within each
/// partition are listed in chronological (sort-key) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<ReviewId>,
    pub valid: Vec<ReviewId>,
    pub test: Vec<ReviewId>,
    pub ratios: [f64; 3],
}

impl SplitAssignment {
    /// Checks the partition covers the corpus exactly once.
    pub fn verify(&self, corpus: &Corpus) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self
            .train
            .iter()
            .chain(self.valid.iter())
            .chain(self.test.iter())
        {
            if !seen.insert(*id) {
                return Err(Error::Config(format!(
                    "split assigns review {} to more than one partition",
                    id
                )));
            }
            if corpus.review(*id).is_none() {
                return Err(Error::Config(format!(
                    "split references unknown review {}",
                    id
                )));
            }
        }
        if seen.len() != corpus.len() {
            return Err(Error::Config(format!(
                "split covers {} of {} reviews",
                seen.len(),
                corpus.len()
            )));
        }
        Ok(())
    }

    /// Train reviews resolved against the corpus, in split order.
    pub fn train_reviews<'c>(&self, corpus: &'c Corpus) -> Vec<&'c Review> {
        self.resolve(&self.train, corpus)
    }

    pub fn valid_reviews<'c>(&self, corpus: &'c Corpus) -> Vec<&'c Review> {
        self.resolve(&self.valid, corpus)
    }

    pub fn test_reviews<'c>(&self, corpus: &'c Corpus) -> Vec<&'c Review> {
        self.resolve(&self.test, corpus)
    }

    fn resolve<'c>(&self, ids: &[ReviewId], corpus: &'c Corpus) -> Vec<&'c Review> {
        ids.iter().filter_map(|id| corpus.review(*id)).collect()
    }
}

/// How much training history a test review's user has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetTag {
    /// User has more than three train interactions.
    Warm,
    /// User appears in train with one to three interactions.
    Cold,
    /// User is absent from train.
    Unseen,
}

/// Tags every test review warm/cold/unseen by its user's train count.
pub fn tag_test_subsets(
    split: &SplitAssignment,
    corpus: &Corpus,
) -> BTreeMap<ReviewId, SubsetTag> {
    let mut train_count: BTreeMap<&str, usize> = BTreeMap::new();
    for r in split.train_reviews(corpus) {
        *train_count.entry(r.user_id.as_str()).or_insert(0) += 1;
    }
    let mut tags = BTreeMap::new();
    for r in split.test_reviews(corpus) {
        let tag = match train_count.get(r.user_id.as_str()).copied().unwrap_or(0) {
            0 => SubsetTag::Unseen,
            n if n > 3 => SubsetTag::Warm,
            _ => SubsetTag::Cold,
        };
        tags.insert(r.id, tag);
    }
    tags
}

/// Per-user and per-item mean ratings over the train partition, with a
/// global-mean fallback for entities unseen in train.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasMeans {
    pub user: BTreeMap<String, f64>,
    pub item: BTreeMap<String, f64>,
    pub global: f64,
}

impl BiasMeans {
    pub fn user_mean(&self, user_id: &str) -> f64 {
        self.user.get(user_id).copied().unwrap_or(self.global)
    }

    pub fn item_mean(&self, item_id: &str) -> f64 {
        self.item.get(item_id).copied().unwrap_or(self.global)
    }
}

/// Computes train-only rating means. Errors on an empty train set.
pub fn bias_means<'a, I>(train: I) -> Result<BiasMeans>
where
    I: IntoIterator<Item = &'a Review>,
{
    let mut user_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut item_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    let mut n = 0usize;
    for r in train {
        let e = user_sum.entry(r.user_id.clone()).or_insert((0.0, 0));
        e.0 += r.rating as f64;
        e.1 += 1;
        let e = item_sum.entry(r.item_id.clone()).or_insert((0.0, 0));
        e.0 += r.rating as f64;
        e.1 += 1;
        total += r.rating as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(
            "bias means require a non-empty train partition".to_string(),
        ));
    }
    Ok(BiasMeans {
        user: user_sum
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect(),
        item: item_sum
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect(),
        global: total / n as f64,
    })
}

#[cfg(test)]
pub(crate) fn review(
    id: ReviewId,
    user: &str,
    item: &str,
    rating: i64,
    timestamp: i64,
) -> Review {
    Review {
        id,
        user_id: user.to_string(),
        item_id: item.to_string(),
        rating,
        text: format!("review {} of {} by {}", id, item, user),
        timestamp,
        helpful_votes: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(reviews: Vec<Review>) -> Corpus {
        Corpus::from_parts(reviews, BTreeMap::new(), RatingScale::one_to_ten()).unwrap()
    }

    #[test]
    fn from_parts_rejects_duplicate_ids() {
        let err = Corpus::from_parts(
            vec![review(1, "u", "i", 5, 0), review(1, "u", "j", 5, 1)],
            BTreeMap::new(),
            RatingScale::one_to_ten(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate review id"));
    }

    #[test]
    fn from_parts_rejects_duplicate_triples() {
        let err = Corpus::from_parts(
            vec![review(1, "u", "i", 5, 7), review(2, "u", "i", 6, 7)],
            BTreeMap::new(),
            RatingScale::one_to_ten(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate interaction"));
    }

    #[test]
    fn from_parts_rejects_off_scale_rating() {
        let err = Corpus::from_parts(
            vec![review(1, "u", "i", 11, 0)],
            BTreeMap::new(),
            RatingScale::one_to_ten(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("outside scale"));
    }

    #[test]
    fn review_lookup_is_by_id() {
        let c = corpus(vec![
            review(5, "a", "x", 3, 10),
            review(2, "b", "y", 4, 11),
            review(9, "c", "z", 5, 12),
        ]);
        assert_eq!(c.review(2).unwrap().user_id, "b");
        assert_eq!(c.review(9).unwrap().item_id, "z");
        assert!(c.review(3).is_none());
    }

    #[test]
    fn tagging_boundaries() {
        // User "warm" has 4 train reviews, "cold3" exactly 3, "cold1"
        // one, "ghost" none.
        let mut reviews = Vec::new();
        let mut id = 1;
        for t in 0..4 {
            reviews.push(review(id, "warm", &format!("i{}", t), 5, t));
            id += 1;
        }
        for t in 0..3 {
            reviews.push(review(id, "cold3", &format!("j{}", t), 5, t));
            id += 1;
        }
        reviews.push(review(id, "cold1", "k0", 5, 0));
        id += 1;
        let train_ids: Vec<ReviewId> = reviews.iter().map(|r| r.id).collect();
        // Test reviews at later timestamps.
        let t_warm = review(id, "warm", "t1", 6, 100);
        let t_cold3 = review(id + 1, "cold3", "t2", 6, 101);
        let t_cold1 = review(id + 2, "cold1", "t3", 6, 102);
        let t_ghost = review(id + 3, "ghost", "t4", 6, 103);
        let test_ids = vec![t_warm.id, t_cold3.id, t_cold1.id, t_ghost.id];
        reviews.extend([t_warm, t_cold3, t_cold1, t_ghost]);
        let c = corpus(reviews);
        let split = SplitAssignment {
            train: train_ids,
            valid: vec![],
            test: test_ids.clone(),
            ratios: [8.0, 1.0, 1.0],
        };
        let tags = tag_test_subsets(&split, &c);
        assert_eq!(tags[&test_ids[0]], SubsetTag::Warm);
        assert_eq!(tags[&test_ids[1]], SubsetTag::Cold);
        assert_eq!(tags[&test_ids[2]], SubsetTag::Cold);
        assert_eq!(tags[&test_ids[3]], SubsetTag::Unseen);
        assert_eq!(tags.len(), 4);
    }

    #[test]
    fn bias_means_examples() {
        let train = vec![
            review(1, "solo", "a", 7, 0),
            review(2, "trio", "b", 1, 1),
            review(3, "trio", "c", 2, 2),
            review(4, "trio", "d", 3, 3),
        ];
        let bm = bias_means(&train).unwrap();
        assert_eq!(bm.user_mean("solo"), 7.0);
        assert_eq!(bm.user_mean("trio"), 2.0);
        let global = (7.0 + 1.0 + 2.0 + 3.0) / 4.0;
        assert_eq!(bm.global, global);
        assert_eq!(bm.user_mean("nobody"), global);
        assert_eq!(bm.item_mean("a"), 7.0);
        assert_eq!(bm.item_mean("missing"), global);
    }

    #[test]
    fn bias_means_empty_train_is_an_error() {
        assert!(bias_means(&[]).is_err());
    }

    #[test]
    fn bias_means_ignores_non_train_reviews() {
        let train = vec![review(1, "u", "a", 4, 0), review(2, "u", "b", 6, 1)];
        let bm1 = bias_means(&train).unwrap();
        // Extending the corpus with valid/test reviews must not matter
        // because only the train slice is passed in.
        let bm2 = bias_means(train.iter()).unwrap();
        assert_eq!(bm1.user_mean("u"), 5.0);
        assert_eq!(bm1.user_mean("u"), bm2.user_mean("u"));
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let c1 = corpus(vec![review(1, "u", "i", 5, 0)]);
        let c2 = corpus(vec![review(1, "u", "i", 5, 0)]);
        let c3 = corpus(vec![review(1, "u", "i", 6, 0)]);
        assert_eq!(c1.digest().unwrap(), c2.digest().unwrap());
        assert_ne!(c1.digest().unwrap(), c3.digest().unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(vec![review(1, "u", "i", 5, 0), review(2, "v", "i", 8, 1)]);
        let p = dir.path().join("corpus.json");
        c.save(&p).unwrap();
        let loaded = Corpus::load(&p).unwrap();
        assert_eq!(loaded.digest().unwrap(), c.digest().unwrap());
    }
}
