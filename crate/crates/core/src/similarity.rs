//! User-user adjusted-cosine similarity and top-k neighbor retrieval.
//!
//! Ratings are mean-centered per user over that user's observed entries
//! only; similarity between two users is the cosine of their centered
//! vectors restricted to co-rated items. Degenerate pairs (no co-rated
//! items, or a zero norm over them) score 0 so rankings stay total.
//! Pairs are computed lazily with a bounded, symmetric memo cache
//! rather than materializing the full user×user matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

use crate::corpus::Review;

/// Most pair scores ever memoized; further pairs are computed but not
/// stored.
const MEMO_CAP: usize = 262_144;

/// Sparse user×item matrix of observed train ratings. Repeated
/// (user, item) interactions at different timestamps are averaged into
/// one cell.
#[derive(Debug, Clone)]
pub struct RatingMatrix {
    by_user: BTreeMap<String, BTreeMap<String, f64>>,
    raters_by_item: BTreeMap<String, BTreeSet<String>>,
}

impl RatingMatrix {
    pub fn from_reviews<'a, I>(reviews: I) -> RatingMatrix
    where
        I: IntoIterator<Item = &'a Review>,
    {
        let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
        for r in reviews {
            let cell = sums
                .entry(r.user_id.clone())
                .or_default()
                .entry(r.item_id.clone())
                .or_insert((0.0, 0));
            cell.0 += r.rating as f64;
            cell.1 += 1;
        }
        let mut by_user: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut raters_by_item: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (user, items) in sums {
            for (item, (sum, n)) in items {
                raters_by_item
                    .entry(item.clone())
                    .or_default()
                    .insert(user.clone());
                by_user.entry(user.clone()).or_default().insert(item, sum / n as f64);
            }
        }
        RatingMatrix {
            by_user,
            raters_by_item,
        }
    }

    pub fn user_ratings(&self, user: &str) -> Option<&BTreeMap<String, f64>> {
        self.by_user.get(user)
    }

    pub fn user_mean(&self, user: &str) -> Option<f64> {
        self.by_user.get(user).map(|items| {
            items.values().sum::<f64>() / items.len() as f64
        })
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }
}

/// Mean-centered view: R'_ui = R_ui − μ_u over observed entries only.
/// Unobserved entries stay absent — they never become −μ_u.
pub struct CenteredMatrix {
    by_user: BTreeMap<String, BTreeMap<String, f64>>,
    raters_by_item: BTreeMap<String, BTreeSet<String>>,
    memo: Mutex<HashMap<(String, String), f64>>,
}

pub fn mean_center(matrix: &RatingMatrix) -> CenteredMatrix {
    let mut by_user = BTreeMap::new();
    for (user, items) in &matrix.by_user {
        let mean = items.values().sum::<f64>() / items.len() as f64;
        by_user.insert(
            user.clone(),
            items
                .iter()
                .map(|(item, r)| (item.clone(), r - mean))
                .collect(),
        );
    }
    CenteredMatrix {
        by_user,
        raters_by_item: matrix.raters_by_item.clone(),
        memo: Mutex::new(HashMap::new()),
    }
}

impl CenteredMatrix {
    pub fn centered_ratings(&self, user: &str) -> Option<&BTreeMap<String, f64>> {
        self.by_user.get(user)
    }

    /// Users with an observed rating on `item`, ascending.
    pub fn raters_of(&self, item: &str) -> impl Iterator<Item = &str> {
        self.raters_by_item
            .get(item)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    /// Adjusted cosine over co-rated items; 0 for degenerate pairs.
    pub fn adjusted_cosine(&self, u: &str, v: &str) -> f64 {
        let key = if u <= v {
            (u.to_string(), v.to_string())
        } else {
            (v.to_string(), u.to_string())
        };
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&key) {
            return *hit;
        }
        let score = self.compute(u, v);
        let mut memo = self.memo.lock().expect("memo lock");
        if memo.len() < MEMO_CAP {
            memo.insert(key, score);
        }
        score
    }

    fn compute(&self, u: &str, v: &str) -> f64 {
        let (Some(ru), Some(rv)) = (self.by_user.get(u), self.by_user.get(v)) else {
            return 0.0;
        };
        // Iterate the smaller vector against the larger.
        let (small, large) = if ru.len() <= rv.len() { (ru, rv) } else { (rv, ru) };
        let mut dot = 0.0;
        let mut norm_small = 0.0;
        let mut norm_large = 0.0;
        for (item, a) in small {
            if let Some(b) = large.get(item) {
                dot += a * b;
                norm_small += a * a;
                norm_large += b * b;
            }
        }
        if norm_small == 0.0 || norm_large == 0.0 {
            return 0.0;
        }
        dot / (norm_small.sqrt() * norm_large.sqrt())
    }
}

/// Neighbors for one (target user, target item) query.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborResult {
    pub target_user: String,
    pub target_item: String,
    /// (user_id, similarity), non-increasing by score, ties by user_id.
    pub neighbors: Vec<(String, f64)>,
}

/// The k most similar other users who rated the target item. Empty when
/// nobody else rated it; callers fall back to the all-reviews strategy.
pub fn top_k_neighbors(
    centered: &CenteredMatrix,
    target_user: &str,
    target_item: &str,
    k: usize,
) -> NeighborResult {
    let mut scored: Vec<(String, f64)> = centered
        .raters_of(target_item)
        .filter(|candidate| *candidate != target_user)
        .map(|candidate| {
            (
                candidate.to_string(),
                centered.adjusted_cosine(target_user, candidate),
            )
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("similarity scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    NeighborResult {
        target_user: target_user.to_string(),
        target_item: target_item.to_string(),
        neighbors: scored,
    }
}
