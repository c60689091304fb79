//! Multi-stage top-k ranking.
//!
//! A fast candidate generator proposes an n-item shortlist per user;
//! the expensive expected-rating predictor then reranks the shortlist
//! and the result is truncated to k. Prediction failures demote items
//! to the tail instead of aborting the user, and per-stage wall-clock
//! totals are collected for an informational timing report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use crate::cf::{generate_candidates, BprModel, CandidateList};
use crate::{Error, Result};

/// Source of expected ratings for (user, item) pairs.
pub trait RatingPredictor: Sync {
    fn expected_rating(&self, user: &str, item: &str) -> Result<f64>;
}

impl<F> RatingPredictor for F
where
    F: Fn(&str, &str) -> Result<f64> + Sync,
{
    fn expected_rating(&self, user: &str, item: &str) -> Result<f64> {
        self(user, item)
    }
}

/// Source of per-user candidate shortlists.
pub trait CandidateGenerator: Sync {
    fn id(&self) -> &str;
    /// Up to `n` candidates, or `None` when the generator cannot serve
    /// the user at all.
    fn candidates(&self, user: &str, n: usize) -> Option<CandidateList>;
}

/// Candidates scored by a trained implicit-feedback model, excluding
/// each user's train-time items.
pub struct ModelGenerator<'a> {
    pub model: &'a BprModel,
    pub train_seen: &'a BTreeMap<String, BTreeSet<String>>,
}

impl CandidateGenerator for ModelGenerator<'_> {
    fn id(&self) -> &str {
        "bpr"
    }

    fn candidates(&self, user: &str, n: usize) -> Option<CandidateList> {
        static EMPTY: std::sync::LazyLock<BTreeSet<String>> =
            std::sync::LazyLock::new(BTreeSet::new);
        let seen = self.train_seen.get(user).unwrap_or(&EMPTY);
        Some(generate_candidates(self.model, user, n, seen))
    }
}

/// Candidates supplied by an external file, keyed by user.
pub struct ExternalGenerator {
    pub name: String,
    pub lists: BTreeMap<String, CandidateList>,
}

impl CandidateGenerator for ExternalGenerator {
    fn id(&self) -> &str {
        &self.name
    }

    fn candidates(&self, user: &str, n: usize) -> Option<CandidateList> {
        let mut list = self.lists.get(user)?.clone();
        if list.items.len() > n {
            list.items.truncate(n);
        }
        list.short = list.items.len() < n;
        Some(list)
    }
}

/// One item after reranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: String,
    /// Absent when the prediction for this item failed.
    pub expected_rating: Option<f64>,
    /// 1-based position in the generator's shortlist.
    pub generator_rank: usize,
    /// 1-based position after reranking.
    pub final_rank: usize,
    pub failed: bool,
}

/// A user's reranked (and possibly truncated) list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: String,
    pub generator: String,
    pub items: Vec<RankedItem>,
    /// Target list length; `items` holds at most this many after
    /// truncation.
    pub k: usize,
}

impl RankedList {
    /// Keeps the first `k` items. Ranks are already final, so cutting
    /// the tail never re-orders (truncation consistency).
    pub fn truncate_to(&mut self, k: usize) {
        self.k = k;
        self.items.truncate(k);
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.item_id.as_str())
    }
}

/// Reranks a candidate shortlist by predicted expected rating,
/// descending, ties by generator rank. Failed predictions sink to the
/// tail, flagged; an all-failed list is an error for the user.
pub fn rerank(candidates: &CandidateList, predictor: &dyn RatingPredictor) -> Result<RankedList> {
    if candidates.items.is_empty() {
        return Err(Error::Pipeline(format!(
            "rerank: user {:?} has no candidates",
            candidates.user_id
        )));
    }
    let mut items: Vec<RankedItem> = Vec::with_capacity(candidates.items.len());
    let mut first_error: Option<Error> = None;
    for (idx, (item_id, _generator_score)) in candidates.items.iter().enumerate() {
        match predictor.expected_rating(&candidates.user_id, item_id) {
            Ok(v) => items.push(RankedItem {
                item_id: item_id.clone(),
                expected_rating: Some(v),
                generator_rank: idx + 1,
                final_rank: 0,
                failed: false,
            }),
            Err(e) => {
                log::warn!("prediction failed during rerank: {}", e);
                if first_error.is_none() {
                    first_error = Some(e);
                }
                items.push(RankedItem {
                    item_id: item_id.clone(),
                    expected_rating: None,
                    generator_rank: idx + 1,
                    final_rank: 0,
                    failed: true,
                });
            }
        }
    }
    if items.iter().all(|i| i.failed) {
        return Err(Error::Pipeline(format!(
            "rerank: every prediction failed for user {:?} ({})",
            candidates.user_id,
            first_error.expect("non-empty candidate list")
        )));
    }
    items.sort_by(|a, b| match (a.failed, b.failed) {
        (false, false) => b
            .expected_rating
            .unwrap()
            .total_cmp(&a.expected_rating.unwrap())
            .then(a.generator_rank.cmp(&b.generator_rank)),
        (true, true) => a.generator_rank.cmp(&b.generator_rank),
        (a_failed, b_failed) => a_failed.cmp(&b_failed),
    });
    for (idx, item) in items.iter_mut().enumerate() {
        item.final_rank = idx + 1;
    }
    Ok(RankedList {
        user_id: candidates.user_id.clone(),
        generator: candidates.generator.clone(),
        k: items.len(),
        items,
    })
}

/// Wall-clock totals for one ranking run, in milliseconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub generate_ms: u128,
    pub rerank_ms: u128,
    pub users: usize,
    pub predictions: usize,
    pub failed_predictions: usize,
}

/// Output of a full ranking run.
#[derive(Debug)]
pub struct RankingOutcome {
    pub lists: BTreeMap<String, RankedList>,
    /// Users that produced no list, with the reason.
    pub skipped: Vec<(String, String)>,
    pub timing: TimingReport,
}

/// Generates `n` candidates per user, reranks, truncates to `k`.
/// Per-user failures are recorded and the run continues. `workers`
/// bounds rerank parallelism; 1 (the default elsewhere) is fully
/// sequential and deterministic.
pub fn run_ranking(
    generator: &dyn CandidateGenerator,
    users: &[String],
    n: usize,
    k: usize,
    predictor: &dyn RatingPredictor,
    workers: usize,
) -> Result<RankingOutcome> {
    if k > n {
        return Err(Error::Config(format!(
            "ranking: k ({}) exceeds candidate count n ({})",
            k, n
        )));
    }
    let started = Instant::now();
    let mut shortlists: Vec<(String, CandidateList)> = Vec::new();
    let mut skipped: Vec<(String, String)> = Vec::new();
    for user in users {
        match generator.candidates(user, n) {
            Some(list) if !list.items.is_empty() => {
                if list.short {
                    log::debug!(
                        "generator {:?} returned {} < {} candidates for {:?}",
                        generator.id(),
                        list.items.len(),
                        n,
                        user
                    );
                }
                shortlists.push((user.clone(), list));
            }
            Some(_) => skipped.push((user.clone(), "empty candidate list".to_string())),
            None => skipped.push((user.clone(), "generator cannot serve user".to_string())),
        }
    }
    let generate_ms = started.elapsed().as_millis();

    let rerank_started = Instant::now();
    let reranked: Vec<(String, Result<RankedList>)> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Pipeline(format!("ranking thread pool: {}", e)))?;
        pool.install(|| {
            shortlists
                .par_iter()
                .map(|(user, list)| (user.clone(), rerank(list, predictor)))
                .collect()
        })
    } else {
        shortlists
            .iter()
            .map(|(user, list)| (user.clone(), rerank(list, predictor)))
            .collect()
    };
    let rerank_ms = rerank_started.elapsed().as_millis();

    let mut lists = BTreeMap::new();
    let mut predictions = 0;
    let mut failed_predictions = 0;
    for (user, outcome) in reranked {
        match outcome {
            Ok(mut list) => {
                predictions += list.items.len();
                failed_predictions += list.items.iter().filter(|i| i.failed).count();
                list.truncate_to(k);
                lists.insert(user, list);
            }
            Err(e) => skipped.push((user, e.to_string())),
        }
    }
    skipped.sort();
    Ok(RankingOutcome {
        lists,
        skipped,
        timing: TimingReport {
            generate_ms,
            rerank_ms,
            users: users.len(),
            predictions,
            failed_predictions,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn candidates(user: &str, items: &[(&str, f64)]) -> CandidateList {
        CandidateList {
            user_id: user.to_string(),
            items: items.iter().map(|(i, s)| (i.to_string(), *s)).collect(),
            generator: "test".to_string(),
            short: false,
        }
    }

    fn table_predictor(
        entries: &[(&str, f64)],
    ) -> impl Fn(&str, &str) -> Result<f64> + Sync {
        let map: BTreeMap<String, f64> =
            entries.iter().map(|(i, v)| (i.to_string(), *v)).collect();
        move |_user: &str, item: &str| {
            map.get(item)
                .copied()
                .ok_or_else(|| Error::Pipeline(format!("no prediction for {}", item)))
        }
    }

    #[test]
    fn singleton_keeps_rank_one() {
        let p = table_predictor(&[("a", 6.5)]);
        let out = rerank(&candidates("u", &[("a", 0.9)]), &p).unwrap();
        assert_eq!(out.items.len(), 1);
        assert_eq!(out.items[0].final_rank, 1);
        assert_eq!(out.items[0].generator_rank, 1);
    }

    #[test]
    fn sorts_descending_with_generator_rank_ties() {
        let p = table_predictor(&[("a", 7.2), ("b", 8.9), ("c", 7.2)]);
        let out = rerank(&candidates("u", &[("a", 0.9), ("b", 0.8), ("c", 0.7)]), &p).unwrap();
        let order: Vec<&str> = out.item_ids().collect();
        assert_eq!(order, vec!["b", "a", "c"], "tie between a and c keeps generator order");
        assert_eq!(
            out.items.iter().map(|i| i.final_rank).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn agreeing_predictor_makes_rerank_identity() {
        let p = table_predictor(&[("a", 9.0), ("b", 8.0), ("c", 7.0)]);
        let input = candidates("u", &[("a", 0.9), ("b", 0.8), ("c", 0.7)]);
        let out = rerank(&input, &p).unwrap();
        let order: Vec<&str> = out.item_ids().collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    #[test]
    fn output_is_a_permutation_of_input() {
        let p = table_predictor(&[("a", 3.0), ("b", 9.1), ("c", 1.2), ("d", 5.5), ("e", 5.5)]);
        let input = candidates("u", &[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6), ("e", 0.5)]);
        let out = rerank(&input, &p).unwrap();
        let mut got: Vec<&str> = out.item_ids().collect();
        got.sort();
        assert_eq!(got, vec!["a", "b", "c", "d", "e"]);
        // Final ranks contiguous from 1.
        for (idx, item) in out.items.iter().enumerate() {
            assert_eq!(item.final_rank, idx + 1);
        }
    }

    #[test]
    fn failures_sink_to_tail_flagged() {
        let p = table_predictor(&[("a", 3.0), ("c", 9.0)]); // b missing → fails
        let out = rerank(&candidates("u", &[("a", 0.9), ("b", 0.8), ("c", 0.7)]), &p).unwrap();
        let order: Vec<&str> = out.item_ids().collect();
        assert_eq!(order, vec!["c", "a", "b"]);
        assert!(out.items[2].failed);
        assert_eq!(out.items[2].expected_rating, None);
    }

    #[test]
    fn all_failures_is_an_error() {
        let p = table_predictor(&[]);
        let err = rerank(&candidates("u", &[("a", 0.9), ("b", 0.8)]), &p).unwrap_err();
        assert!(err.to_string().contains("every prediction failed"));
    }

    #[test]
    fn empty_candidates_is_an_error() {
        let p = table_predictor(&[("a", 1.0)]);
        assert!(rerank(&candidates("u", &[]), &p).is_err());
    }

    #[test]
    fn truncation_matches_prefix_of_full_rerank() {
        let p = table_predictor(&[("a", 3.0), ("b", 9.1), ("c", 1.2), ("d", 5.5)]);
        let input = candidates("u", &[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6)]);
        let full = rerank(&input, &p).unwrap();
        let mut truncated = rerank(&input, &p).unwrap();
        truncated.truncate_to(2);
        assert_eq!(truncated.items[..], full.items[..2]);
    }

    struct FixedGenerator(BTreeMap<String, CandidateList>);

    impl CandidateGenerator for FixedGenerator {
        fn id(&self) -> &str {
            "fixed"
        }
        fn candidates(&self, user: &str, _n: usize) -> Option<CandidateList> {
            self.0.get(user).cloned()
        }
    }

    #[test]
    fn run_matches_manual_composition_and_records_skips() {
        let mut lists = BTreeMap::new();
        lists.insert("u1".to_string(), candidates("u1", &[("a", 0.9), ("b", 0.8)]));
        lists.insert("u2".to_string(), candidates("u2", &[]));
        let generator = FixedGenerator(lists.clone());
        let p = table_predictor(&[("a", 2.0), ("b", 8.0)]);
        let users = vec!["u1".to_string(), "u2".to_string(), "u3".to_string()];
        let out = run_ranking(&generator, &users, 2, 1, &p, 1).unwrap();

        let manual = {
            let mut l = rerank(&lists["u1"], &p).unwrap();
            l.truncate_to(1);
            l
        };
        assert_eq!(out.lists.len(), 1);
        assert_eq!(out.lists["u1"].items, manual.items);
        assert_eq!(out.skipped.len(), 2);
        assert!(out.skipped.iter().any(|(u, r)| u == "u2" && r.contains("empty")));
        assert!(out.skipped.iter().any(|(u, r)| u == "u3" && r.contains("cannot serve")));
        assert_eq!(out.timing.users, 3);
        assert_eq!(out.timing.predictions, 2);
        assert_eq!(out.timing.failed_predictions, 0);
    }

    #[test]
    fn parallel_run_matches_sequential() {
        let mut lists = BTreeMap::new();
        for u in 0..6 {
            let user = format!("u{}", u);
            lists.insert(
                user.clone(),
                candidates(&user, &[("a", 0.9), ("b", 0.8), ("c", 0.7)]),
            );
        }
        let generator = FixedGenerator(lists);
        let p = table_predictor(&[("a", 2.0), ("b", 8.0), ("c", 5.0)]);
        let users: Vec<String> = (0..6).map(|u| format!("u{}", u)).collect();
        let sequential = run_ranking(&generator, &users, 3, 2, &p, 1).unwrap();
        let parallel = run_ranking(&generator, &users, 3, 2, &p, 4).unwrap();
        for (user, list) in &sequential.lists {
            assert_eq!(parallel.lists[user].items, list.items);
        }
    }

    #[test]
    fn k_larger_than_n_is_a_config_error() {
        let generator = FixedGenerator(BTreeMap::new());
        let p = table_predictor(&[]);
        assert!(matches!(
            run_ranking(&generator, &[], 5, 10, &p, 1),
            Err(Error::Config(_))
        ));
    }
}
