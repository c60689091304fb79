//! Preference extraction and profile construction.
//!
//! Step one turns each review into a structured Like/Dislike
//! [`PreferenceList`] via the extraction prompt. Step two gathers the
//! lists for a subject — every train review for a user; a selection
//! strategy's worth for an item — and summarizes them into a cached
//! [`Profile`] via the profile prompts.

pub mod markup;
mod store;

pub use markup::{format_preference_markup, parse_preference_markup};
pub use store::{profile_key, ProfileStore};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::corpus::{Corpus, Review, ReviewId};
use crate::gateway::{CompletionRequest, Gateway, Message, TemplateSet};
use crate::similarity::{top_k_neighbors, CenteredMatrix};
use crate::{Error, Result};

/// Structured output of extracting one review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceList {
    pub source_review_id: ReviewId,
    pub likes: Vec<String>,
    pub dislikes: Vec<String>,
}

impl PreferenceList {
    pub fn is_empty(&self) -> bool {
        self.likes.is_empty() && self.dislikes.is_empty()
    }
}

/// Whose profile a preference set feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectKind {
    User,
    Item,
}

impl fmt::Display for SubjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubjectKind::User => "user",
            SubjectKind::Item => "item",
        })
    }
}

/// How an item's source reviews are chosen. Users always use `All`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SelectionStrategy {
    /// Every train review of the subject.
    All,
    /// The n train reviews with the most helpful votes (ties: most
    /// recent first, then review id).
    HelpfulnessTopN(usize),
    /// Reviews authored by the k users most similar to a target user.
    NeighborBased(usize),
}

impl SelectionStrategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            SelectionStrategy::HelpfulnessTopN(0) => {
                Err(Error::Config("helpful:N requires N >= 1".to_string()))
            }
            SelectionStrategy::NeighborBased(0) => {
                Err(Error::Config("neighbor:K requires K >= 1".to_string()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionStrategy::All => f.write_str("all"),
            SelectionStrategy::HelpfulnessTopN(n) => write!(f, "helpful:{}", n),
            SelectionStrategy::NeighborBased(k) => write!(f, "neighbor:{}", k),
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<SelectionStrategy> {
        let bad = |s: &str| Error::Config(format!("unknown selection strategy {:?}", s));
        let strategy = if s == "all" {
            SelectionStrategy::All
        } else if let Some(n) = s.strip_prefix("helpful:") {
            SelectionStrategy::HelpfulnessTopN(n.parse().map_err(|_| bad(s))?)
        } else if let Some(k) = s.strip_prefix("neighbor:") {
            SelectionStrategy::NeighborBased(k.parse().map_err(|_| bad(s))?)
        } else {
            return Err(bad(s));
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl From<SelectionStrategy> for String {
    fn from(s: SelectionStrategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for SelectionStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<SelectionStrategy> {
        s.parse()
    }
}

/// The preference lists selected for one subject, pre-summarization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferenceSet {
    pub kind: SubjectKind,
    pub subject_id: String,
    pub entries: Vec<PreferenceList>,
    pub strategy: SelectionStrategy,
}

impl PreferenceSet {
    /// True when no entry carries any preference content.
    pub fn is_effectively_empty(&self) -> bool {
        self.entries.iter().all(PreferenceList::is_empty)
    }
}

/// A summarized subject profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub kind: SubjectKind,
    pub subject_id: String,
    pub likes: Vec<String>,
    pub dislikes: Vec<String>,
    /// Train reviews the profile was summarized from, ascending.
    pub source_review_ids: Vec<ReviewId>,
    pub strategy: SelectionStrategy,
    /// Data horizon: max source-review timestamp (0 when empty).
    pub built_at: i64,
}

impl Profile {
    /// An empty profile for a subject with nothing to summarize.
    pub fn empty(kind: SubjectKind, subject_id: &str, strategy: SelectionStrategy) -> Profile {
        Profile {
            kind,
            subject_id: subject_id.to_string(),
            likes: Vec::new(),
            dislikes: Vec::new(),
            source_review_ids: Vec::new(),
            strategy,
            built_at: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.likes.is_empty() && self.dislikes.is_empty()
    }

    /// The profile text as it is bound into downstream prompts.
    pub fn as_markup(&self) -> String {
        format_preference_markup(&self.likes, &self.dislikes)
    }
}

/// Renders the preference-extraction prompt for one review's text.
pub fn extraction_prompt(templates: &TemplateSet, review_text: &str) -> Result<String> {
    let mut bindings = BTreeMap::new();
    bindings.insert("review", review_text.to_string());
    templates.render("preference_extraction", &bindings)
}

/// Extracts one review's Like/Dislike lists. Empty review text
/// short-circuits to an empty list without calling the backend.
pub fn extract_preferences(
    gateway: &Gateway,
    templates: &TemplateSet,
    review: &Review,
) -> Result<PreferenceList> {
    if review.text.trim().is_empty() {
        return Ok(PreferenceList {
            source_review_id: review.id,
            likes: Vec::new(),
            dislikes: Vec::new(),
        });
    }
    let prompt = extraction_prompt(templates, &review.text)?;
    let request = CompletionRequest::new(vec![Message::user(&prompt)])
        .with_intent("preference_extraction");
    let result = gateway.complete(&request)?;
    let (likes, dislikes) = parse_preference_markup(&result.text)?;
    Ok(PreferenceList {
        source_review_id: review.id,
        likes,
        dislikes,
    })
}

/// Everything item selection may need beyond the item id.
pub struct SelectionContext<'a> {
    /// Train-split reviews only.
    pub train: &'a [&'a Review],
    /// Extraction output per train review id. Reviews missing here
    /// (failed or skipped extraction) are left out of selections.
    pub preferences: &'a BTreeMap<ReviewId, PreferenceList>,
    /// Mean-centered train matrix, required by `NeighborBased`.
    pub centered: Option<&'a CenteredMatrix>,
    /// Target user for `NeighborBased` personalization.
    pub target_user: Option<&'a str>,
}

impl<'a> SelectionContext<'a> {
    fn entry(&self, review: &Review) -> Option<PreferenceList> {
        let found = self.preferences.get(&review.id).cloned();
        if found.is_none() {
            log::debug!("review {} has no extracted preferences; skipping", review.id);
        }
        found
    }
}

/// A user's preference set: all of their train reviews, id-ascending.
pub fn select_user_preferences(user_id: &str, ctx: &SelectionContext) -> PreferenceSet {
    let mut reviews: Vec<&&Review> = ctx
        .train
        .iter()
        .filter(|r| r.user_id == user_id)
        .collect();
    reviews.sort_by_key(|r| r.id);
    let entries = reviews.iter().filter_map(|r| ctx.entry(r)).collect();
    PreferenceSet {
        kind: SubjectKind::User,
        subject_id: user_id.to_string(),
        entries,
        strategy: SelectionStrategy::All,
    }
}

/// An item's preference set under the given strategy.
pub fn select_item_preferences(
    item_id: &str,
    strategy: SelectionStrategy,
    ctx: &SelectionContext,
) -> Result<PreferenceSet> {
    strategy.validate()?;
    let mut reviews: Vec<&&Review> = ctx
        .train
        .iter()
        .filter(|r| r.item_id == item_id)
        .collect();
    if reviews.is_empty() {
        log::debug!("item {:?} has no train reviews (cold); empty selection", item_id);
    }
    match strategy {
        SelectionStrategy::All => reviews.sort_by_key(|r| r.id),
        SelectionStrategy::HelpfulnessTopN(n) => {
            reviews.sort_by(|a, b| {
                b.helpful_votes
                    .cmp(&a.helpful_votes)
                    .then(b.timestamp.cmp(&a.timestamp))
                    .then(a.id.cmp(&b.id))
            });
            reviews.truncate(n);
        }
        SelectionStrategy::NeighborBased(k) => {
            let centered = ctx.centered.ok_or_else(|| {
                Error::Config("neighbor:K selection requires the similarity matrix".to_string())
            })?;
            let target = ctx.target_user.ok_or_else(|| {
                Error::Config("neighbor:K selection requires a target user".to_string())
            })?;
            let neighbors = top_k_neighbors(centered, target, item_id, k);
            reviews.retain(|r| {
                r.user_id != target && neighbors.neighbors.iter().any(|(u, _)| *u == r.user_id)
            });
            reviews.sort_by_key(|r| r.id);
        }
    }
    let entries = reviews.iter().filter_map(|r| ctx.entry(r)).collect();
    Ok(PreferenceSet {
        kind: SubjectKind::Item,
        subject_id: item_id.to_string(),
        entries,
        strategy,
    })
}

/// Renders the summarization prompt for a preference set: the user or
/// item profile template over the entries' markup blocks, separated by
/// blank lines. Returns (template id, prompt).
pub fn profile_prompt(
    templates: &TemplateSet,
    set: &PreferenceSet,
) -> Result<(&'static str, String)> {
    let template_id = match set.kind {
        SubjectKind::User => "user_profile",
        SubjectKind::Item => "item_profile",
    };
    let joined = set
        .entries
        .iter()
        .map(|e| format_preference_markup(&e.likes, &e.dislikes))
        .collect::<Vec<_>>()
        .join("\n\n");
    let mut bindings = BTreeMap::new();
    bindings.insert("preferences", joined);
    let prompt = templates.render(template_id, &bindings)?;
    Ok((template_id, prompt))
}

/// Summarizes a preference set into a profile. A set with no content
/// yields an empty profile without calling the backend.
pub fn build_profile(
    gateway: &Gateway,
    templates: &TemplateSet,
    set: &PreferenceSet,
    corpus: &Corpus,
) -> Result<Profile> {
    build_profile_inner(gateway, templates, set, corpus)
        .map_err(|e| e.for_subject(&format!("{} {}", set.kind, set.subject_id)))
}

fn build_profile_inner(
    gateway: &Gateway,
    templates: &TemplateSet,
    set: &PreferenceSet,
    corpus: &Corpus,
) -> Result<Profile> {
    let mut source_review_ids: Vec<ReviewId> =
        set.entries.iter().map(|e| e.source_review_id).collect();
    source_review_ids.sort_unstable();
    source_review_ids.dedup();
    let built_at = source_review_ids
        .iter()
        .filter_map(|id| corpus.review(*id))
        .map(|r| r.timestamp)
        .max()
        .unwrap_or(0);

    if set.is_effectively_empty() {
        let mut profile = Profile::empty(set.kind, &set.subject_id, set.strategy);
        profile.source_review_ids = source_review_ids;
        profile.built_at = built_at;
        return Ok(profile);
    }

    let (template_id, prompt) = profile_prompt(templates, set)?;
    let request = CompletionRequest::new(vec![Message::user(&prompt)]).with_intent(template_id);
    let result = gateway.complete(&request)?;
    let (likes, dislikes) = parse_preference_markup(&result.text)?;
    Ok(Profile {
        kind: set.kind,
        subject_id: set.subject_id.clone(),
        likes,
        dislikes,
        source_review_ids,
        strategy: set.strategy,
        built_at,
    })
}
