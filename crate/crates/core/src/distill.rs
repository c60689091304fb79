//! Instruction-dataset construction and export.
//!
//! Three teacher-annotated sets — review extraction, profile
//! summarization, and rating prediction with reasoning — are built by
//! replaying the pipeline's own prompts against a teacher backend and
//! capturing its completions as supervision targets. The merged export
//! is plain JSONL plus a manifest; the training run itself happens
//! outside this crate, so each example carries a character offset
//! (`mask_from`) marking where the loss-bearing span of the target
//! begins.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::corpus::ReviewId;
use crate::gateway::{CompletionRequest, Gateway, Message, TemplateSet};
use crate::profiling::{
    extraction_prompt, profile_prompt, PreferenceSet, SubjectKind,
};
use crate::reasoner::{build_prediction_prompt, PredictionInputs};
use crate::util::write_atomic;
use crate::{Error, RatingScale, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Which pipeline step an example teaches.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    PreferenceExtraction,
    ProfileConstruction,
    RatingPrediction,
}

impl Step {
    pub fn as_str(&self) -> &'static str {
        match self {
            Step::PreferenceExtraction => "preference_extraction",
            Step::ProfileConstruction => "profile_construction",
            Step::RatingPrediction => "rating_prediction",
        }
    }
}

/// Where an example's inputs came from; must resolve to train data.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Review {
        review_id: ReviewId,
    },
    Subject {
        subject_kind: SubjectKind,
        subject_id: String,
        source_review_ids: Vec<ReviewId>,
    },
    Interaction {
        user_id: String,
        item_id: String,
        review_id: ReviewId,
    },
}

impl Provenance {
    /// Every review id this example depends on.
    pub fn review_ids(&self) -> Vec<ReviewId> {
        match self {
            Provenance::Review { review_id } => vec![*review_id],
            Provenance::Subject {
                source_review_ids, ..
            } => source_review_ids.clone(),
            Provenance::Interaction { review_id, .. } => vec![*review_id],
        }
    }
}

/// One supervised example: prompt messages in, target completion out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionExample {
    pub step: Step,
    pub messages: Vec<Message>,
    pub target: String,
    /// Character offset into `target` where loss applies. The whole
    /// assistant turn is loss-bearing, so this is 0 throughout; the
    /// field exists so a trainer never has to assume it.
    pub mask_from: usize,
    pub provenance: Provenance,
}

impl InstructionExample {
    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::Config(format!(
                "instruction example with empty target ({:?})",
                self.provenance
            )));
        }
        if self.mask_from >= self.target.len() {
            return Err(Error::Config(format!(
                "mask_from {} out of bounds for target of {} bytes ({:?})",
                self.mask_from,
                self.target.len(),
                self.provenance
            )));
        }
        Ok(())
    }
}

/// Accounting for one export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub counts: BTreeMap<Step, usize>,
    pub total: usize,
    pub corpus_digest: String,
    pub teacher_backend: String,
    pub template_checksums: BTreeMap<String, String>,
    pub notes: String,
}

/// Inputs a review must provide to become an extraction example.
pub trait ReviewLike {
    fn review_id(&self) -> ReviewId;
    fn review_text(&self) -> &str;
}

impl ReviewLike for crate::corpus::Review {
    fn review_id(&self) -> ReviewId {
        self.id
    }
    fn review_text(&self) -> &str {
        &self.text
    }
}

/// One extraction example per train review: the extraction prompt as
/// input, the teacher's completion as target. Reviews with empty text
/// and reviews whose teacher call fails are skipped with a log entry.
pub fn build_extraction_set<R: ReviewLike>(
    gateway: &Gateway,
    templates: &TemplateSet,
    train_reviews: &[&R],
) -> Result<Vec<InstructionExample>> {
    let mut examples = Vec::with_capacity(train_reviews.len());
    for review in train_reviews {
        if review.review_text().trim().is_empty() {
            log::info!(
                "extraction set: review {} has empty text; skipped",
                review.review_id()
            );
            continue;
        }
        let prompt = extraction_prompt(templates, review.review_text())?;
        let request = CompletionRequest::new(vec![Message::user(&prompt)])
            .with_intent("preference_extraction");
        let result = match gateway.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                log::warn!(
                    "extraction set: teacher failed for review {}: {}",
                    review.review_id(),
                    e
                );
                continue;
            }
        };
        examples.push(InstructionExample {
            step: Step::PreferenceExtraction,
            messages: vec![Message::user(&prompt)],
            target: result.text,
            mask_from: 0,
            provenance: Provenance::Review {
                review_id: review.review_id(),
            },
        });
    }
    Ok(examples)
}

/// One summarization example per subject. Subjects whose preference
/// set carries no content are excluded with a log entry.
pub fn build_profile_set(
    gateway: &Gateway,
    templates: &TemplateSet,
    sets: &[PreferenceSet],
) -> Result<Vec<InstructionExample>> {
    let mut examples = Vec::with_capacity(sets.len());
    for set in sets {
        if set.is_effectively_empty() {
            log::info!(
                "profile set: {} {:?} has an empty preference set; excluded",
                set.kind,
                set.subject_id
            );
            continue;
        }
        let (template_id, prompt) = profile_prompt(templates, set)?;
        let request =
            CompletionRequest::new(vec![Message::user(&prompt)]).with_intent(template_id);
        let result = match gateway.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                log::warn!(
                    "profile set: teacher failed for {} {:?}: {}",
                    set.kind,
                    set.subject_id,
                    e
                );
                continue;
            }
        };
        let mut source_review_ids: Vec<ReviewId> =
            set.entries.iter().map(|e| e.source_review_id).collect();
        source_review_ids.sort_unstable();
        source_review_ids.dedup();
        examples.push(InstructionExample {
            step: Step::ProfileConstruction,
            messages: vec![Message::user(&prompt)],
            target: result.text,
            mask_from: 0,
            provenance: Provenance::Subject {
                subject_kind: set.kind,
                subject_id: set.subject_id.clone(),
                source_review_ids,
            },
        });
    }
    Ok(examples)
}

/// One train interaction destined for the reasoning set: the inference
/// inputs plus the ground-truth rating the teacher is conditioned on.
#[derive(Debug, Clone)]
pub struct ReasoningSource<'a> {
    pub inputs: PredictionInputs<'a>,
    pub review_id: ReviewId,
    /// True train rating on the corpus scale.
    pub rating: i64,
}

/// Renders the rating-conditioned teacher prompt for one interaction.
pub fn reasoning_prompt(
    templates: &TemplateSet,
    source: &ReasoningSource,
    recommend_threshold: &str,
) -> Result<String> {
    let description = if source.inputs.item_description.trim().is_empty() {
        crate::reasoner::NO_DESCRIPTION.to_string()
    } else {
        source.inputs.item_description.to_string()
    };
    let mut bindings = BTreeMap::new();
    bindings.insert("user rating", source.rating.to_string());
    bindings.insert("user profile", source.inputs.user_profile.to_string());
    bindings.insert("item description", description);
    bindings.insert("item profile", source.inputs.item_profile.to_string());
    bindings.insert("recommend threshold", recommend_threshold.to_string());
    templates.render("reasoning_generation", &bindings)
}

/// Reduces teacher output to bare reasoning prose. Teachers sometimes
/// echo the answer format they were shown elsewhere, so one leading
/// reasoning marker is dropped and anything from a rating marker onward
/// is cut: both are re-added when the target is assembled, and the
/// rating must come from the ground truth, not the teacher.
fn bare_reasoning(text: &str) -> &str {
    let mut t = text.trim();
    if let Some(rest) = t.strip_prefix(crate::reasoner::REASONING_MARKER) {
        t = rest.trim_start();
    }
    if let Some(pos) = t.find(crate::gateway::RATING_MARKER) {
        t = t[..pos].trim_end();
    }
    t
}

/// One example per train interaction. The teacher sees the true rating
/// (rating-conditioned reasoning prompt); the exported input is the
/// plain inference prompt without it, and the target appends the
/// digit-mapped true rating after the teacher's reasoning.
pub fn build_reasoning_set(
    gateway: &Gateway,
    templates: &TemplateSet,
    scale: RatingScale,
    sources: &[ReasoningSource],
    recommend_threshold: &str,
) -> Result<Vec<InstructionExample>> {
    let mut examples = Vec::with_capacity(sources.len());
    for source in sources {
        let digit = scale.digit_for(source.rating)?;
        let teacher_prompt = reasoning_prompt(templates, source, recommend_threshold)?;
        let request = CompletionRequest::new(vec![Message::user(&teacher_prompt)])
            .with_intent("reasoning_generation");
        let result = match gateway.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                log::warn!(
                    "reasoning set: teacher failed for ({}, {}): {}",
                    source.inputs.user_id,
                    source.inputs.item_id,
                    e
                );
                continue;
            }
        };
        let reasoning = bare_reasoning(&result.text);
        let messages = build_prediction_prompt(&source.inputs, scale, templates)?;
        examples.push(InstructionExample {
            step: Step::RatingPrediction,
            messages,
            target: format!(
                "Reasoning: {}\nPredicted User Rating: {}",
                reasoning, digit
            ),
            mask_from: 0,
            provenance: Provenance::Interaction {
                user_id: source.inputs.user_id.to_string(),
                item_id: source.inputs.item_id.to_string(),
                review_id: source.review_id,
            },
        });
    }
    Ok(examples)
}

/// Fails if any example depends on a review outside the train split.
pub fn assert_no_leakage(
    examples: &[InstructionExample],
    train_ids: &BTreeSet<ReviewId>,
) -> Result<()> {
    for example in examples {
        for id in example.provenance.review_ids() {
            if !train_ids.contains(&id) {
                return Err(Error::Eval(format!(
                    "leakage: example {:?} references review {} outside the train split",
                    example.provenance, id
                )));
            }
        }
    }
    Ok(())
}

/// Run-level identifiers recorded in the manifest.
#[derive(Debug, Clone)]
pub struct ExportMeta {
    pub corpus_digest: String,
    pub teacher_backend: String,
    pub template_checksums: BTreeMap<String, String>,
}

/// Writes the merged dataset as JSONL plus a manifest. Examples are
/// validated, then ordered by (step, provenance) so identical inputs
/// always export byte-identically.
pub fn export_sft(
    examples: &[InstructionExample],
    dir: &Path,
    meta: &ExportMeta,
) -> Result<DatasetManifest> {
    let mut ordered: Vec<&InstructionExample> = examples.iter().collect();
    for example in &ordered {
        example.validate()?;
    }
    ordered.sort_by(|a, b| {
        a.step
            .cmp(&b.step)
            .then_with(|| a.provenance.cmp(&b.provenance))
    });

    let mut counts: BTreeMap<Step, usize> = BTreeMap::new();
    let mut lines = String::new();
    for example in &ordered {
        *counts.entry(example.step).or_insert(0) += 1;
        lines.push_str(&serde_json::to_string(example)?);
        lines.push('\n');
    }
    write_atomic(&dir.join(DATASET_FILE), lines.as_bytes())?;

    let manifest = DatasetManifest {
        counts,
        total: ordered.len(),
        corpus_digest: meta.corpus_digest.clone(),
        teacher_backend: meta.teacher_backend.clone(),
        template_checksums: meta.template_checksums.clone(),
        notes: "Targets are full assistant turns; intended training objective is \
                token-level negative log-likelihood over the target span starting at \
                mask_from (a character offset — the trainer converts to token \
                positions). Prompt messages carry no loss. The step field supports \
                training one model over the merged set or one per step."
            .to_string(),
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &manifest_bytes)?;
    Ok(manifest)
}
