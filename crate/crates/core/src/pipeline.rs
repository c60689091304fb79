//! Stage orchestration: each pipeline stage reads verified upstream
//! artifacts, does its work, and writes its outputs plus a stage
//! manifest under the run's output directory.
//!
//! Every manifest records the config digest that produced the stage and
//! a content hash for each output file. Before a stage consumes an
//! upstream artifact it checks (a) the upstream manifest exists, (b) it
//! was produced under the current config digest, and (c) the artifact
//! bytes still hash to what the manifest recorded. Any mismatch is a
//! refusal naming the manifest and the command that regenerates it.
//!
//! Directory layout under the output root:
//!
//! ```text
//! ingest/   corpus.json, issues.json, stage.json
//! split/    split.json, tags.json, stage.json
//! extract/  preferences.jsonl, [failures.jsonl], stage.json
//! profile/  store/{profiles.jsonl,index.json}, [failures.jsonl], stage.json
//! distill/  dataset.jsonl, manifest.json, stage.json
//! predict/  predictions.jsonl, [failures.jsonl], stage.json
//! rerank/   testbed.json, rankings.jsonl, [skipped.json], stage.json
//! evaluate/ rating_metrics.json, topk_metrics.json, metrics.csv, stage.json
//! report/   report.json, report.md, stage.json
//! cache/    response cache (content-addressed, not an artifact)
//! logs/     wall-clock timing (excluded from reproducibility checks)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cf::{train_bpr, train_mf, CandidateList};
use crate::config::RunConfig;
use crate::corpus::{
    bias_means, ingest, kcore_filter, tag_test_subsets, temporal_split, BiasMeans, Corpus,
    IngestSource, Review, ReviewId, SplitAssignment, SubsetTag,
};
use crate::distill::{
    assert_no_leakage, build_extraction_set, build_profile_set, build_reasoning_set, export_sft,
    ExportMeta, InstructionExample, ReasoningSource,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_balanced_topk_testbed, evaluate_rating, ndcg_at_k, recall_at_k, MetricReport,
    RatingEvalOutcome, TopkTestbed,
};
use crate::gateway::{
    Backend, Gateway, HttpBackend, HttpBackendConfig, MockBackend, ResponseCache, TemplateSet,
};
use crate::profiling::{
    build_profile, profile_key, select_item_preferences, select_user_preferences, PreferenceList,
    ProfileStore, SelectionContext, SelectionStrategy, SubjectKind,
};
use crate::ranking::{
    run_ranking, CandidateGenerator, ExternalGenerator, ModelGenerator, RankedList,
};
use crate::reasoner::{predict_rating, PredictionInputs};
use crate::similarity::{mean_center, CenteredMatrix, RatingMatrix};
use crate::util::{sha256_file, write_atomic};

/// Stage names in execution order. `distill` is the `distill-export`
/// subcommand's stage directory.
pub const STAGES: [&str; 9] = [
    "ingest", "split", "extract", "profile", "distill", "predict", "rerank", "evaluate", "report",
];

const STAGE_MANIFEST: &str = "stage.json";

/// Upstream stages a stage verifies before running. `evaluate` checks
/// `predict` or `rerank` depending on the task, so it is listed with
/// both here (the superset used for planning).
pub fn stage_dependencies(stage: &str) -> &'static [&'static str] {
    match stage {
        "ingest" => &[],
        "split" => &["ingest"],
        "extract" => &["ingest", "split"],
        "profile" => &["ingest", "split", "extract"],
        "distill" | "predict" | "rerank" => &["ingest", "split", "extract", "profile"],
        "evaluate" => &["ingest", "split", "predict", "rerank"],
        "report" => &["evaluate"],
        _ => &[],
    }
}

/// Primary files a stage writes, relative to the output root (manifest
/// and optional failure logs omitted). Used for `--dry-run` planning.
pub fn stage_outputs(stage: &str) -> &'static [&'static str] {
    match stage {
        "ingest" => &["ingest/corpus.json", "ingest/issues.json"],
        "split" => &["split/split.json", "split/tags.json"],
        "extract" => &["extract/preferences.jsonl"],
        "profile" => &["profile/store/profiles.jsonl", "profile/store/index.json"],
        "distill" => &["distill/dataset.jsonl", "distill/manifest.json"],
        "predict" => &["predict/predictions.jsonl"],
        "rerank" => &["rerank/testbed.json", "rerank/rankings.jsonl"],
        "evaluate" => &[
            "evaluate/rating_metrics.json",
            "evaluate/topk_metrics.json",
            "evaluate/metrics.csv",
        ],
        "report" => &["report/report.json", "report/report.md"],
        _ => &[],
    }
}

/// Per-stage provenance record written next to the stage's artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// Digest of the semantic configuration that produced this stage.
    pub config_digest: String,
    /// Upstream artifacts read, path (relative to the output root) to
    /// content hash at read time.
    pub inputs: BTreeMap<String, String>,
    /// Artifacts written, path to content hash at write time.
    pub outputs: BTreeMap<String, String>,
    /// Deterministic counters and remarks.
    pub notes: Vec<String>,
}

impl StageManifest {
    fn new(stage: &str, config_digest: &str) -> StageManifest {
        StageManifest {
            stage: stage.to_string(),
            config_digest: config_digest.to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn record_output(&mut self, root: &Path, rel: &str) -> Result<()> {
        self.outputs
            .insert(rel.to_string(), sha256_file(&root.join(rel))?);
        Ok(())
    }

    fn save(&self, root: &Path) -> Result<()> {
        save_json(&root.join(&self.stage).join(STAGE_MANIFEST), self)
    }
}

/// What a completed stage tells the caller: per-item failure count (for
/// the exit code) and the manifest notes (for display).
#[derive(Debug)]
pub struct StageReport {
    pub stage: &'static str,
    pub failures: usize,
    pub notes: Vec<String>,
}

/// Loads a stage manifest, refusing with the missing path and the
/// command that would create it.
pub fn load_stage_manifest(root: &Path, stage: &str) -> Result<StageManifest> {
    let path = root.join(stage).join(STAGE_MANIFEST);
    if !path.exists() {
        let command = if stage == "distill" { "distill-export" } else { stage };
        return Err(Error::Pipeline(format!(
            "stage {stage:?} has not run: missing manifest {}; run the {command} subcommand first",
            path.display()
        )));
    }
    load_json(&path)
}

/// Loads and fully verifies an upstream stage: the manifest must exist,
/// carry the current config digest, and every recorded output must
/// still hash to what the manifest says.
pub fn require_stage(root: &Path, stage: &str, config_digest: &str) -> Result<StageManifest> {
    let manifest = load_stage_manifest(root, stage)?;
    if manifest.config_digest != config_digest {
        return Err(Error::Pipeline(format!(
            "stage {stage:?} artifacts were produced under config digest {} but the current \
             config digest is {}; re-run the pipeline from the {stage} stage",
            &manifest.config_digest[..12.min(manifest.config_digest.len())],
            &config_digest[..12.min(config_digest.len())],
        )));
    }
    for (rel, recorded) in &manifest.outputs {
        let path = root.join(rel);
        if !path.exists() {
            return Err(Error::Pipeline(format!(
                "artifact {rel} recorded by the {stage} manifest is missing; re-run the {stage} stage"
            )));
        }
        let current = sha256_file(&path)?;
        if current != *recorded {
            return Err(Error::Pipeline(format!(
                "artifact {rel} changed since the {stage} stage ran (manifest records {}, file \
                 hashes to {}); re-run the {stage} stage",
                &recorded[..12],
                &current[..12],
            )));
        }
    }
    Ok(manifest)
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Storage(format!("read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Storage(format!("parse {}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut body = String::new();
    for row in rows {
        body.push_str(&serde_json::to_string(row)?);
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Storage(format!("read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| {
            Error::Storage(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(rows)
}

/// One per-item failure, logged and carried into the exit code.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRow {
    /// What failed, e.g. "review 17" or "user u3 item i9".
    pub scope: String,
    pub error: String,
}

fn write_failures(
    manifest: &mut StageManifest,
    root: &Path,
    rel: &str,
    failures: &[FailureRow],
) -> Result<()> {
    if failures.is_empty() {
        // Leave no stale failure log behind from a previous run.
        let path = root.join(rel);
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
        return Ok(());
    }
    for f in failures {
        log::warn!("{}: {}: {}", manifest.stage, f.scope, f.error);
    }
    write_jsonl(&root.join(rel), failures)?;
    manifest.record_output(root, rel)?;
    Ok(())
}

/// Builds the configured backend and gateway (response cache under
/// `<out>/cache` when enabled).
pub fn build_gateway(cfg: &RunConfig) -> Result<Gateway> {
    let backend: Arc<dyn Backend> = match cfg.backend.kind.as_str() {
        "mock" => {
            let script = cfg.backend.mock_script.as_ref().ok_or_else(|| {
                Error::Config("backend \"mock\" requires backend.mock_script".into())
            })?;
            Arc::new(MockBackend::from_path(script)?)
        }
        "http" => {
            let url = cfg.backend.url.clone().ok_or_else(|| {
                Error::Config("backend \"http\" requires backend.url".into())
            })?;
            let model = cfg.backend.model.clone().ok_or_else(|| {
                Error::Config("backend \"http\" requires backend.model".into())
            })?;
            Arc::new(HttpBackend::new(HttpBackendConfig {
                url,
                model,
                credential_env: Some(cfg.backend.credential_env.clone()),
                timeout_secs: cfg.backend.timeout_secs,
            })?)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown backend {other:?} (expected \"mock\" or \"http\")"
            )));
        }
    };
    let mut gateway = Gateway::new(backend).with_retries(
        cfg.backend.retries,
        std::time::Duration::from_millis(cfg.backend.backoff_ms),
    );
    if cfg.backend.cache {
        gateway = gateway.with_cache(ResponseCache::open(cfg.run.out_dir.join("cache"))?);
    }
    Ok(gateway)
}

fn save_timing(root: &Path, stage: &str, fields: serde_json::Value) -> Result<()> {
    save_json(&root.join("logs").join(format!("{stage}_timing.json")), &fields)
}

// ---------------------------------------------------------------------------
// Shared stage context
// ---------------------------------------------------------------------------

/// Artifacts most stages need: the corpus, the split, extraction
/// output, and the derived train-side lookups.
struct LoadedCorpus {
    corpus: Corpus,
    split: SplitAssignment,
}

impl LoadedCorpus {
    fn load(root: &Path, digest: &str) -> Result<LoadedCorpus> {
        require_stage(root, "ingest", digest)?;
        require_stage(root, "split", digest)?;
        let corpus = Corpus::load(&root.join("ingest/corpus.json"))?;
        let split: SplitAssignment = load_json(&root.join("split/split.json"))?;
        split.verify(&corpus)?;
        Ok(LoadedCorpus { corpus, split })
    }
}

fn load_preferences(root: &Path, digest: &str) -> Result<BTreeMap<ReviewId, PreferenceList>> {
    require_stage(root, "extract", digest)?;
    let rows: Vec<PreferenceList> = read_jsonl(&root.join("extract/preferences.jsonl"))?;
    Ok(rows
        .into_iter()
        .map(|p| (p.source_review_id, p))
        .collect())
}

/// Resolves profile markup for prompts, recomputing the selection and
/// content key and hitting the store (which the profile stage has
/// already populated for every subject the run needs). A miss falls
/// through to an on-demand build so personalized strategies can serve
/// pairs that were not enumerable up front.
struct ProfileResolver<'a> {
    store: &'a ProfileStore,
    strategy: SelectionStrategy,
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    corpus: &'a Corpus,
    train: &'a [&'a Review],
    preferences: &'a BTreeMap<ReviewId, PreferenceList>,
    centered: Option<&'a CenteredMatrix>,
}

impl ProfileResolver<'_> {
    fn context<'s>(&'s self, target_user: Option<&'s str>) -> SelectionContext<'s> {
        SelectionContext {
            train: self.train,
            preferences: self.preferences,
            centered: self.centered,
            target_user,
        }
    }

    fn user_markup(&self, user_id: &str) -> Result<String> {
        let set = select_user_preferences(user_id, &self.context(None));
        let ids: Vec<ReviewId> = set.entries.iter().map(|e| e.source_review_id).collect();
        let key = profile_key(SubjectKind::User, user_id, SelectionStrategy::All, None, &ids);
        let profile = self.store.get_or_build(&key, || {
            build_profile(self.gateway, self.templates, &set, self.corpus)
        })?;
        Ok(profile.as_markup())
    }

    fn item_markup(&self, item_id: &str, target_user: &str) -> Result<String> {
        let personalized = matches!(self.strategy, SelectionStrategy::NeighborBased(_));
        let target = personalized.then_some(target_user);
        let set = select_item_preferences(item_id, self.strategy, &self.context(target))?;
        let ids: Vec<ReviewId> = set.entries.iter().map(|e| e.source_review_id).collect();
        let key = profile_key(SubjectKind::Item, item_id, self.strategy, target, &ids);
        let profile = self.store.get_or_build(&key, || {
            build_profile(self.gateway, self.templates, &set, self.corpus)
        })?;
        Ok(profile.as_markup())
    }
}

/// Everything the reasoner needs for one (user, item) pair.
struct PromptSources {
    user_profile: String,
    item_profile: String,
    description: String,
    user_mean: f64,
    item_mean: f64,
}

fn prompt_sources(
    resolver: &ProfileResolver,
    means: &BiasMeans,
    user_id: &str,
    item_id: &str,
) -> Result<PromptSources> {
    Ok(PromptSources {
        user_profile: resolver.user_markup(user_id)?,
        item_profile: resolver.item_markup(item_id, user_id)?,
        description: resolver
            .corpus
            .item(item_id)
            .map(|m| m.description.clone())
            .unwrap_or_default(),
        user_mean: means.user_mean(user_id),
        item_mean: means.item_mean(item_id),
    })
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

/// Summary of skipped input records, written next to the corpus.
#[derive(Debug, Serialize, Deserialize)]
pub struct IngestIssues {
    pub issues: Vec<String>,
    pub dropped_unrated: usize,
    pub reviews_before_kcore: usize,
    pub reviews_after_kcore: usize,
}

pub fn run_ingest(cfg: &RunConfig) -> Result<StageReport> {
    let digest = cfg.digest()?;
    let root = cfg.run.out_dir.clone();
    let scale = cfg.rating_scale()?;
    let mut source = IngestSource::new(&cfg.corpus.reviews);
    if let Some(fmt) = &cfg.corpus.reviews_format {
        source.reviews_format = Some(fmt.parse()?);
    }
    if let Some(items) = &cfg.corpus.items {
        source = source.with_items(items);
        if let Some(fmt) = &cfg.corpus.items_format {
            source.items_format = Some(fmt.parse()?);
        }
    }

    let outcome = ingest(&source, scale)?;
    let before = outcome.corpus.len();
    let corpus = if cfg.preprocess.kcore > 0 {
        kcore_filter(&outcome.corpus, cfg.preprocess.kcore)
    } else {
        outcome.corpus
    };

    let mut manifest = StageManifest::new("ingest", &digest);
    corpus.save(&root.join("ingest/corpus.json"))?;
    manifest.record_output(&root, "ingest/corpus.json")?;
    let issues = IngestIssues {
        issues: outcome.issues.iter().map(|i| i.to_string()).collect(),
        dropped_unrated: outcome.dropped_unrated,
        reviews_before_kcore: before,
        reviews_after_kcore: corpus.len(),
    };
    save_json(&root.join("ingest/issues.json"), &issues)?;
    manifest.record_output(&root, "ingest/issues.json")?;

    manifest.notes = vec![
        format!("reviews: {}", corpus.len()),
        format!("users: {}", corpus.user_ids().len()),
        format!("items: {}", corpus.interacted_item_ids().len()),
        format!("skipped records: {}", issues.issues.len()),
        format!("dropped unrated: {}", issues.dropped_unrated),
        format!(
            "kcore (k={}): {} -> {}",
            cfg.preprocess.kcore, before, corpus.len()
        ),
    ];
    let notes = manifest.notes.clone();
    manifest.save(&root)?;
    Ok(StageReport {
        stage: "ingest",
        failures: issues.issues.len(),
        notes,
    })
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

pub fn run_split(cfg: &RunConfig) -> Result<StageReport> {
    let digest = cfg.digest()?;
    let root = cfg.run.out_dir.clone();
    let upstream = require_stage(&root, "ingest", &digest)?;
    let corpus = Corpus::load(&root.join("ingest/corpus.json"))?;

    let split = temporal_split(&corpus, cfg.preprocess.split_ratios)?;
    let tags = tag_test_subsets(&split, &corpus);

    let mut manifest = StageManifest::new("split", &digest);
    manifest.inputs = upstream.outputs.clone();
    save_json(&root.join("split/split.json"), &split)?;
    manifest.record_output(&root, "split/split.json")?;
    save_json(&root.join("split/tags.json"), &tags)?;
    manifest.record_output(&root, "split/tags.json")?;

    let count = |tag: SubsetTag| tags.values().filter(|t| **t == tag).count();
    manifest.notes = vec![
        format!(
            "train/valid/test: {}/{}/{}",
            split.train.len(),
            split.valid.len(),
            split.test.len()
        ),
        format!(
            "test subsets: warm {}, cold {}, unseen {}",
            count(SubsetTag::Warm),
            count(SubsetTag::Cold),
            count(SubsetTag::Unseen)
        ),
    ];
    let notes = manifest.notes.clone();
    manifest.save(&root)?;
    Ok(StageReport {
        stage: "split",
        failures: 0,
        notes,
    })
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

pub fn run_extract(cfg: &RunConfig) -> Result<StageReport> {
    let digest = cfg.digest()?;
    let root = cfg.run.out_dir.clone();
    let loaded = LoadedCorpus::load(&root, &digest)?;
    let gateway = build_gateway(cfg)?;
    let templates = cfg.template_set()?;

    let mut rows: Vec<PreferenceList> = Vec::new();
    let mut failures: Vec<FailureRow> = Vec::new();
    let mut empty_text = 0usize;
    for review in loaded.split.train_reviews(&loaded.corpus) {
        if review.text.trim().is_empty() {
            empty_text += 1;
        }
        match crate::profiling::extract_preferences(&gateway, &templates, review) {
            Ok(prefs) => rows.push(prefs),
            Err(e) => failures.push(FailureRow {
                scope: format!("review {}", review.id),
                error: e.to_string(),
            }),
        }
    }
    rows.sort_by_key(|p| p.source_review_id);

    let mut manifest = StageManifest::new("extract", &digest);
    manifest.inputs = load_stage_manifest(&root, "split")?.outputs.clone();
    write_jsonl(&root.join("extract/preferences.jsonl"), &rows)?;
    manifest.record_output(&root, "extract/preferences.jsonl")?;
    write_failures(&mut manifest, &root, "extract/failures.jsonl", &failures)?;

    manifest.notes = vec![
        format!("extracted: {}", rows.len()),
        format!("empty review text (kept, empty lists): {}", empty_text),
        format!("failed: {}", failures.len()),
    ];
    let notes = manifest.notes.clone();
    manifest.save(&root)?;
    Ok(StageReport {
        stage: "extract",
        failures: failures.len(),
        notes,
    })
}

// ---------------------------------------------------------------------------
// profile
// ---------------------------------------------------------------------------

pub fn run_profile(cfg: &RunConfig) -> Result<StageReport> {
    let digest = cfg.digest()?;
    let root = cfg.run.out_dir.clone();
    let loaded = LoadedCorpus::load(&root, &digest)?;
    let preferences = load_preferences(&root, &digest)?;
    let gateway = build_gateway(cfg)?;
    let templates = cfg.template_set()?;
    let strategy = cfg.item_strategy()?;

    // Profiles are keyed by their source-review set, not by the prompts
    // or backend, so a store built under a different config digest must
    // not be reused.
    let store_dir = root.join("profile/store");
    let stale = !matches!(
        load_stage_manifest(&root, "profile"),
        Ok(m) if m.config_digest == digest
    );
    if stale && store_dir.exists() {
        log::info!("profile store predates the current config; rebuilding");
        std::fs::remove_dir_all(&store_dir)?;
    }
    let store = ProfileStore::open(&store_dir)?;

    let train = loaded.split.train_reviews(&loaded.corpus);
    let centered = build_centered(strategy, &train);
    let resolver = ProfileResolver {
        store: &store,
        strategy,
        gateway: &gateway,
        templates: &templates,
        corpus: &loaded.corpus,
        train: &train,
        preferences: &preferences,
        centered: centered.as_ref(),
    };

    let mut failures: Vec<FailureRow> = Vec::new();
    let mut user_profiles = 0usize;
    for user in loaded.corpus.user_ids() {
        match resolver.user_markup(user) {
            Ok(_) => user_profiles += 1,
            Err(e) => failures.push(FailureRow {
                scope: format!("user {user}"),
                error: e.to_string(),
            }),
        }
    }

    let mut item_profiles = 0usize;
    if matches!(strategy, SelectionStrategy::NeighborBased(_)) {
        // Personalized profiles: cover every (user, item) pair that the
        // export and prediction stages will ask for.
        let mut pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
        for review in train.iter() {
            pairs.insert((review.user_id.as_str(), review.item_id.as_str()));
        }
        for review in loaded.split.test_reviews(&loaded.corpus) {
            pairs.insert((review.user_id.as_str(), review.item_id.as_str()));
        }
        for (user, item) in pairs {
            match resolver.item_markup(item, user) {
                Ok(_) => item_profiles += 1,
                Err(e) => failures.push(FailureRow {
                    scope: format!("item {item} (for user {user})"),
                    error: e.to_string(),
                }),
            }
        }
    } else {
        for item in loaded.corpus.interacted_item_ids() {
            match resolver.item_markup(item, "") {
                Ok(_) => item_profiles += 1,
                Err(e) => failures.push(FailureRow {
                    scope: format!("item {item}"),
                    error: e.to_string(),
                }),
            }
        }
    }

    let mut manifest = StageManifest::new("profile", &digest);
    manifest.inputs = load_stage_manifest(&root, "extract")?.outputs.clone();
    manifest.record_output(&root, "profile/store/profiles.jsonl")?;
    manifest.record_output(&root, "profile/store/index.json")?;
    write_failures(&mut manifest, &root, "profile/failures.jsonl", &failures)?;

    manifest.notes = vec![
        format!("strategy: {}", strategy),
        format!("user profiles: {}", user_profiles),
        format!("item profiles: {}", item_profiles),
        format!("store entries: {}", store.len()),
        format!("failed: {}", failures.len()),
    ];
    let notes = manifest.notes.clone();
    manifest.save(&root)?;
    Ok(StageReport {
        stage: "profile",
        failures: failures.len(),
        notes,
    })
}

fn build_centered(strategy: SelectionStrategy, train: &[&Review]) -> Option<CenteredMatrix> {
    matches!(strategy, SelectionStrategy::NeighborBased(_)).then(|| {
        let matrix = RatingMatrix::from_reviews(train.iter().copied());
        mean_center(&matrix)
    })
}

// ---------------------------------------------------------------------------
// distill-export
// ---------------------------------------------------------------------------

/// Builds the selected instruction sets and exports the dataset.
/// `steps` narrows which sets are built ("pe", "pc", "rp"); `None`
/// uses the config.
pub fn run_distill(cfg: &RunConfig, steps: Option<&[String]>) -> Result<StageReport> {
    let digest = cfg.digest()?;
    let root = cfg.run.out_dir.clone();
    let loaded = LoadedCorpus::load(&root, &digest)?;
    let preferences = load_preferences(&root, &digest)?;
    require_stage(&root, "profile", &digest)?;
    let gateway = build_gateway(cfg)?;
    let templates = cfg.template_set()?;
    let scale = cfg.rating_scale()?;
    let strategy = cfg.item_strategy()?;

    let steps: BTreeSet<&str> = match steps {
        Some(list) => list.iter().map(|s| s.as_str()).collect(),
        None => cfg.distill.steps.iter().map(|s| s.as_str()).collect(),
    };
    for step in &steps {
        if !matches!(*step, "pe" | "pc" | "rp") {
            return Err(Error::Config(format!(
                "unknown distill step {step:?} (expected pe, pc, or rp)"
            )));
        }
    }

    let store = ProfileStore::open(&root.join("profile/store"))?;
    let train = loaded.split.train_reviews(&loaded.corpus);
    let centered = build_centered(strategy, &train);
    let resolver = ProfileResolver {
        store: &store,
        strategy,
        gateway: &gateway,
        templates: &templates,
        corpus: &loaded.corpus,
        train: &train,
        preferences: &preferences,
        centered: centered.as_ref(),
    };
    let means = bias_means(train.iter().copied())?;

    let mut examples: Vec<InstructionExample> = Vec::new();
    let mut counts: Vec<String> = Vec::new();

    if steps.contains("pe") {
        let set = build_extraction_set(&gateway, &templates, &train)?;
        counts.push(format!("preference_extraction examples: {}", set.len()));
        examples.extend(set);
    }

    if steps.contains("pc") {
        let ctx = SelectionContext {
            train: &train,
            preferences: &preferences,
            centered: centered.as_ref(),
            target_user: None,
        };
        let mut sets = Vec::new();
        let train_users: BTreeSet<&str> = train.iter().map(|r| r.user_id.as_str()).collect();
        for user in train_users {
            sets.push(select_user_preferences(user, &ctx));
        }
        if matches!(strategy, SelectionStrategy::NeighborBased(_)) {
            let mut pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
            for review in train.iter() {
                pairs.insert((review.user_id.as_str(), review.item_id.as_str()));
            }
            for (user, item) in pairs {
                let ctx = SelectionContext {
                    train: &train,
                    preferences: &preferences,
                    centered: centered.as_ref(),
                    target_user: Some(user),
                };
                sets.push(select_item_preferences(item, strategy, &ctx)?);
            }
        } else {
            let train_items: BTreeSet<&str> = train.iter().map(|r| r.item_id.as_str()).collect();
            for item in train_items {
                sets.push(select_item_preferences(item, strategy, &ctx)?);
            }
        }
        let set = build_profile_set(&gateway, &templates, &sets)?;
        counts.push(format!("profile_construction examples: {}", set.len()));
        examples.extend(set);
    }

    if steps.contains("rp") {
        let mut owned: Vec<(PromptSources, &Review)> = Vec::with_capacity(train.len());
        for review in train.iter() {
            match prompt_sources(&resolver, &means, &review.user_id, &review.item_id) {
                Ok(sources) => owned.push((sources, review)),
                Err(e) => log::warn!(
                    "reasoning set: profile lookup failed for review {}: {}",
                    review.id,
                    e
                ),
            }
        }
        let sources: Vec<ReasoningSource> = owned
            .iter()
            .map(|(s, review)| ReasoningSource {
                inputs: PredictionInputs {
                    user_id: &review.user_id,
                    item_id: &review.item_id,
                    user_profile: &s.user_profile,
                    item_profile: &s.item_profile,
                    item_description: &s.description,
                    user_mean: s.user_mean,
                    item_mean: s.item_mean,
                },
                review_id: review.id,
                rating: review.rating,
            })
            .collect();
        let set = build_reasoning_set(
            &gateway,
            &templates,
            scale,
            &sources,
            &cfg.distill.recommend_threshold,
        )?;
        counts.push(format!("rating_prediction examples: {}", set.len()));
        examples.extend(set);
    }

    let train_ids: BTreeSet<ReviewId> = loaded.split.train.iter().copied().collect();
    assert_no_leakage(&examples, &train_ids)?;

    let meta = ExportMeta {
        corpus_digest: loaded.corpus.digest()?,
        teacher_backend: gateway.backend_id().to_string(),
        template_checksums: templates.checksums().clone(),
    };
    let dataset_manifest = export_sft(&examples, &root.join("distill"), &meta)?;

    let mut manifest = StageManifest::new("distill", &digest);
    manifest.inputs = load_stage_manifest(&root, "profile")?.outputs.clone();
    manifest.record_output(&root, "distill/dataset.jsonl")?;
    manifest.record_output(&root, "distill/manifest.json")?;
    manifest.notes = counts;
    manifest
        .notes
        .push(format!("total examples: {}", dataset_manifest.total));
    let notes = manifest.notes.clone();
    manifest.save(&root)?;
    Ok(StageReport {
        stage: "distill",
        failures: 0,
        notes,
    })
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

/// One scored test interaction, as written to `predict/predictions.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub review_id: ReviewId,
    pub user_id: String,
    pub item_id: String,
    pub reasoning: String,
    pub parsed_rating: Option<i64>,
    pub expected_rating: f64,
    pub fallback_used: bool,
    pub coverage_mass: Option<f64>,
}

pub fn run_predict(cfg: &RunConfig) -> Result<StageReport> {
    let digest = cfg.digest()?;
    let root = cfg.run.out_dir.clone();
    let loaded = LoadedCorpus::load(&root, &digest)?;
    let preferences = load_preferences(&root, &digest)?;
    require_stage(&root, "profile", &digest)?;
    let gateway = build_gateway(cfg)?;
    let templates = cfg.template_set()?;
    let scale = cfg.rating_scale()?;
    let strategy = cfg.item_strategy()?;

    let store = ProfileStore::open(&root.join("profile/store"))?;
    let train = loaded.split.train_reviews(&loaded.corpus);
    let centered = build_centered(strategy, &train);
    let resolver = ProfileResolver {
        store: &store,
        strategy,
        gateway: &gateway,
        templates: &templates,
        corpus: &loaded.corpus,
        train: &train,
        preferences: &preferences,
        centered: centered.as_ref(),
    };
    let means = bias_means(train.iter().copied())?;
    let test = loaded.split.test_reviews(&loaded.corpus);

    let started = Instant::now();
    let predict_one = |review: &&Review| -> Result<PredictionRow> {
        let sources = prompt_sources(&resolver, &means, &review.user_id, &review.item_id)?;
        let prediction = predict_rating(
            &gateway,
            &templates,
            scale,
            &PredictionInputs {
                user_id: &review.user_id,
                item_id: &review.item_id,
                user_profile: &sources.user_profile,
                item_profile: &sources.item_profile,
                item_description: &sources.description,
                user_mean: sources.user_mean,
                item_mean: sources.item_mean,
            },
        )?;
        Ok(PredictionRow {
            review_id: review.id,
            user_id: prediction.user_id,
            item_id: prediction.item_id,
            reasoning: prediction.reasoning,
            parsed_rating: prediction.parsed_rating,
            expected_rating: prediction.expected_rating,
            fallback_used: prediction.fallback_used,
            coverage_mass: prediction.coverage_mass,
        })
    };

    let mut outcomes: Vec<(ReviewId, String, String, Result<PredictionRow>)> =
        if cfg.run.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.run.workers)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| {
                test.par_iter()
                    .map(|r| {
                        (
                            r.id,
                            r.user_id.clone(),
                            r.item_id.clone(),
                            predict_one(r),
                        )
                    })
                    .collect()
            })
        } else {
            test.iter()
                .map(|r| {
                    (
                        r.id,
                        r.user_id.clone(),
                        r.item_id.clone(),
                        predict_one(r),
                    )
                })
                .collect()
        };
    outcomes.sort_by_key(|(id, ..)| *id);

    let mut rows: Vec<PredictionRow> = Vec::new();
    let mut failures: Vec<FailureRow> = Vec::new();
    for (id, user, item, outcome) in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(FailureRow {
                scope: format!("review {id} (user {user} item {item})"),
                error: e.to_string(),
            }),
        }
    }
    let fallbacks = rows.iter().filter(|r| r.fallback_used).count();

    let mut manifest = StageManifest::new("predict", &digest);
    manifest.inputs = load_stage_manifest(&root, "profile")?.outputs.clone();
    write_jsonl(&root.join("predict/predictions.jsonl"), &rows)?;
    manifest.record_output(&root, "predict/predictions.jsonl")?;
    write_failures(&mut manifest, &root, "predict/failures.jsonl", &failures)?;

    manifest.notes = vec![
        format!("predicted: {}", rows.len()),
        format!("failed: {}", failures.len()),
        format!("integer fallbacks (no token scores): {}", fallbacks),
    ];
    let notes = manifest.notes.clone();
    manifest.save(&root)?;
    save_timing(
        &root,
        "predict",
        serde_json::json!({
            "elapsed_ms": started.elapsed().as_millis() as u64,
            "predictions": rows.len(),
            "failures": failures.len(),
            "workers": cfg.run.workers,
        }),
    )?;
    Ok(StageReport {
        stage: "predict",
        failures: failures.len(),
        notes,
    })
}

// ---------------------------------------------------------------------------
// rerank
// ---------------------------------------------------------------------------

pub fn run_rerank(cfg: &RunConfig) -> Result<StageReport> {
    let digest = cfg.digest()?;
    let root = cfg.run.out_dir.clone();
    let loaded = LoadedCorpus::load(&root, &digest)?;
    let preferences = load_preferences(&root, &digest)?;
    require_stage(&root, "profile", &digest)?;
    let gateway = build_gateway(cfg)?;
    let templates = cfg.template_set()?;
    let scale = cfg.rating_scale()?;
    let strategy = cfg.item_strategy()?;

    let testbed = build_balanced_topk_testbed(&loaded.corpus, cfg.ranking.testbed_seed)?;

    // Candidate generation state is built from the testbed's held-in
    // half so held-out items are reachable as candidates.
    let mut interactions: Vec<(String, String)> = Vec::new();
    let mut train_seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for id in &testbed.train {
        let review = loaded.corpus.review(*id).ok_or_else(|| {
            Error::Pipeline(format!("testbed references unknown review {id}"))
        })?;
        interactions.push((review.user_id.clone(), review.item_id.clone()));
        train_seen
            .entry(review.user_id.clone())
            .or_default()
            .insert(review.item_id.clone());
    }

    let bpr_model;
    let external;
    let generator: &dyn CandidateGenerator = match cfg.ranking.generator.as_str() {
        "bpr" => {
            bpr_model = train_bpr(&interactions, &cfg.cf.to_train_config())?;
            &ModelGenerator {
                model: &bpr_model,
                train_seen: &train_seen,
            } as &dyn CandidateGenerator
        }
        "external" => {
            let path = cfg.ranking.external_candidates.as_ref().ok_or_else(|| {
                Error::Config("generator \"external\" requires ranking.external_candidates".into())
            })?;
            external = load_external_candidates(path)?;
            &external as &dyn CandidateGenerator
        }
        other => {
            return Err(Error::Config(format!(
                "unknown candidate generator {other:?} (expected \"bpr\" or \"external\")"
            )));
        }
    };

    // The reasoner reranks each shortlist; profiles come from the
    // profile stage's store (train-split reviews only).
    let store = ProfileStore::open(&root.join("profile/store"))?;
    let train = loaded.split.train_reviews(&loaded.corpus);
    let centered = build_centered(strategy, &train);
    let resolver = ProfileResolver {
        store: &store,
        strategy,
        gateway: &gateway,
        templates: &templates,
        corpus: &loaded.corpus,
        train: &train,
        preferences: &preferences,
        centered: centered.as_ref(),
    };
    let means = bias_means(train.iter().copied())?;
    let predictor = |user: &str, item: &str| -> Result<f64> {
        let sources = prompt_sources(&resolver, &means, user, item)?;
        let prediction = predict_rating(
            &gateway,
            &templates,
            scale,
            &PredictionInputs {
                user_id: user,
                item_id: item,
                user_profile: &sources.user_profile,
                item_profile: &sources.item_profile,
                item_description: &sources.description,
                user_mean: sources.user_mean,
                item_mean: sources.item_mean,
            },
        )?;
        Ok(prediction.expected_rating)
    };

    let users: Vec<String> = testbed.relevant.keys().cloned().collect();
    let n = cfg.ranking.candidates_n;
    let outcome = run_ranking(generator, &users, n, n, &predictor, cfg.run.workers)?;

    let mut manifest = StageManifest::new("rerank", &digest);
    manifest.inputs = load_stage_manifest(&root, "profile")?.outputs.clone();
    save_json(&root.join("rerank/testbed.json"), &testbed)?;
    manifest.record_output(&root, "rerank/testbed.json")?;
    let lists: Vec<&RankedList> = outcome.lists.values().collect();
    write_jsonl(&root.join("rerank/rankings.jsonl"), &lists)?;
    manifest.record_output(&root, "rerank/rankings.jsonl")?;
    if !outcome.skipped.is_empty() {
        save_json(&root.join("rerank/skipped.json"), &outcome.skipped)?;
        manifest.record_output(&root, "rerank/skipped.json")?;
    } else {
        let path = root.join("rerank/skipped.json");
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
    }

    manifest.notes = vec![
        format!("generator: {}", cfg.ranking.generator),
        format!("users ranked: {}", outcome.lists.len()),
        format!("users skipped: {}", outcome.skipped.len()),
        format!(
            "predictions: {} ({} failed)",
            outcome.timing.predictions, outcome.timing.failed_predictions
        ),
    ];
    let notes = manifest.notes.clone();
    manifest.save(&root)?;
    save_timing(
        &root,
        "rerank",
        serde_json::json!({
            "generate_ms": outcome.timing.generate_ms as u64,
            "rerank_ms": outcome.timing.rerank_ms as u64,
            "users": outcome.timing.users,
            "predictions": outcome.timing.predictions,
            "workers": cfg.run.workers,
        }),
    )?;
    Ok(StageReport {
        stage: "rerank",
        failures: outcome.timing.failed_predictions + outcome.skipped.len(),
        notes,
    })
}

#[derive(Debug, Deserialize)]
struct ExternalCandidateRow {
    user_id: String,
    /// `(item_id, score)` pairs, best first.
    items: Vec<(String, f64)>,
}

fn load_external_candidates(path: &Path) -> Result<ExternalGenerator> {
    let rows: Vec<ExternalCandidateRow> = read_jsonl(path)?;
    let mut lists = BTreeMap::new();
    for row in rows {
        lists.insert(
            row.user_id.clone(),
            CandidateList {
                user_id: row.user_id,
                items: row.items,
                generator: "external".to_string(),
                short: false,
            },
        );
    }
    Ok(ExternalGenerator {
        name: "external".to_string(),
        lists,
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Which evaluation families to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Rating,
    Topk,
    Both,
}

/// Rating-task artifact: the model's evaluation plus the optional
/// matrix-factorization baseline rows.
#[derive(Debug, Serialize, Deserialize)]
pub struct RatingMetricsDoc {
    pub model: RatingEvalOutcome,
    pub mf_baseline: Option<Vec<MetricReport>>,
}

/// One top-k metric cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopkMetricRow {
    pub metric: String,
    pub k: usize,
    /// "reranked" for the final order, "generator" for the shortlist
    /// order before reranking.
    pub ordering: String,
    /// Mean over evaluated users.
    pub value: f64,
    pub users: usize,
    pub config_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TopkMetricsDoc {
    pub rows: Vec<TopkMetricRow>,
}

pub fn run_evaluate(
    cfg: &RunConfig,
    task: EvalTask,
    cutoffs: Option<&[usize]>,
) -> Result<StageReport> {
    let digest = cfg.digest()?;
    let root = cfg.run.out_dir.clone();
    let mut manifest = StageManifest::new("evaluate", &digest);
    let mut notes: Vec<String> = Vec::new();
    let mut csv_rows: Vec<[String; 7]> = Vec::new();

    if matches!(task, EvalTask::Rating | EvalTask::Both) {
        let loaded = LoadedCorpus::load(&root, &digest)?;
        let predict_manifest = require_stage(&root, "predict", &digest)?;
        manifest.inputs.extend(predict_manifest.outputs.clone());
        let rows: Vec<PredictionRow> = read_jsonl(&root.join("predict/predictions.jsonl"))?;
        let predicted: BTreeMap<ReviewId, f64> = rows
            .iter()
            .map(|r| (r.review_id, r.expected_rating))
            .collect();
        let tags: BTreeMap<ReviewId, SubsetTag> = load_json(&root.join("split/tags.json"))?;
        let test = loaded.split.test_reviews(&loaded.corpus);
        let outcome = evaluate_rating(
            &predicted,
            &test,
            &tags,
            &digest,
            cfg.eval.coverage_threshold,
        )?;
        for warning in &outcome.warnings {
            log::warn!("evaluate: {warning}");
        }
        notes.push(format!(
            "rating: {} predictions over {} test reviews (coverage {:.3})",
            predicted.len(),
            test.len(),
            outcome.coverage
        ));
        notes.extend(outcome.warnings.iter().cloned());

        let mf_baseline = if cfg.eval.mf_baseline {
            Some(mf_baseline_reports(cfg, &loaded, &digest)?)
        } else {
            None
        };

        for report in &outcome.reports {
            csv_rows.push([
                "rating".into(),
                report.metric.clone(),
                report.subset.clone(),
                "model".into(),
                format_value(report.value),
                report.support.to_string(),
                report.config_digest.clone(),
            ]);
        }
        if let Some(baseline) = &mf_baseline {
            for report in baseline {
                csv_rows.push([
                    "rating".into(),
                    report.metric.clone(),
                    report.subset.clone(),
                    "mf_baseline".into(),
                    format_value(report.value),
                    report.support.to_string(),
                    report.config_digest.clone(),
                ]);
            }
        }

        let doc = RatingMetricsDoc {
            model: outcome,
            mf_baseline,
        };
        save_json(&root.join("evaluate/rating_metrics.json"), &doc)?;
        manifest.record_output(&root, "evaluate/rating_metrics.json")?;
    }

    if matches!(task, EvalTask::Topk | EvalTask::Both) {
        let rerank_manifest = require_stage(&root, "rerank", &digest)?;
        manifest.inputs.extend(rerank_manifest.outputs.clone());
        let testbed: TopkTestbed = load_json(&root.join("rerank/testbed.json"))?;
        let lists: Vec<RankedList> = read_jsonl(&root.join("rerank/rankings.jsonl"))?;
        let cutoffs: Vec<usize> = match cutoffs {
            Some(ks) => ks.to_vec(),
            None => cfg.ranking.cutoffs.clone(),
        };
        let max_len = lists.iter().map(|l| l.k).max().unwrap_or(0);
        if let Some(k) = cutoffs.iter().find(|k| **k > max_len) {
            return Err(Error::Config(format!(
                "cutoff {k} exceeds the reranked list length {max_len}; re-run rerank with a \
                 larger candidates_n"
            )));
        }
        let doc = topk_metrics(&lists, &testbed, &cutoffs, &digest);
        notes.push(format!(
            "topk: {} users at cutoffs {:?}",
            lists.len(),
            cutoffs
        ));
        for row in &doc.rows {
            csv_rows.push([
                "topk".into(),
                row.metric.clone(),
                row.k.to_string(),
                row.ordering.clone(),
                format_value(row.value),
                row.users.to_string(),
                row.config_digest.clone(),
            ]);
        }
        save_json(&root.join("evaluate/topk_metrics.json"), &doc)?;
        manifest.record_output(&root, "evaluate/topk_metrics.json")?;
    }

    let mut csv = String::from("task,metric,scope,variant,value,support,config_digest\n");
    for row in &csv_rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_atomic(&root.join("evaluate/metrics.csv"), csv.as_bytes())?;
    manifest.record_output(&root, "evaluate/metrics.csv")?;

    manifest.notes = notes.clone();
    manifest.save(&root)?;
    Ok(StageReport {
        stage: "evaluate",
        failures: 0,
        notes,
    })
}

/// Shortest-round-trip float formatting (matches JSON serialization).
fn format_value(v: f64) -> String {
    let mut s = serde_json::to_string(&v).unwrap_or_else(|_| v.to_string());
    if !s.contains('.') && !s.contains('e') && !s.contains("null") {
        s.push_str(".0");
    }
    s
}

fn mf_baseline_reports(
    cfg: &RunConfig,
    loaded: &LoadedCorpus,
    digest: &str,
) -> Result<Vec<MetricReport>> {
    let scale = cfg.rating_scale()?;
    let to_examples = |reviews: Vec<&Review>| -> Vec<(String, String, f64)> {
        reviews
            .iter()
            .map(|r| (r.user_id.clone(), r.item_id.clone(), r.rating as f64))
            .collect()
    };
    let train = to_examples(loaded.split.train_reviews(&loaded.corpus));
    let valid = to_examples(loaded.split.valid_reviews(&loaded.corpus));
    let model = train_mf(
        &train,
        (scale.min as f64, scale.max as f64),
        &cfg.cf.to_train_config(),
        (!valid.is_empty()).then_some(valid.as_slice()),
    )?;
    let pairs: Vec<(f64, f64)> = loaded
        .split
        .test_reviews(&loaded.corpus)
        .iter()
        .map(|r| (model.predict(&r.user_id, &r.item_id), r.rating as f64))
        .collect();
    let support = pairs.len();
    Ok(vec![
        MetricReport {
            metric: "rmse".to_string(),
            value: crate::eval::rmse(&pairs)?,
            support,
            subset: "total".to_string(),
            config_digest: digest.to_string(),
        },
        MetricReport {
            metric: "mae".to_string(),
            value: crate::eval::mae(&pairs)?,
            support,
            subset: "total".to_string(),
            config_digest: digest.to_string(),
        },
    ])
}

/// Recall and NDCG at each cutoff, for both the reranked order and the
/// generator's original order, averaged over users.
fn topk_metrics(
    lists: &[RankedList],
    testbed: &TopkTestbed,
    cutoffs: &[usize],
    digest: &str,
) -> TopkMetricsDoc {
    let mut rows = Vec::new();
    for &k in cutoffs {
        for metric in ["recall", "ndcg"] {
            for ordering in ["reranked", "generator"] {
                let mut total = 0.0;
                let mut users = 0usize;
                for list in lists {
                    let Some(relevant) = testbed.relevant.get(&list.user_id) else {
                        log::warn!(
                            "user {:?} has a ranking but no relevance set; skipped",
                            list.user_id
                        );
                        continue;
                    };
                    let ids: Vec<String> = match ordering {
                        "reranked" => list.item_ids().map(str::to_string).collect(),
                        _ => {
                            let mut items: Vec<_> = list.items.iter().collect();
                            items.sort_by_key(|i| i.generator_rank);
                            items.iter().map(|i| i.item_id.clone()).collect()
                        }
                    };
                    total += match metric {
                        "recall" => recall_at_k(&ids, relevant, k),
                        _ => ndcg_at_k(&ids, relevant, k),
                    };
                    users += 1;
                }
                let value = if users == 0 { 0.0 } else { total / users as f64 };
                rows.push(TopkMetricRow {
                    metric: metric.to_string(),
                    k,
                    ordering: ordering.to_string(),
                    value,
                    users,
                    config_digest: digest.to_string(),
                });
            }
        }
    }
    TopkMetricsDoc { rows }
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Aggregated run summary.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    /// Manifests of every stage that has run, keyed by stage name.
    pub stages: BTreeMap<String, StageManifest>,
    pub rating: Option<RatingMetricsDoc>,
    pub topk: Option<TopkMetricsDoc>,
}

pub fn run_report(cfg: &RunConfig) -> Result<StageReport> {
    let digest = cfg.digest()?;
    let root = cfg.run.out_dir.clone();
    let evaluate_manifest = require_stage(&root, "evaluate", &digest)?;

    let mut stages = BTreeMap::new();
    for stage in STAGES.iter().take(STAGES.len() - 1) {
        if let Ok(manifest) = load_stage_manifest(&root, stage) {
            stages.insert(stage.to_string(), manifest);
        }
    }

    let rating_path = root.join("evaluate/rating_metrics.json");
    let rating: Option<RatingMetricsDoc> = rating_path
        .exists()
        .then(|| load_json(&rating_path))
        .transpose()?;
    let topk_path = root.join("evaluate/topk_metrics.json");
    let topk: Option<TopkMetricsDoc> = topk_path
        .exists()
        .then(|| load_json(&topk_path))
        .transpose()?;

    let report = RunReport {
        config_digest: digest.clone(),
        stages,
        rating,
        topk,
    };
    let mut manifest = StageManifest::new("report", &digest);
    manifest.inputs = evaluate_manifest.outputs.clone();
    save_json(&root.join("report/report.json"), &report)?;
    manifest.record_output(&root, "report/report.json")?;
    write_atomic(
        &root.join("report/report.md"),
        render_report_md(&report).as_bytes(),
    )?;
    manifest.record_output(&root, "report/report.md")?;

    manifest.notes = vec![format!("stages recorded: {}", report.stages.len())];
    let notes = manifest.notes.clone();
    manifest.save(&root)?;
    Ok(StageReport {
        stage: "report",
        failures: 0,
        notes,
    })
}

fn render_report_md(report: &RunReport) -> String {
    let mut md = String::new();
    md.push_str("# Run report\n\n");
    md.push_str(&format!("Config digest: `{}`\n\n", report.config_digest));

    md.push_str("## Stages\n\n");
    md.push_str("| Stage | Outputs | Notes |\n|---|---|---|\n");
    for stage in STAGES.iter().take(STAGES.len() - 1) {
        if let Some(manifest) = report.stages.get(*stage) {
            md.push_str(&format!(
                "| {} | {} | {} |\n",
                stage,
                manifest
                    .outputs
                    .keys()
                    .map(String::as_str)
                    .collect::<Vec<_>>()
                    .join("<br>"),
                manifest.notes.join("; "),
            ));
        }
    }

    if let Some(rating) = &report.rating {
        md.push_str("\n## Rating prediction\n\n");
        md.push_str("| Metric | Subset | Variant | Value | Support |\n|---|---|---|---|---|\n");
        for row in &rating.model.reports {
            md.push_str(&format!(
                "| {} | {} | model | {} | {} |\n",
                row.metric,
                row.subset,
                format_value(row.value),
                row.support
            ));
        }
        if let Some(baseline) = &rating.mf_baseline {
            for row in baseline {
                md.push_str(&format!(
                    "| {} | {} | mf_baseline | {} | {} |\n",
                    row.metric,
                    row.subset,
                    format_value(row.value),
                    row.support
                ));
            }
        }
        if !rating.model.warnings.is_empty() {
            md.push_str("\nWarnings:\n");
            for w in &rating.model.warnings {
                md.push_str(&format!("- {w}\n"));
            }
        }
    }

    if let Some(topk) = &report.topk {
        md.push_str("\n## Top-k ranking\n\n");
        md.push_str("| Metric | k | Ordering | Value | Users |\n|---|---|---|---|---|\n");
        for row in &topk.rows {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                row.metric,
                row.k,
                row.ordering,
                format_value(row.value),
                row.users
            ));
        }
    }
    md
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::path::PathBuf;

    /// A small synthetic corpus: 12 users, 9 items, ratings that span
    /// the scale with enough 9-10 interactions for the balanced top-k
    /// testbed, plus item metadata.
    fn write_fixtures(dir: &Path) -> PathBuf {
        let mut reviews = String::new();
        let mut ts = 1_600_000_000i64;
        let mut push = |user: usize, item: usize, rating: i64, text: &str, ts: &mut i64| {
            *ts += 3600;
            reviews.push_str(&format!(
                "{{\"user_id\":\"u{user:02}\",\"item_id\":\"i{item}\",\"rating\":{rating},\
                 \"text\":\"{text}\",\"timestamp\":{ts},\"helpful_votes\":{}}}\n",
                (user * 7 + item) % 5
            ));
        };
        for user in 1..=12usize {
            for slot in 0..6usize {
                let item = (user + slot * 2) % 9 + 1;
                let rating = match slot {
                    0 => 9,
                    1 => 10,
                    2 => 9,
                    3 => 3 + (user % 5) as i64,
                    4 => 6,
                    _ => 2 + (user % 7) as i64,
                };
                let text = if user == 3 && slot == 4 {
                    String::new()
                } else {
                    format!("user {user} thoughts on item {item} slot {slot}")
                };
                push(user, item, rating, &text, &mut ts);
            }
        }
        fs::write(dir.join("reviews.jsonl"), reviews).unwrap();

        let mut items = String::from("item_id,title,description\n");
        for item in 1..=9 {
            items.push_str(&format!(
                "i{item},Title {item},A study of subject {item} with a steady pace.\n"
            ));
        }
        fs::write(dir.join("items.csv"), items).unwrap();

        fs::write(
            dir.join("script.json"),
            r#"{
  "rules": [
    {"match": {"intent": "preference_extraction"},
     "respond": {"text": "[Like]\n- crisp pacing\n[Dislike]\nNone."}},
    {"match": {"intent": "user_profile"},
     "respond": {"text": "[Like]\n- tight stories\n[Dislike]\n- filler"}},
    {"match": {"intent": "item_profile"},
     "respond": {"text": "[Like]\n- strong cast\n[Dislike]\nNone."}},
    {"match": {"intent": "reasoning_generation"},
     "respond": {"text": "The stated preferences line up with what the item offers."}},
    {"match": {"intent": "prediction"}, "derived_rating": {"seed": 7}}
  ]
}"#,
        )
        .unwrap();

        let config = dir.join("run.toml");
        fs::write(
            &config,
            r#"
[corpus]
reviews = "reviews.jsonl"
items = "items.csv"

[backend]
kind = "mock"
mock_script = "script.json"

[ranking]
candidates_n = 6
cutoffs = [3, 5]

[cf]
dim = 4
epochs = 30

[run]
out_dir = "out"
"#,
        )
        .unwrap();
        config
    }

    fn run_all(cfg: &RunConfig) {
        run_ingest(cfg).unwrap();
        run_split(cfg).unwrap();
        run_extract(cfg).unwrap();
        run_profile(cfg).unwrap();
        run_distill(cfg, None).unwrap();
        run_predict(cfg).unwrap();
        run_rerank(cfg).unwrap();
        run_evaluate(cfg, EvalTask::Both, None).unwrap();
        run_report(cfg).unwrap();
    }

    #[test]
    fn full_pipeline_produces_verified_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write_fixtures(dir.path())).unwrap();
        cfg.validate().unwrap();
        run_all(&cfg);

        let out = &cfg.run.out_dir;
        for stage in STAGES {
            for rel in stage_outputs(stage) {
                assert!(out.join(rel).exists(), "missing {rel}");
            }
            // Every manifest verifies cleanly after the full run.
            require_stage(out, stage, &cfg.digest().unwrap()).unwrap();
        }

        // Prediction rows cover the whole test split and carry the
        // decoded expectation.
        let rows: Vec<PredictionRow> =
            read_jsonl(&out.join("predict/predictions.jsonl")).unwrap();
        let split: SplitAssignment = load_json(&out.join("split/split.json")).unwrap();
        assert_eq!(rows.len(), split.test.len());
        assert!(rows.iter().all(|r| (1.0..=10.0).contains(&r.expected_rating)));
        assert!(rows.iter().all(|r| !r.fallback_used));

        // Rating metrics exist for the pooled set and the baseline.
        let rating: RatingMetricsDoc =
            load_json(&out.join("evaluate/rating_metrics.json")).unwrap();
        assert!(rating
            .model
            .reports
            .iter()
            .any(|r| r.metric == "rmse" && r.subset == "total"));
        assert!(rating.mf_baseline.is_some());

        // Top-k metrics cover both orderings at both cutoffs.
        let topk: TopkMetricsDoc = load_json(&out.join("evaluate/topk_metrics.json")).unwrap();
        assert_eq!(topk.rows.len(), 2 * 2 * 2);
        assert!(topk.rows.iter().all(|r| (0.0..=1.0).contains(&r.value)));

        // The CSV is an independent flat view with one header.
        let csv = fs::read_to_string(out.join("evaluate/metrics.csv")).unwrap();
        assert!(csv.starts_with("task,metric,scope,variant,value,support,config_digest\n"));
        assert!(csv.lines().count() > 8);

        let md = fs::read_to_string(out.join("report/report.md")).unwrap();
        assert!(md.contains("## Rating prediction"));
        assert!(md.contains("## Top-k ranking"));
    }

    #[test]
    fn missing_upstream_manifest_is_refused_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write_fixtures(dir.path())).unwrap();
        let err = run_split(&cfg).unwrap_err().to_string();
        assert!(err.contains("stage.json"), "{err}");
        assert!(err.contains("ingest"), "{err}");
    }

    #[test]
    fn stale_config_digest_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::load(&write_fixtures(dir.path())).unwrap();
        run_ingest(&cfg).unwrap();
        cfg.cf.seed += 1;
        let err = run_split(&cfg).unwrap_err().to_string();
        assert!(err.contains("config digest"), "{err}");
        assert!(err.contains("re-run"), "{err}");
    }

    #[test]
    fn tampered_artifact_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write_fixtures(dir.path())).unwrap();
        run_ingest(&cfg).unwrap();
        let corpus_path = cfg.run.out_dir.join("ingest/corpus.json");
        let mut text = fs::read_to_string(&corpus_path).unwrap();
        text.push(' ');
        fs::write(&corpus_path, text).unwrap();
        let err = run_split(&cfg).unwrap_err().to_string();
        assert!(err.contains("ingest/corpus.json"), "{err}");
        assert!(err.contains("changed"), "{err}");
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = write_fixtures(dir.path());
        let mut cfg_a = RunConfig::load(&config_path).unwrap();
        cfg_a.run.out_dir = dir.path().join("out_a");
        let mut cfg_b = RunConfig::load(&config_path).unwrap();
        cfg_b.run.out_dir = dir.path().join("out_b");
        run_all(&cfg_a);
        run_all(&cfg_b);

        let mut compared = 0usize;
        for stage in STAGES {
            let dir_a = cfg_a.run.out_dir.join(stage);
            for entry in fs::read_dir(&dir_a).unwrap() {
                let entry = entry.unwrap();
                if entry.file_type().unwrap().is_dir() {
                    // profile/store: compare its files too.
                    for inner in fs::read_dir(entry.path()).unwrap() {
                        let inner = inner.unwrap();
                        let rel = format!(
                            "{stage}/{}/{}",
                            entry.file_name().to_string_lossy(),
                            inner.file_name().to_string_lossy()
                        );
                        assert_identical(&cfg_a.run.out_dir, &cfg_b.run.out_dir, &rel);
                        compared += 1;
                    }
                } else {
                    let rel = format!("{stage}/{}", entry.file_name().to_string_lossy());
                    assert_identical(&cfg_a.run.out_dir, &cfg_b.run.out_dir, &rel);
                    compared += 1;
                }
            }
        }
        assert!(compared >= 19, "compared only {compared} files");
    }

    fn assert_identical(a: &Path, b: &Path, rel: &str) {
        let bytes_a = fs::read(a.join(rel)).unwrap();
        let bytes_b = fs::read(b.join(rel)).unwrap_or_else(|_| panic!("missing {rel} in second run"));
        assert_eq!(bytes_a, bytes_b, "artifact {rel} differs between runs");
    }

    #[test]
    fn evaluate_rejects_cutoffs_beyond_reranked_length() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write_fixtures(dir.path())).unwrap();
        run_ingest(&cfg).unwrap();
        run_split(&cfg).unwrap();
        run_extract(&cfg).unwrap();
        run_profile(&cfg).unwrap();
        run_rerank(&cfg).unwrap();
        let err = run_evaluate(&cfg, EvalTask::Topk, Some(&[50]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("cutoff 50"), "{err}");
    }

    #[test]
    fn distill_steps_filter_limits_exported_steps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write_fixtures(dir.path())).unwrap();
        run_ingest(&cfg).unwrap();
        run_split(&cfg).unwrap();
        run_extract(&cfg).unwrap();
        run_profile(&cfg).unwrap();
        run_distill(&cfg, Some(&["pe".to_string()])).unwrap();
        let manifest: crate::distill::DatasetManifest =
            load_json(&cfg.run.out_dir.join("distill/manifest.json")).unwrap();
        assert_eq!(manifest.counts.len(), 1);
        let text = fs::read_to_string(cfg.run.out_dir.join("distill/dataset.jsonl")).unwrap();
        assert!(text.contains("preference_extraction"));
        assert!(!text.contains("rating_prediction"));
    }
}
