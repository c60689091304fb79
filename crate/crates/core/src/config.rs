//! Run configuration: a TOML file describing one end-to-end run.
//!
//! Every stage of the pipeline is parameterized by a [`RunConfig`]. The
//! config's [`RunConfig::digest`] is stamped into every artifact manifest so
//! that downstream stages can refuse to consume artifacts produced under a
//! different configuration.
//!
//! The digest covers *semantic* inputs only: numeric parameters, strategies,
//! seeds, prompt-template contents, and (for the scripted backend) the script
//! file's contents. Filesystem locations are deliberately excluded so that
//! relocating a corpus or output directory does not invalidate artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cf::TrainConfig;
use crate::error::{Error, Result};
use crate::gateway::TemplateSet;
use crate::profiling::SelectionStrategy;
use crate::scale::RatingScale;

/// Where the review corpus lives and how to read it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Review file (JSONL or CSV, sniffed from the extension unless
    /// `reviews_format` is set).
    pub reviews: PathBuf,
    /// Force a review format: "jsonl" or "csv".
    #[serde(default)]
    pub reviews_format: Option<String>,
    /// Optional item-metadata file (JSONL or CSV).
    #[serde(default)]
    pub items: Option<PathBuf>,
    /// Force an item-metadata format: "jsonl" or "csv".
    #[serde(default)]
    pub items_format: Option<String>,
}

/// Integer rating scale for the corpus plus the digit-token mapping used
/// when decoding model output.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub min: i64,
    pub max: i64,
    /// Offset applied when mapping a rating to the single digit the model is
    /// asked to emit (`digit = rating + token_offset`). A 1-10 scale with
    /// offset -1 maps onto digits 0-9.
    #[serde(default)]
    pub token_offset: i64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig { min: 1, max: 10, token_offset: -1 }
    }
}

impl ScaleConfig {
    pub fn to_scale(self) -> Result<RatingScale> {
        let scale = RatingScale {
            min: self.min,
            max: self.max,
            token_offset: self.token_offset,
        };
        scale.validate()?;
        Ok(scale)
    }
}

/// Corpus preprocessing applied during ingest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// k-core filtering threshold; 0 disables filtering.
    pub kcore: usize,
    /// Train/valid/test ratios for the temporal split. Must sum to 1.
    pub split_ratios: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { kcore: 0, split_ratios: [0.8, 0.1, 0.1] }
    }
}

/// Profile-construction settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    /// Review-selection strategy for item profiles: "all", "helpful:N", or
    /// "neighbor:K". User profiles always use every train review the user
    /// wrote.
    pub item_strategy: String,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig { item_strategy: "all".to_string() }
    }
}

/// Instruction-dataset export settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Which steps to export: any subset of "pe" (preference extraction),
    /// "pc" (profile construction), "rp" (rating prediction).
    pub steps: Vec<String>,
    /// Rating (as the digit shown to the model) at or above which the
    /// reasoning teacher is told the user would be recommended the item.
    pub recommend_threshold: String,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: vec!["pe".into(), "pc".into(), "rp".into()],
            recommend_threshold: "3".to_string(),
        }
    }
}

/// Candidate generation and reranking settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankingConfig {
    /// Candidate generator: "bpr" (train a pairwise model on the held-in
    /// half of the balanced testbed) or "external" (read precomputed lists).
    pub generator: String,
    /// Candidate list file for `generator = "external"`: JSONL rows of
    /// `{user_id, items: [[item_id, score], ...]}`.
    pub external_candidates: Option<PathBuf>,
    /// Candidates retrieved per user before reranking.
    pub candidates_n: usize,
    /// Cutoffs evaluated for top-k metrics. The reranked list is truncated
    /// to the largest cutoff.
    pub cutoffs: Vec<usize>,
    /// Seed for the per-user shuffle that builds the balanced testbed.
    pub testbed_seed: u64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            generator: "bpr".to_string(),
            external_candidates: None,
            candidates_n: 20,
            cutoffs: vec![5, 10, 15, 20],
            testbed_seed: 17,
        }
    }
}

/// Hyperparameters shared by the matrix-factorization trainers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for CfConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        CfConfig {
            dim: t.dim,
            learning_rate: t.learning_rate,
            regularization: t.regularization,
            epochs: t.epochs,
            patience: t.patience,
            seed: t.seed,
        }
    }
}

impl CfConfig {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            learning_rate: self.learning_rate,
            regularization: self.regularization,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

/// Language-model backend selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    /// "mock" (scripted, offline) or "http" (OpenAI-compatible endpoint).
    pub kind: String,
    /// Script file for the mock backend.
    pub mock_script: Option<PathBuf>,
    /// Chat-completions URL for the HTTP backend.
    pub url: Option<String>,
    /// Model name sent to the HTTP backend.
    pub model: Option<String>,
    /// Environment variable holding the API key. The key itself never
    /// appears in config files or artifacts.
    pub credential_env: String,
    pub timeout_secs: u64,
    /// Retry attempts for transient failures.
    pub retries: usize,
    pub backoff_ms: u64,
    /// Cache raw model responses under the output directory so repeated
    /// stages do not re-issue identical requests.
    pub cache: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: "mock".to_string(),
            mock_script: None,
            url: None,
            model: None,
            credential_env: "REVREC_API_KEY".to_string(),
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 250,
            cache: true,
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Warn when fewer than this fraction of test reviews received a
    /// prediction.
    pub coverage_threshold: f64,
    /// Also train a bias-aware matrix-factorization baseline on the train
    /// split and report its rating metrics alongside the model's.
    pub mf_baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { coverage_threshold: 0.95, mf_baseline: true }
    }
}

/// Output location and parallelism.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: PathBuf,
    /// Worker threads for prediction and reranking. 1 keeps every stage
    /// fully sequential.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out_dir: PathBuf::from("out"), workers: 1 }
    }
}

/// Optional prompt-template overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplatesConfig {
    /// Directory whose `*.txt` files override the built-in templates.
    pub dir: Option<PathBuf>,
}

/// Fully resolved configuration for one pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub scale: ScaleConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub profiles: ProfileConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub ranking: RankingConfig,
    #[serde(default)]
    pub cf: CfConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub templates: TemplatesConfig,
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl RunConfig {
    /// Parse a TOML config file. Relative paths inside the file are resolved
    /// against the file's own directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Storage(format!("read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("parse {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        resolve(&base, &mut cfg.corpus.reviews);
        if let Some(items) = cfg.corpus.items.as_mut() {
            resolve(&base, items);
        }
        if let Some(script) = cfg.backend.mock_script.as_mut() {
            resolve(&base, script);
        }
        if let Some(lists) = cfg.ranking.external_candidates.as_mut() {
            resolve(&base, lists);
        }
        if let Some(dir) = cfg.templates.dir.as_mut() {
            resolve(&base, dir);
        }
        resolve(&base, &mut cfg.run.out_dir);
        Ok(cfg)
    }

    /// Parsed item-profile selection strategy.
    pub fn item_strategy(&self) -> Result<SelectionStrategy> {
        self.profiles.item_strategy.parse()
    }

    /// The rating scale, validated.
    pub fn rating_scale(&self) -> Result<RatingScale> {
        self.scale.to_scale()
    }

    /// Prompt templates with any configured overrides applied.
    pub fn template_set(&self) -> Result<TemplateSet> {
        match &self.templates.dir {
            Some(dir) => TemplateSet::with_overrides(dir),
            None => Ok(TemplateSet::embedded()),
        }
    }

    /// Check ranges, referenced files, and cross-field requirements.
    pub fn validate(&self) -> Result<()> {
        self.rating_scale()?;
        self.item_strategy()?;
        if !self.corpus.reviews.exists() {
            return Err(Error::Config(format!(
                "review file not found: {}",
                self.corpus.reviews.display()
            )));
        }
        if let Some(items) = &self.corpus.items {
            if !items.exists() {
                return Err(Error::Config(format!(
                    "item metadata file not found: {}",
                    items.display()
                )));
            }
        }
        let ratio_sum: f64 = self.preprocess.split_ratios.iter().sum();
        if self.preprocess.split_ratios.iter().any(|r| *r < 0.0)
            || (ratio_sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split_ratios must be non-negative and sum to 1 (got {:?})",
                self.preprocess.split_ratios
            )));
        }
        for step in &self.distill.steps {
            if !matches!(step.as_str(), "pe" | "pc" | "rp") {
                return Err(Error::Config(format!(
                    "unknown distill step {step:?} (expected pe, pc, or rp)"
                )));
            }
        }
        if self.distill.recommend_threshold.trim().is_empty() {
            return Err(Error::Config("recommend_threshold must be non-empty".into()));
        }
        match self.ranking.generator.as_str() {
            "bpr" => {}
            "external" => match &self.ranking.external_candidates {
                Some(path) if path.exists() => {}
                Some(path) => {
                    return Err(Error::Config(format!(
                        "external candidate file not found: {}",
                        path.display()
                    )));
                }
                None => {
                    return Err(Error::Config(
                        "generator \"external\" requires ranking.external_candidates".into(),
                    ));
                }
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown candidate generator {other:?} (expected \"bpr\" or \"external\")"
                )));
            }
        }
        if self.ranking.candidates_n == 0 {
            return Err(Error::Config("candidates_n must be at least 1".into()));
        }
        if self.ranking.cutoffs.is_empty() {
            return Err(Error::Config("at least one top-k cutoff is required".into()));
        }
        if self.ranking.cutoffs.contains(&0) {
            return Err(Error::Config("top-k cutoffs must be at least 1".into()));
        }
        if let Some(k) = self
            .ranking
            .cutoffs
            .iter()
            .find(|k| **k > self.ranking.candidates_n)
        {
            return Err(Error::Config(format!(
                "cutoff {k} exceeds candidates_n {}",
                self.ranking.candidates_n
            )));
        }
        if self.cf.dim == 0 || self.cf.epochs == 0 {
            return Err(Error::Config("cf.dim and cf.epochs must be at least 1".into()));
        }
        if !self.cf.learning_rate.is_finite()
            || self.cf.learning_rate <= 0.0
            || self.cf.regularization < 0.0
        {
            return Err(Error::Config(
                "cf.learning_rate must be positive and cf.regularization non-negative".into(),
            ));
        }
        match self.backend.kind.as_str() {
            "mock" => match &self.backend.mock_script {
                Some(script) if script.exists() => {}
                Some(script) => {
                    return Err(Error::Config(format!(
                        "mock script not found: {}",
                        script.display()
                    )));
                }
                None => {
                    return Err(Error::Config(
                        "backend \"mock\" requires backend.mock_script".into(),
                    ));
                }
            },
            "http" => {
                if self.backend.url.is_none() || self.backend.model.is_none() {
                    return Err(Error::Config(
                        "backend \"http\" requires backend.url and backend.model".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown backend {other:?} (expected \"mock\" or \"http\")"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.eval.coverage_threshold) {
            return Err(Error::Config(
                "eval.coverage_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.run.workers == 0 {
            return Err(Error::Config("run.workers must be at least 1".into()));
        }
        if let Some(dir) = &self.templates.dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "template override directory not found: {}",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    /// Content digest of everything that can change pipeline output.
    ///
    /// Covers numeric parameters, strategies, seeds, the prompt-template
    /// texts, and the scripted backend's script contents (or the HTTP
    /// backend's URL and model name). Excludes file locations, worker
    /// counts, cache and retry settings: none of those change what a
    /// successful run produces.
    pub fn digest(&self) -> Result<String> {
        let templates = self.template_set()?;
        let mut semantic: BTreeMap<String, serde_json::Value> = BTreeMap::new();
        let mut put = |key: &str, value: serde_json::Value| {
            semantic.insert(key.to_string(), value);
        };
        put("scale", serde_json::json!([self.scale.min, self.scale.max, self.scale.token_offset]));
        put("kcore", serde_json::json!(self.preprocess.kcore));
        put("split_ratios", serde_json::json!(self.preprocess.split_ratios));
        put("item_strategy", serde_json::json!(self.profiles.item_strategy));
        // distill.steps and ranking.cutoffs are invocation filters, not run
        // identity: steps select which terminal export sets to build, and
        // cutoffs only slice already-reranked lists at evaluation time.
        put("recommend_threshold", serde_json::json!(self.distill.recommend_threshold));
        put("generator", serde_json::json!(self.ranking.generator));
        put("candidates_n", serde_json::json!(self.ranking.candidates_n));
        put("testbed_seed", serde_json::json!(self.ranking.testbed_seed));
        put(
            "cf",
            serde_json::json!({
                "dim": self.cf.dim,
                "learning_rate": self.cf.learning_rate,
                "regularization": self.cf.regularization,
                "epochs": self.cf.epochs,
                "patience": self.cf.patience,
                "seed": self.cf.seed,
            }),
        );
        put("backend_kind", serde_json::json!(self.backend.kind));
        match self.backend.kind.as_str() {
            "mock" => {
                let script = self.backend.mock_script.as_ref().ok_or_else(|| {
                    Error::Config("backend \"mock\" requires backend.mock_script".into())
                })?;
                let bytes = std::fs::read(script).map_err(|e| {
                    Error::Storage(format!("read mock script {}: {e}", script.display()))
                })?;
                put("mock_script_sha256", serde_json::json!(hex::encode(Sha256::digest(&bytes))));
            }
            _ => {
                put("backend_url", serde_json::json!(self.backend.url));
                put("backend_model", serde_json::json!(self.backend.model));
            }
        }
        put("coverage_threshold", serde_json::json!(self.eval.coverage_threshold));
        put("mf_baseline", serde_json::json!(self.eval.mf_baseline));
        put("templates", serde_json::json!(templates.checksums()));
        if let Some(ext) = &self.ranking.external_candidates {
            if self.ranking.generator == "external" {
                let bytes = std::fs::read(ext).map_err(|e| {
                    Error::Storage(format!("read candidate file {}: {e}", ext.display()))
                })?;
                put(
                    "external_candidates_sha256",
                    serde_json::json!(hex::encode(Sha256::digest(&bytes))),
                );
            }
        }
        let canonical = serde_json::to_string(&semantic)
            .map_err(|e| Error::Storage(format!("serialize digest fields: {e}")))?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}
