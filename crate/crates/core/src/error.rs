//! Unified error type for the pipeline.
//!
//! Every fallible public operation returns [`Result`]. Variants carry
//! enough context (line numbers, request digests, attempt counts) for a
//! batch run to report actionable per-record failures without panicking.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A malformed record in an input file. `line` is 1-based.
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    /// Input format could not be recognized from the path or content.
    #[error("unrecognized input format: {0}")]
    UnknownFormat(String),

    /// Invalid or inconsistent configuration.
    #[error("config: {0}")]
    Config(String),

    /// A template placeholder had no binding at render time.
    #[error("template {template}: no binding for placeholder {{{placeholder}}}")]
    MissingBinding {
        template: String,
        placeholder: String,
    },

    /// A binding named a placeholder outside the known set.
    #[error("template {template}: unknown placeholder {{{placeholder}}}")]
    UnknownPlaceholder {
        template: String,
        placeholder: String,
    },

    /// Backend transport failure after exhausting retries.
    #[error("backend transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    /// The backend answered but provided no per-token scores where
    /// the caller required them.
    #[error("backend response carries no token scores: {0}")]
    TokenScoresUnavailable(String),

    /// A mock backend received a request matching none of its rules.
    #[error("mock backend: no rule matched request (digest {digest})")]
    ScriptedMiss { digest: String },

    /// Structured text (preference markup, completion output) failed to
    /// parse. `raw` is a short excerpt of the offending input.
    #[error("parse: {message} (input: {raw:?})")]
    Parse { message: String, raw: String },

    /// Profile store or cache corruption.
    #[error("storage: {0}")]
    Storage(String),

    /// Model training failed (divergence, empty data).
    #[error("training: {0}")]
    Train(String),

    /// Evaluation protocol violation.
    #[error("evaluation: {0}")]
    Eval(String),

    /// A single rating prediction failed; carries the pair for batch
    /// reports.
    #[error("prediction for user {user} item {item}: {source}")]
    Prediction {
        user: String,
        item: String,
        #[source]
        source: Box<Error>,
    },

    /// A profile build failed; carries the subject for batch reports.
    #[error("profile build for {subject}: {source}")]
    Profile {
        subject: String,
        #[source]
        source: Box<Error>,
    },

    /// Pipeline stage sequencing problem (missing manifest, digest
    /// mismatch).
    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an error with the (user, item) pair it occurred for.
    pub fn for_pair(self, user: &str, item: &str) -> Error {
        Error::Prediction {
            user: user.to_string(),
            item: item.to_string(),
            source: Box::new(self),
        }
    }

    /// Wraps an error with the profile subject it occurred for.
    pub fn for_subject(self, subject: &str) -> Error {
        Error::Profile {
            subject: subject.to_string(),
            source: Box::new(self),
        }
    }
}
