//! Chat-completion gateway: byte-exact prompt templates, a pluggable
//! backend abstraction with retries and an on-disk response cache, and
//! a deterministic scripted mock so the whole pipeline runs offline.
//!
//! Token scores are modeled as log-probabilities with per-position
//! alternatives. A softmax over the rating-digit tokens is invariant to
//! the shared normalizer, so renormalized top-k log-probabilities are
//! equivalent to raw scores whenever every digit token is captured; the
//! reported coverage mass quantifies the gap when some are not.

mod cache;
mod http;
mod mock;
mod template;

pub use cache::ResponseCache;
pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::MockBackend;
pub use template::{TemplateSet, PLACEHOLDERS, TEMPLATE_IDS};

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Literal tag that precedes the rating digit in completions.
pub const RATING_MARKER: &str = "Predicted User Rating:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Message {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Message {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// One chat-completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub want_token_scores: bool,
    /// Alternatives requested per position; must cover the rating digit
    /// set when `want_token_scores` is used for rating decoding.
    pub top_alternatives: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    /// Optional caller intent (a template id). Mocks dispatch on it and
    /// it participates in the cache key; HTTP backends do not send it.
    pub intent: Option<String>,
}

impl CompletionRequest {
    pub fn new(messages: Vec<Message>) -> CompletionRequest {
        CompletionRequest {
            messages,
            want_token_scores: false,
            top_alternatives: 0,
            temperature: 0.0,
            max_tokens: 1024,
            intent: None,
        }
    }

    pub fn with_intent(mut self, intent: impl Into<String>) -> CompletionRequest {
        self.intent = Some(intent.into());
        self
    }

    pub fn with_token_scores(mut self, top_alternatives: usize) -> CompletionRequest {
        self.want_token_scores = true;
        self.top_alternatives = top_alternatives;
        self
    }

    /// Canonical digest of this request, used for cache keys and
    /// scripted-miss reports.
    pub fn digest(&self, backend_id: &str) -> Result<String> {
        let body = crate::util::canonical_json(self)?;
        Ok(crate::util::sha256_hex(
            format!("{}\n{}", backend_id, body).as_bytes(),
        ))
    }
}

/// A lower-ranked candidate token at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAlternative {
    pub token: String,
    pub logprob: f64,
}

/// Scores for one generated token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub position: usize,
    pub token: String,
    pub logprob: f64,
    /// Non-increasing by logprob.
    pub alternatives: Vec<TokenAlternative>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub token_scores: Option<Vec<TokenScore>>,
    pub backend_id: String,
    pub cached: bool,
}

impl CompletionResult {
    /// Token scores or an explicit capability error; callers that can
    /// fall back to integer parsing catch the error.
    pub fn require_token_scores(&self) -> Result<&[TokenScore]> {
        self.token_scores.as_deref().ok_or_else(|| {
            Error::TokenScoresUnavailable(format!("backend {}", self.backend_id))
        })
    }
}

/// A completion provider. Implementations must be deterministic at
/// temperature 0 for the pipeline's reproducibility guarantees.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult>;
}

/// Front door for all completion traffic: caching plus retry with
/// exponential backoff around a single backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    retries: usize,
    backoff: Duration,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Gateway {
        Gateway {
            backend,
            cache: None,
            retries: 3,
            backoff: Duration::from_millis(250),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Gateway {
        self.cache = Some(cache);
        self
    }

    pub fn with_retries(mut self, retries: usize, backoff: Duration) -> Gateway {
        self.retries = retries.max(1);
        self.backoff = backoff;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Issues a completion, consulting the cache first. Transport
    /// errors are retried with exponential backoff; other errors are
    /// not retryable.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let key = request.digest(self.backend.id())?;
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(&key)? {
                hit.cached = true;
                return Ok(hit);
            }
        }
        let mut attempt = 0usize;
        let result = loop {
            attempt += 1;
            match self.backend.complete(request) {
                Ok(r) => break r,
                Err(Error::Transport { message, .. }) if attempt < self.retries => {
                    let wait = self.backoff * 2u32.saturating_pow(attempt as u32 - 1);
                    log::warn!(
                        "transport failure (attempt {}/{}): {}; retrying in {:?}",
                        attempt,
                        self.retries,
                        message,
                        wait
                    );
                    std::thread::sleep(wait);
                }
                Err(Error::Transport { message, .. }) => {
                    return Err(Error::Transport {
                        attempts: attempt,
                        message,
                    });
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(cache) = &self.cache {
            cache.put(&key, &result)?;
        }
        Ok(result)
    }
}

/// Splits text into tokens: each token is a maximal run of
/// non-whitespace characters with its preceding whitespace attached, so
/// concatenating the tokens reproduces the text exactly.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if in_word {
                tokens.push(std::mem::take(&mut current));
                in_word = false;
            }
            current.push(ch);
        } else {
            in_word = true;
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Index of the first token after the marker whose trimmed content is a
/// single ASCII digit. The marker is matched on the running
/// concatenation of tokens, so it may span token boundaries.
pub fn first_digit_token_after<'a>(
    tokens: impl IntoIterator<Item = &'a str>,
    marker: &str,
) -> Option<usize> {
    let mut acc = String::new();
    let mut marker_done = false;
    for (idx, tok) in tokens.into_iter().enumerate() {
        if marker_done {
            let t = tok.trim();
            if t.len() == 1 && t.as_bytes()[0].is_ascii_digit() {
                return Some(idx);
            }
        } else {
            acc.push_str(tok);
            if acc.contains(marker) {
                marker_done = true;
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn tokenize_preserves_text() {
        let text = "Reasoning: solid match.\nPredicted User Rating: 7";
        let tokens = tokenize(text);
        assert_eq!(tokens.concat(), text);
        assert!(tokens.contains(&" 7".to_string()));
    }

    #[test]
    fn tokenize_attaches_leading_whitespace() {
        assert_eq!(tokenize("a b"), vec!["a", " b"]);
        assert_eq!(tokenize("  a\n\nb "), vec!["  a", "\n\nb", " "]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn rating_token_located_after_marker() {
        let text = "Reasoning: the 3 acts work.\nPredicted User Rating: 7";
        let tokens = tokenize(text);
        let idx = first_digit_token_after(tokens.iter().map(|s| s.as_str()), RATING_MARKER)
            .expect("digit found");
        assert_eq!(tokens[idx].trim(), "7");
        // The "3" inside the reasoning is not picked up.
        assert!(tokens[..idx].concat().contains(RATING_MARKER));
    }

    #[test]
    fn rating_token_absent_when_no_marker() {
        let tokens = tokenize("no rating here 5");
        assert_eq!(
            first_digit_token_after(tokens.iter().map(|s| s.as_str()), RATING_MARKER),
            None
        );
    }

    struct Flaky {
        failures: AtomicUsize,
    }

    impl Backend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }

        fn complete(&self, _request: &CompletionRequest) -> Result<CompletionResult> {
            if self.failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| {
                if n > 0 {
                    Some(n - 1)
                } else {
                    None
                }
            }).is_ok()
            {
                return Err(Error::Transport {
                    attempts: 1,
                    message: "connection reset".to_string(),
                });
            }
            Ok(CompletionResult {
                text: "ok".to_string(),
                token_scores: None,
                backend_id: "flaky".to_string(),
                cached: false,
            })
        }
    }

    #[test]
    fn transport_errors_are_retried() {
        let gw = Gateway::new(Arc::new(Flaky {
            failures: AtomicUsize::new(2),
        }))
        .with_retries(3, Duration::from_millis(0));
        let req = CompletionRequest::new(vec![Message::user("hi")]);
        let out = gw.complete(&req).unwrap();
        assert_eq!(out.text, "ok");
    }

    #[test]
    fn retries_exhaust_with_attempt_count() {
        let gw = Gateway::new(Arc::new(Flaky {
            failures: AtomicUsize::new(10),
        }))
        .with_retries(3, Duration::from_millis(0));
        let req = CompletionRequest::new(vec![Message::user("hi")]);
        match gw.complete(&req) {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {:?}", other.map(|r| r.text)),
        }
    }

    #[test]
    fn request_digest_depends_on_intent_and_backend() {
        let base = CompletionRequest::new(vec![Message::user("hi")]);
        let tagged = base.clone().with_intent("preference_extraction");
        assert_ne!(
            base.digest("b").unwrap(),
            tagged.digest("b").unwrap()
        );
        assert_ne!(base.digest("b1").unwrap(), base.digest("b2").unwrap());
        assert_eq!(base.digest("b").unwrap(), base.digest("b").unwrap());
    }
}
