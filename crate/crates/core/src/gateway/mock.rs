//! Deterministic scripted backend for offline runs and tests.
//!
//! A script is an ordered rule list; the first matching rule answers
//! the request. Rules either return fixed text (optionally with a
//! rating-digit score table) or synthesize a peaked score table from
//! the request digest (`derived_rating`), which gives every (user,
//! item) pair a stable pseudo-rating without enumerating pairs in the
//! script. Unmatched requests fail loudly with the request digest so
//! scripts can be extended.
//!
//! Script shape:
//!
//! ```json
//! {
//!   "supports_token_scores": true,
//!   "rules": [
//!     {"match": {"intent": "preference_extraction"},
//!      "respond": {"text": "[Like]\n- pacing\n[Dislike]\nNone."}},
//!     {"match": {"contains": "recommendation for this item"},
//!      "respond": {"text": "Reasoning: fits.\nPredicted User Rating: 7",
//!                  "rating_scores": {"7": -0.2, "6": -1.9}}},
//!     {"match": {"any": true}, "derived_rating": {"seed": 17}}
//!   ]
//! }
//! ```

use std::collections::BTreeMap;

use serde::Deserialize;

use super::{
    first_digit_token_after, tokenize, Backend, CompletionRequest, CompletionResult,
    TokenAlternative, TokenScore, RATING_MARKER,
};
use crate::util::{canonical_json, sha256_hex};
use crate::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Script {
    #[serde(default = "default_true")]
    supports_token_scores: bool,
    rules: Vec<Rule>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Rule {
    #[serde(rename = "match")]
    matcher: Matcher,
    #[serde(default)]
    respond: Option<Respond>,
    #[serde(default)]
    derived_rating: Option<DerivedRating>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Matcher {
    #[serde(default)]
    intent: Option<String>,
    #[serde(default)]
    contains: Option<String>,
    #[serde(default)]
    any: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Respond {
    text: String,
    /// Digit token → raw score; normalized into log-probabilities when
    /// emitted so result invariants (logprob ≤ 0) hold.
    #[serde(default)]
    rating_scores: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DerivedRating {
    seed: u64,
    /// Digit alphabet for the synthesized table.
    #[serde(default = "default_digits")]
    digits: String,
}

fn default_digits() -> String {
    "0123456789".to_string()
}

pub struct MockBackend {
    script: Script,
    id: String,
}

impl MockBackend {
    pub fn from_script_str(script_json: &str) -> Result<MockBackend> {
        let value: serde_json::Value = serde_json::from_str(script_json)?;
        let script: Script = serde_json::from_value(value.clone())?;
        for (i, rule) in script.rules.iter().enumerate() {
            let m = &rule.matcher;
            if m.intent.is_none() && m.contains.is_none() && !m.any {
                return Err(Error::Config(format!(
                    "mock script rule {}: matcher matches nothing (set intent, contains, or any)",
                    i
                )));
            }
            match (&rule.respond, &rule.derived_rating) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "mock script rule {}: exactly one of respond/derived_rating required",
                        i
                    )))
                }
            }
        }
        let id = format!("mock:{}", &sha256_hex(canonical_json(&value)?.as_bytes())[..12]);
        Ok(MockBackend { script, id })
    }

    pub fn from_path(path: &std::path::Path) -> Result<MockBackend> {
        MockBackend::from_script_str(&std::fs::read_to_string(path)?)
    }

    fn matches(&self, matcher: &Matcher, request: &CompletionRequest) -> bool {
        if let Some(intent) = &matcher.intent {
            if request.intent.as_deref() != Some(intent.as_str()) {
                return false;
            }
        }
        if let Some(needle) = &matcher.contains {
            if !request.messages.iter().any(|m| m.content.contains(needle)) {
                return false;
            }
        }
        matcher.intent.is_some() || matcher.contains.is_some() || matcher.any
    }

    fn result(
        &self,
        request: &CompletionRequest,
        text: String,
        table: Option<BTreeMap<String, f64>>,
    ) -> CompletionResult {
        let token_scores = if request.want_token_scores && self.script.supports_token_scores {
            Some(score_tokens(&text, table.as_ref()))
        } else {
            None
        };
        CompletionResult {
            text,
            token_scores,
            backend_id: self.id.clone(),
            cached: false,
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        for rule in &self.script.rules {
            if !self.matches(&rule.matcher, request) {
                continue;
            }
            if let Some(respond) = &rule.respond {
                return Ok(self.result(
                    request,
                    respond.text.clone(),
                    respond.rating_scores.clone(),
                ));
            }
            let derived = rule.derived_rating.as_ref().expect("validated rule");
            let (text, table) = derive_rating_response(request, derived)?;
            return Ok(self.result(request, text, Some(table)));
        }
        Err(Error::ScriptedMiss {
            digest: request.digest(&self.id)?,
        })
    }
}

/// Builds per-token scores for the text. Every token carries itself as
/// the only alternative at logprob −1e-4; when a rating table is given
/// and the text contains a rating digit after the marker, that position
/// instead carries the normalized table as its alternatives.
fn score_tokens(text: &str, table: Option<&BTreeMap<String, f64>>) -> Vec<TokenScore> {
    let tokens = tokenize(text);
    let rating_pos = table.and_then(|_| {
        first_digit_token_after(tokens.iter().map(|s| s.as_str()), RATING_MARKER)
    });
    tokens
        .into_iter()
        .enumerate()
        .map(|(position, token)| {
            if Some(position) == rating_pos {
                let alternatives = normalize_table(table.expect("rating_pos implies table"));
                let own = alternatives
                    .iter()
                    .find(|a| a.token == token.trim())
                    .map(|a| a.logprob)
                    .unwrap_or(-1e-4);
                TokenScore {
                    position,
                    logprob: own,
                    alternatives,
                    token,
                }
            } else {
                TokenScore {
                    position,
                    logprob: -1e-4,
                    alternatives: vec![TokenAlternative {
                        token: token.clone(),
                        logprob: -1e-4,
                    }],
                    token,
                }
            }
        })
        .collect()
}

/// Shifts raw scores by their log-sum-exp so they become genuine
/// log-probabilities (the softmax is shift-invariant, so downstream
/// decoding is unaffected), sorted non-increasing.
fn normalize_table(table: &BTreeMap<String, f64>) -> Vec<TokenAlternative> {
    let max = table.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + table.values().map(|s| (s - max).exp()).sum::<f64>().ln();
    let mut alts: Vec<TokenAlternative> = table
        .iter()
        .map(|(token, score)| TokenAlternative {
            token: token.clone(),
            logprob: score - lse,
        })
        .collect();
    alts.sort_by(|a, b| {
        b.logprob
            .partial_cmp(&a.logprob)
            .unwrap()
            .then_with(|| a.token.cmp(&b.token))
    });
    alts
}

/// Synthesizes a deterministic peaked score table and matching text
/// from the request content. Only the messages and intent feed the
/// digest, so decoding flags do not change the derived rating.
fn derive_rating_response(
    request: &CompletionRequest,
    config: &DerivedRating,
) -> Result<(String, BTreeMap<String, f64>)> {
    if config.digits.is_empty() {
        return Err(Error::Config("derived_rating.digits is empty".to_string()));
    }
    let digits: Vec<char> = config.digits.chars().collect();
    let key = format!(
        "{}\n{:?}\n{}",
        canonical_json(&request.messages)?,
        request.intent,
        config.seed
    );
    let digest = sha256_hex(key.as_bytes());
    let bytes = hex::decode(&digest).expect("hex digest");
    let peak = bytes[0] as usize % digits.len();
    let mut table = BTreeMap::new();
    for (i, d) in digits.iter().enumerate() {
        let distance = (i as f64 - peak as f64).abs();
        let jitter = bytes[1 + (i % 30)] as f64 / 1024.0;
        table.insert(d.to_string(), -0.25 - 1.1 * distance - jitter);
    }
    let text = format!(
        "Reasoning: The alignment between the user's preferences and the item's characteristics points to this score (case {}).\n{} {}",
        &digest[..8],
        RATING_MARKER,
        digits[peak]
    );
    Ok((text, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Message;

    fn request(text: &str) -> CompletionRequest {
        CompletionRequest::new(vec![Message::user(text)])
    }

    #[test]
    fn wildcard_rule_answers_everything() {
        let mock = MockBackend::from_script_str(
            r#"{"rules":[{"match":{"any":true},"respond":{"text":"None."}}]}"#,
        )
        .unwrap();
        assert_eq!(mock.complete(&request("a")).unwrap().text, "None.");
        assert_eq!(mock.complete(&request("b")).unwrap().text, "None.");
    }

    #[test]
    fn intent_dispatch_selects_distinct_outputs() {
        let mock = MockBackend::from_script_str(
            r#"{"rules":[
                {"match":{"intent":"preference_extraction"},"respond":{"text":"EXTRACT"}},
                {"match":{"intent":"user_profile"},"respond":{"text":"PROFILE"}}
            ]}"#,
        )
        .unwrap();
        let r1 = request("x").with_intent("preference_extraction");
        let r2 = request("x").with_intent("user_profile");
        assert_eq!(mock.complete(&r1).unwrap().text, "EXTRACT");
        assert_eq!(mock.complete(&r2).unwrap().text, "PROFILE");
    }

    #[test]
    fn unmatched_request_reports_digest() {
        let mock = MockBackend::from_script_str(
            r#"{"rules":[{"match":{"intent":"never"},"respond":{"text":"x"}}]}"#,
        )
        .unwrap();
        match mock.complete(&request("y")) {
            Err(Error::ScriptedMiss { digest }) => assert_eq!(digest.len(), 64),
            other => panic!("expected scripted miss, got {:?}", other.map(|r| r.text)),
        }
    }

    #[test]
    fn score_table_lands_on_rating_token() {
        let mock = MockBackend::from_script_str(
            r#"{"rules":[{"match":{"any":true},"respond":{
                "text":"Reasoning: ok.\nPredicted User Rating: 7",
                "rating_scores":{"6":-2.0,"7":-0.2,"8":-3.0}
            }}]}"#,
        )
        .unwrap();
        let req = request("predict").with_token_scores(10);
        let out = mock.complete(&req).unwrap();
        let scores = out.token_scores.unwrap();
        let pos = scores
            .iter()
            .position(|ts| ts.token.trim() == "7" && ts.alternatives.len() == 3)
            .expect("rating position carries the table");
        let alts = &scores[pos].alternatives;
        // Non-increasing, all ≤ 0, and the emitted digit on top.
        assert!(alts.windows(2).all(|w| w[0].logprob >= w[1].logprob));
        assert!(alts.iter().all(|a| a.logprob <= 0.0));
        assert_eq!(alts[0].token, "7");
        // Normalization makes them true log-probabilities.
        let mass: f64 = alts.iter().map(|a| a.logprob.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn token_scores_absent_when_unsupported() {
        let mock = MockBackend::from_script_str(
            r#"{"supports_token_scores":false,
                "rules":[{"match":{"any":true},"respond":{"text":"Predicted User Rating: 4"}}]}"#,
        )
        .unwrap();
        let out = mock.complete(&request("x").with_token_scores(10)).unwrap();
        assert!(out.token_scores.is_none());
        assert!(out.require_token_scores().is_err());
    }

    #[test]
    fn derived_rating_is_deterministic_and_content_sensitive() {
        let mock = MockBackend::from_script_str(
            r#"{"rules":[{"match":{"any":true},"derived_rating":{"seed":17}}]}"#,
        )
        .unwrap();
        let a1 = mock.complete(&request("pair A").with_token_scores(10)).unwrap();
        let a2 = mock.complete(&request("pair A").with_token_scores(10)).unwrap();
        let b = mock.complete(&request("pair B").with_token_scores(10)).unwrap();
        assert_eq!(a1.text, a2.text);
        assert_ne!(a1.text, b.text);
        assert!(a1.text.contains(RATING_MARKER));
        // The table covers the whole digit alphabet.
        let scores = a1.token_scores.unwrap();
        let rating = scores.iter().find(|t| t.alternatives.len() == 10).unwrap();
        assert!(rating.alternatives.iter().all(|a| a.logprob <= 0.0));
    }

    #[test]
    fn contains_matcher_inspects_message_content() {
        let mock = MockBackend::from_script_str(
            r#"{"rules":[
                {"match":{"contains":"magic word"},"respond":{"text":"found"}},
                {"match":{"any":true},"respond":{"text":"default"}}
            ]}"#,
        )
        .unwrap();
        assert_eq!(mock.complete(&request("has magic word here")).unwrap().text, "found");
        assert_eq!(mock.complete(&request("nothing")).unwrap().text, "default");
    }

    #[test]
    fn invalid_scripts_rejected() {
        assert!(MockBackend::from_script_str(r#"{"rules":[{"match":{}}]}"#).is_err());
        assert!(MockBackend::from_script_str(
            r#"{"rules":[{"match":{"any":true}}]}"#
        )
        .is_err());
        assert!(MockBackend::from_script_str(
            r#"{"rules":[{"match":{"any":true},
                "respond":{"text":"a"},"derived_rating":{"seed":1}}]}"#
        )
        .is_err());
    }

    #[test]
    fn backend_id_tracks_script_content() {
        let a = MockBackend::from_script_str(
            r#"{"rules":[{"match":{"any":true},"respond":{"text":"1"}}]}"#,
        )
        .unwrap();
        let b = MockBackend::from_script_str(
            r#"{"rules":[{"match":{"any":true},"respond":{"text":"2"}}]}"#,
        )
        .unwrap();
        assert_ne!(a.id(), b.id());
        assert!(a.id().starts_with("mock:"));
    }
}
