//! Rating prediction with reasoning.
//!
//! Assembles the two-message prediction prompt, parses the completion
//! into reasoning text plus an integer rating, and — when the backend
//! exposes per-token scores — decodes a full probability distribution
//! over the rating scale by softmaxing the digit-token scores at the
//! rating position. The reported rating is then the distribution's
//! expected value, a continuous quantity strictly more informative
//! than the argmax integer.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::gateway::{
    first_digit_token_after, CompletionRequest, Gateway, Message, TemplateSet, TokenAlternative,
    RATING_MARKER,
};
use crate::{Error, RatingScale, Result};

/// Marker preceding the free-text reasoning in a completion.
pub const REASONING_MARKER: &str = "Reasoning:";

/// Sentinel bound into the prompt when an item has no description.
pub const NO_DESCRIPTION: &str = "(no description available)";

/// How many alternatives to request per sampled token; ample room for
/// every scale digit.
const TOP_ALTERNATIVES: usize = 20;

/// Probabilities over the integer ratings of a scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingDistribution {
    /// rating → probability; sums to 1; absent digits hold 0.
    pub probabilities: BTreeMap<i64, f64>,
    /// Total probability mass the backend assigned to the scale's
    /// digit tokens (from raw scores, before renormalization). Values
    /// near 1 mean the softmax lost almost nothing to truncation.
    pub coverage_mass: f64,
}

/// One scored (user, item) prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub user_id: String,
    pub item_id: String,
    pub reasoning: String,
    pub parsed_rating: Option<i64>,
    pub expected_rating: f64,
    pub distribution: Option<RatingDistribution>,
    /// True when token scores were unavailable and `expected_rating`
    /// fell back to the parsed integer.
    pub fallback_used: bool,
    pub coverage_mass: Option<f64>,
}

/// Softmax over the scale's digit tokens among `alternatives`. Digits
/// that never appear contribute zero probability; if none appear the
/// backend effectively provided no usable scores.
pub fn rating_distribution(
    alternatives: &[TokenAlternative],
    scale: RatingScale,
) -> Result<RatingDistribution> {
    scale.validate()?;
    let mut scores: BTreeMap<i64, f64> = BTreeMap::new();
    for alt in alternatives {
        let trimmed = alt.token.trim();
        let mut chars = trimmed.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            continue;
        };
        let Ok(rating) = scale.rating_for(c) else {
            continue;
        };
        // First occurrence wins: backends list alternatives by rank.
        scores.entry(rating).or_insert(alt.logprob);
    }
    if scores.is_empty() {
        return Err(Error::TokenScoresUnavailable(format!(
            "no rating-digit tokens among {} alternatives",
            alternatives.len()
        )));
    }
    let coverage_mass = scores.values().map(|s| s.exp()).sum();
    let max = scores.values().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let total: f64 = scores.values().map(|s| (s - max).exp()).sum();
    let mut probabilities: BTreeMap<i64, f64> = scale.ratings().map(|r| (r, 0.0)).collect();
    for (rating, score) in &scores {
        probabilities.insert(*rating, (score - max).exp() / total);
    }
    Ok(RatingDistribution {
        probabilities,
        coverage_mass,
    })
}

/// Expected value of the distribution: Σ rating · p(rating).
pub fn expected_rating(distribution: &RatingDistribution) -> f64 {
    distribution
        .probabilities
        .iter()
        .map(|(r, p)| *r as f64 * p)
        .sum()
}

/// Splits a completion into (reasoning, rating). The rating is the
/// first integer after the rating marker, decoded through the scale's
/// token offset. Reasoning extraction is lenient: everything between
/// the reasoning marker (or the start of text) and the rating marker.
pub fn parse_prediction_output(text: &str, scale: RatingScale) -> Result<(String, i64)> {
    let marker_at = text.find(RATING_MARKER).ok_or_else(|| Error::Parse {
        message: format!("missing {:?} marker", RATING_MARKER),
        raw: crate::profiling::markup::excerpt(text),
    })?;
    let after = &text[marker_at + RATING_MARKER.len()..];
    let run: String = after
        .trim_start()
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    if run.is_empty() {
        return Err(Error::Parse {
            message: "no digits after the rating marker".to_string(),
            raw: crate::profiling::markup::excerpt(after),
        });
    }
    let mut chars = run.chars();
    let (digit, None) = (chars.next().unwrap(), chars.next()) else {
        return Err(Error::Parse {
            message: format!(
                "rating {:?} is not a single digit in {}..={} (token offset {})",
                run,
                scale.min_digit_text(),
                scale.max_digit_text(),
                scale.token_offset
            ),
            raw: run.clone(),
        });
    };
    let rating = scale.rating_for(digit).map_err(|_| Error::Parse {
        message: format!(
            "rating digit {:?} outside {}..={}",
            digit,
            scale.min_digit_text(),
            scale.max_digit_text()
        ),
        raw: run.clone(),
    })?;

    let mut head = &text[..marker_at];
    if let Some(at) = head.find(REASONING_MARKER) {
        head = &head[at + REASONING_MARKER.len()..];
    }
    let reasoning = head.trim().to_string();
    if reasoning.is_empty() {
        log::warn!("prediction output has an empty reasoning section");
    }
    Ok((reasoning, rating))
}

/// Everything the prompt needs for one (user, item) pair.
#[derive(Debug, Clone)]
pub struct PredictionInputs<'a> {
    pub user_id: &'a str,
    pub item_id: &'a str,
    /// Profile sections as canonical markup (possibly empty-sectioned).
    pub user_profile: &'a str,
    pub item_profile: &'a str,
    /// Raw item description; empty renders the sentinel.
    pub item_description: &'a str,
    pub user_mean: f64,
    pub item_mean: f64,
}

/// Renders the system + user prediction messages for one pair.
pub fn build_prediction_prompt(
    inputs: &PredictionInputs,
    scale: RatingScale,
    templates: &TemplateSet,
) -> Result<Vec<Message>> {
    let description = if inputs.item_description.trim().is_empty() {
        NO_DESCRIPTION.to_string()
    } else {
        inputs.item_description.to_string()
    };
    let mut system_bindings = BTreeMap::new();
    system_bindings.insert("min rating", scale.min_digit_text());
    system_bindings.insert("max rating", scale.max_digit_text());
    system_bindings.insert("rating scale", scale.digit_list_text());
    let system = templates.render("prediction_system", &system_bindings)?;

    let mut user_bindings = BTreeMap::new();
    user_bindings.insert("user profile", inputs.user_profile.to_string());
    user_bindings.insert("item description", description);
    user_bindings.insert("item profile", inputs.item_profile.to_string());
    user_bindings.insert("user average rating", format!("{:.2}", inputs.user_mean));
    user_bindings.insert("item average rating", format!("{:.2}", inputs.item_mean));
    let user = templates.render("prediction_user", &user_bindings)?;

    Ok(vec![Message::system(&system), Message::user(&user)])
}

/// Runs one full prediction: prompt → completion → parse → decode.
/// When per-token scores are unavailable (or the rating token cannot
/// be located), the expected rating falls back to the parsed integer
/// and `fallback_used` is set. All failures carry the (user, item)
/// pair so a batch run can record them and continue.
pub fn predict_rating(
    gateway: &Gateway,
    templates: &TemplateSet,
    scale: RatingScale,
    inputs: &PredictionInputs,
) -> Result<Prediction> {
    predict_inner(gateway, templates, scale, inputs)
        .map_err(|e| e.for_pair(inputs.user_id, inputs.item_id))
}

fn predict_inner(
    gateway: &Gateway,
    templates: &TemplateSet,
    scale: RatingScale,
    inputs: &PredictionInputs,
) -> Result<Prediction> {
    let messages = build_prediction_prompt(inputs, scale, templates)?;
    let request = CompletionRequest::new(messages)
        .with_intent("prediction")
        .with_token_scores(TOP_ALTERNATIVES);
    let result = gateway.complete(&request)?;
    let (reasoning, parsed) = parse_prediction_output(&result.text, scale)?;

    let decoded = result
        .token_scores
        .as_deref()
        .and_then(|scores| {
            let tokens: Vec<&str> = scores.iter().map(|t| t.token.as_str()).collect();
            let position = first_digit_token_after(tokens, RATING_MARKER)?;
            Some(&scores[position])
        })
        .and_then(|position| {
            // The sampled token participates alongside the listed
            // alternatives; first occurrence wins on duplicates.
            let mut candidates = Vec::with_capacity(position.alternatives.len() + 1);
            candidates.push(TokenAlternative {
                token: position.token.clone(),
                logprob: position.logprob,
            });
            candidates.extend(position.alternatives.iter().cloned());
            rating_distribution(&candidates, scale).ok()
        });

    let prediction = match decoded {
        Some(distribution) => Prediction {
            user_id: inputs.user_id.to_string(),
            item_id: inputs.item_id.to_string(),
            reasoning,
            parsed_rating: Some(parsed),
            expected_rating: expected_rating(&distribution),
            coverage_mass: Some(distribution.coverage_mass),
            distribution: Some(distribution),
            fallback_used: false,
        },
        None => Prediction {
            user_id: inputs.user_id.to_string(),
            item_id: inputs.item_id.to_string(),
            reasoning,
            parsed_rating: Some(parsed),
            expected_rating: parsed as f64,
            distribution: None,
            fallback_used: true,
            coverage_mass: None,
        },
    };
    debug_assert!(
        prediction.expected_rating >= scale.min as f64 - 1e-9
            && prediction.expected_rating <= scale.max as f64 + 1e-9
    );
    Ok(prediction)
}
