//! Prompt template registry.
//!
//! The six prompt bodies ship as external text assets embedded at
//! compile time; a directory of `<id>.txt` files can override any of
//! them at runtime. Bodies are checksummed at load so run manifests can
//! pin the exact prompt text. Rendering substitutes `{placeholder}`
//! spans verbatim in a single pass — bound values are never re-scanned,
//! so braces inside review text are inert.

use std::collections::BTreeMap;
use std::path::Path;

use crate::util::sha256_hex;
use crate::{Error, Result};

/// Template identifiers, in pipeline order.
pub const TEMPLATE_IDS: [&str; 6] = [
    "preference_extraction",
    "user_profile",
    "item_profile",
    "reasoning_generation",
    "prediction_system",
    "prediction_user",
];

/// Every placeholder a template body may use.
pub const PLACEHOLDERS: [&str; 14] = [
    "review",
    "preferences",
    "user rating",
    "user profile",
    "item description",
    "item profile",
    "reasoning",
    "rating",
    "min rating",
    "max rating",
    "rating scale",
    "user average rating",
    "item average rating",
    "recommend threshold",
];

const EMBEDDED: [(&str, &str); 6] = [
    (
        "preference_extraction",
        include_str!("../../templates/preference_extraction.txt"),
    ),
    ("user_profile", include_str!("../../templates/user_profile.txt")),
    ("item_profile", include_str!("../../templates/item_profile.txt")),
    (
        "reasoning_generation",
        include_str!("../../templates/reasoning_generation.txt"),
    ),
    (
        "prediction_system",
        include_str!("../../templates/prediction_system.txt"),
    ),
    (
        "prediction_user",
        include_str!("../../templates/prediction_user.txt"),
    ),
];

/// A validated set of the six prompt templates.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    bodies: BTreeMap<String, String>,
    checksums: BTreeMap<String, String>,
}

impl TemplateSet {
    /// The compiled-in assets.
    pub fn embedded() -> TemplateSet {
        let mut set = TemplateSet {
            bodies: BTreeMap::new(),
            checksums: BTreeMap::new(),
        };
        for (id, body) in EMBEDDED {
            set.insert(id, body).expect("embedded templates are valid");
        }
        set
    }

    /// Embedded assets with per-file overrides from `dir`: any
    /// `<id>.txt` present replaces the embedded body.
    pub fn with_overrides(dir: &Path) -> Result<TemplateSet> {
        let mut set = TemplateSet::embedded();
        for id in TEMPLATE_IDS {
            let path = dir.join(format!("{}.txt", id));
            if path.exists() {
                let body = std::fs::read_to_string(&path)?;
                set.insert(id, &body)?;
            }
        }
        Ok(set)
    }

    /// A file ends with a newline by convention; the prompt body does
    /// not include it.
    fn insert(&mut self, id: &str, raw: &str) -> Result<()> {
        let body = raw.strip_suffix('\n').unwrap_or(raw);
        validate_placeholders(id, body)?;
        self.checksums
            .insert(id.to_string(), sha256_hex(body.as_bytes()));
        self.bodies.insert(id.to_string(), body.to_string());
        Ok(())
    }

    pub fn body(&self, template_id: &str) -> Result<&str> {
        self.bodies
            .get(template_id)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown template id {:?}", template_id)))
    }

    /// Per-template SHA-256 of the body, for manifests.
    pub fn checksums(&self) -> &BTreeMap<String, String> {
        &self.checksums
    }

    /// Renders a template, substituting every `{placeholder}` with its
    /// binding. All placeholders occurring in the body must be bound;
    /// bindings for placeholders outside the known set are rejected.
    pub fn render(&self, template_id: &str, bindings: &BTreeMap<&str, String>) -> Result<String> {
        let body = self.body(template_id)?;
        for key in bindings.keys() {
            if !PLACEHOLDERS.contains(key) {
                return Err(Error::UnknownPlaceholder {
                    template: template_id.to_string(),
                    placeholder: key.to_string(),
                });
            }
        }
        let mut out = String::with_capacity(body.len());
        let mut rest = body;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            // validate_placeholders guarantees a closing brace and a
            // known name.
            let close = after.find('}').expect("validated placeholder");
            let name = &after[..close];
            match bindings.get(name) {
                Some(value) => out.push_str(value),
                None => {
                    return Err(Error::MissingBinding {
                        template: template_id.to_string(),
                        placeholder: name.to_string(),
                    })
                }
            }
            rest = &after[close + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Checks every `{...}` span in the body names a known placeholder.
fn validate_placeholders(id: &str, body: &str) -> Result<()> {
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| Error::Config(format!(
            "template {}: unclosed '{{' near byte {}",
            id,
            body.len() - rest.len() + open
        )))?;
        let name = &after[..close];
        if !PLACEHOLDERS.contains(&name) {
            return Err(Error::UnknownPlaceholder {
                template: id.to_string(),
                placeholder: name.to_string(),
            });
        }
        rest = &after[close + 1..];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn embedded_set_is_complete() {
        let set = TemplateSet::embedded();
        for id in TEMPLATE_IDS {
            assert!(!set.body(id).unwrap().is_empty(), "{}", id);
            assert_eq!(set.checksums()[id].len(), 64);
        }
    }

    #[test]
    fn render_substitutes_verbatim() {
        let set = TemplateSet::embedded();
        let out = set
            .render("preference_extraction", &bind(&[("review", "Great film.")]))
            .unwrap();
        assert!(out.ends_with("Here is the review written by the user: Great film."));
        assert!(!out.contains('{'));
    }

    #[test]
    fn braces_in_bound_values_are_inert() {
        let set = TemplateSet::embedded();
        let out = set
            .render(
                "preference_extraction",
                &bind(&[("review", "weird {user profile} text")]),
            )
            .unwrap();
        assert!(out.contains("weird {user profile} text"));
    }

    #[test]
    fn missing_binding_names_the_placeholder() {
        let set = TemplateSet::embedded();
        match set.render("preference_extraction", &bind(&[])) {
            Err(Error::MissingBinding { placeholder, .. }) => {
                assert_eq!(placeholder, "review")
            }
            other => panic!("unexpected: {:?}", other.err()),
        }
    }

    #[test]
    fn unknown_binding_rejected() {
        let set = TemplateSet::embedded();
        let mut b = BTreeMap::new();
        b.insert("nonsense", "x".to_string());
        assert!(matches!(
            set.render("preference_extraction", &b),
            Err(Error::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn different_bindings_render_differently() {
        let set = TemplateSet::embedded();
        let a = set
            .render("preference_extraction", &bind(&[("review", "one")]))
            .unwrap();
        let b = set
            .render("preference_extraction", &bind(&[("review", "two")]))
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn overrides_replace_individual_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("user_profile.txt"),
            "custom body: {preferences}\n",
        )
        .unwrap();
        let set = TemplateSet::with_overrides(dir.path()).unwrap();
        assert_eq!(set.body("user_profile").unwrap(), "custom body: {preferences}");
        // Untouched templates keep the embedded body.
        assert_eq!(
            set.body("item_profile").unwrap(),
            TemplateSet::embedded().body("item_profile").unwrap()
        );
    }

    #[test]
    fn override_with_unknown_placeholder_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("user_profile.txt"), "{bogus}\n").unwrap();
        assert!(TemplateSet::with_overrides(dir.path()).is_err());
    }

    #[test]
    fn prediction_system_renders_digit_range() {
        let set = TemplateSet::embedded();
        let scale = crate::RatingScale::one_to_ten();
        let out = set
            .render(
                "prediction_system",
                &bind(&[
                    ("min rating", &scale.min_digit_text()),
                    ("max rating", &scale.max_digit_text()),
                    ("rating scale", &scale.digit_list_text()),
                ]),
            )
            .unwrap();
        assert!(out.contains("as an integer from 0 to 9: 0, 1, 2, 3, 4, 5, 6, 7, 8, 9."));
        assert!(out.contains("0 indicates the user would strongly dislike the item, while 9 indicates"));
    }
}
