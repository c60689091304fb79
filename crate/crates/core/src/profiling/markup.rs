//! The `[Like]` / `[Dislike]` bullet markup used by extraction and
//! profile completions.
//!
//! Parsing is deliberately tolerant: completions drift in bullet glyph,
//! tag casing, and blank-line placement, and none of that should fail a
//! batch run. Formatting is canonical, and the two compose into a
//! round-trip on any well-formed preference list.

use crate::{Error, Result};

/// Section marker inside the markup (case-insensitive on parse).
const LIKE_TAG: &str = "[like]";
const DISLIKE_TAG: &str = "[dislike]";

/// Placeholder written under a tag with no content.
pub const EMPTY_MARKER: &str = "None.";

fn is_empty_marker(s: &str) -> bool {
    s.trim_end_matches('.').eq_ignore_ascii_case("none")
}

/// Strips one leading bullet glyph (`-`, `*`, `•`) and the whitespace
/// after it. Only one, so bullets that themselves start with a glyph
/// survive a format/parse round trip.
fn strip_bullet(line: &str) -> &str {
    for glyph in ["-", "*", "\u{2022}"] {
        if let Some(rest) = line.strip_prefix(glyph) {
            return rest.trim_start();
        }
    }
    line
}

/// Parses markup into (likes, dislikes). Content before the first tag
/// is ignored; lines under a tag are bullets regardless of glyph;
/// `None.` under a tag contributes nothing. Text containing neither
/// tag is a parse error.
pub fn parse_preference_markup(text: &str) -> Result<(Vec<String>, Vec<String>)> {
    #[derive(PartialEq)]
    enum Section {
        Preamble,
        Likes,
        Dislikes,
    }
    let mut section = Section::Preamble;
    let mut saw_tag = false;
    let mut likes = Vec::new();
    let mut dislikes = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.eq_ignore_ascii_case(LIKE_TAG) {
            section = Section::Likes;
            saw_tag = true;
            continue;
        }
        if trimmed.eq_ignore_ascii_case(DISLIKE_TAG) {
            section = Section::Dislikes;
            saw_tag = true;
            continue;
        }
        if trimmed.is_empty() || section == Section::Preamble {
            continue;
        }
        let bullet = strip_bullet(trimmed);
        if bullet.is_empty() || is_empty_marker(bullet) {
            continue;
        }
        match section {
            Section::Likes => likes.push(bullet.to_string()),
            Section::Dislikes => dislikes.push(bullet.to_string()),
            Section::Preamble => unreachable!(),
        }
    }
    if !saw_tag {
        return Err(Error::Parse {
            message: "neither [Like] nor [Dislike] tag present".to_string(),
            raw: excerpt(text),
        });
    }
    Ok((likes, dislikes))
}

/// Canonical formatting: both tags always present, `- ` bullets, the
/// empty marker under a tag with no bullets.
pub fn format_preference_markup(likes: &[String], dislikes: &[String]) -> String {
    let mut out = String::new();
    for (tag, bullets) in [("[Like]", likes), ("[Dislike]", dislikes)] {
        out.push_str(tag);
        out.push('\n');
        if bullets.is_empty() {
            out.push_str(EMPTY_MARKER);
            out.push('\n');
        } else {
            for b in bullets {
                out.push_str("- ");
                out.push_str(b);
                out.push('\n');
            }
        }
    }
    out.pop(); // no trailing newline
    out
}

/// Short excerpt of offending input for error messages.
pub(crate) fn excerpt(text: &str) -> String {
    const LIMIT: usize = 120;
    if text.len() <= LIMIT {
        return text.to_string();
    }
    let mut end = LIMIT;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &text[..end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_canonical_markup() {
        let (l, d) =
            parse_preference_markup("[Like]\n- great acting\n[Dislike]\n- slow pacing").unwrap();
        assert_eq!(l, vec!["great acting"]);
        assert_eq!(d, vec!["slow pacing"]);
    }

    #[test]
    fn tolerates_case_glyphs_and_blank_lines() {
        let (l, d) = parse_preference_markup("[like]\n* A\n\n[DISLIKE]\n- B\n• C").unwrap();
        assert_eq!(l, vec!["A"]);
        assert_eq!(d, vec!["B", "C"]);
    }

    #[test]
    fn none_marker_yields_empty_sections() {
        let (l, d) = parse_preference_markup("[Like]\nNone.\n[Dislike]\nNone.").unwrap();
        assert!(l.is_empty());
        assert!(d.is_empty());
        // Variants: missing period, bulleted, odd case.
        let (l, d) = parse_preference_markup("[Like]\n- none\n[Dislike]\nNONE.").unwrap();
        assert!(l.is_empty());
        assert!(d.is_empty());
    }

    #[test]
    fn preamble_is_ignored() {
        let (l, d) =
            parse_preference_markup("Sure! Here you go:\n\n[Like]\n- cinematography\n[Dislike]\nNone.")
                .unwrap();
        assert_eq!(l, vec!["cinematography"]);
        assert!(d.is_empty());
    }

    #[test]
    fn missing_tags_is_a_parse_error() {
        let err = parse_preference_markup("just prose with no structure").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn single_tag_is_accepted() {
        let (l, d) = parse_preference_markup("[Dislike]\n- everything").unwrap();
        assert!(l.is_empty());
        assert_eq!(d, vec!["everything"]);
    }

    #[test]
    fn formats_empty_sections_with_marker() {
        assert_eq!(
            format_preference_markup(&[], &[]),
            "[Like]\nNone.\n[Dislike]\nNone."
        );
    }

    fn bullet_strategy() -> impl Strategy<Value = String> {
        // Trimmed, non-empty, not the empty marker, glyph-free leading
        // char — i.e. the invariant shape of a stored bullet.
        "[A-Za-z0-9][A-Za-z0-9 ,'!?.-]{0,38}"
            .prop_map(|s| s.trim().to_string())
            .prop_filter("bullet invariants", |s| {
                !s.is_empty() && !is_empty_marker(s)
            })
    }

    proptest! {
        #[test]
        fn format_then_parse_round_trips(
            likes in proptest::collection::vec(bullet_strategy(), 0..6),
            dislikes in proptest::collection::vec(bullet_strategy(), 0..6),
        ) {
            let text = format_preference_markup(&likes, &dislikes);
            let (l, d) = parse_preference_markup(&text).unwrap();
            prop_assert_eq!(l, likes);
            prop_assert_eq!(d, dislikes);
        }
    }
}
