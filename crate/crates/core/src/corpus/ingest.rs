//! Corpus ingestion from JSONL or header-mapped CSV files.
//!
//! Ingestion is forgiving at the record level and strict at the file
//! level: a malformed record becomes a line-numbered [`RecordIssue`]
//! and the remaining records are kept, while an unreadable file or an
//! unknown format id aborts. Reviews without a rating are dropped
//! (counted, not reported), which also drops users who never rated
//! anything. Review ids are the 1-based source line numbers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::scale::RatingScale;
use crate::{Error, Result};

use super::{Corpus, ItemMeta, Review};

/// Supported source encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Jsonl,
    Csv,
}

impl SourceFormat {
    /// Infers the format from a file extension.
    pub fn detect(path: &Path) -> Result<SourceFormat> {
        match path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .as_deref()
        {
            Some("jsonl") | Some("ndjson") => Ok(SourceFormat::Jsonl),
            Some("csv") => Ok(SourceFormat::Csv),
            other => Err(Error::UnknownFormat(format!(
                "cannot infer format for {:?} (extension {:?}); pass an explicit format id",
                path, other
            ))),
        }
    }
}

impl FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<SourceFormat> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Ok(SourceFormat::Jsonl),
            "csv" => Ok(SourceFormat::Csv),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceFormat::Jsonl => "jsonl",
            SourceFormat::Csv => "csv",
        })
    }
}

/// Where to read reviews and (optionally) item metadata from. A `None`
/// format means "infer from the file extension".
#[derive(Debug, Clone)]
pub struct IngestSource {
    pub reviews: PathBuf,
    pub reviews_format: Option<SourceFormat>,
    pub items: Option<PathBuf>,
    pub items_format: Option<SourceFormat>,
}

impl IngestSource {
    pub fn new(reviews: impl Into<PathBuf>) -> Self {
        IngestSource {
            reviews: reviews.into(),
            reviews_format: None,
            items: None,
            items_format: None,
        }
    }

    pub fn with_items(mut self, items: impl Into<PathBuf>) -> Self {
        self.items = Some(items.into());
        self
    }
}

/// A skipped record: 1-based line number plus reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordIssue {
    pub file: PathBuf,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}: {}",
            self.file.display(),
            self.line,
            self.message
        )
    }
}

/// Result of [`ingest`]: the validated corpus plus everything that was
/// skipped on the way.
#[derive(Debug)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    pub issues: Vec<RecordIssue>,
    /// Reviews dropped for carrying no rating (these are not errors).
    pub dropped_unrated: usize,
}

#[derive(Debug, Deserialize)]
struct RawReview {
    user_id: String,
    item_id: String,
    #[serde(default)]
    rating: Option<i64>,
    #[serde(default)]
    text: Option<String>,
    timestamp: i64,
    #[serde(default)]
    helpful_votes: Option<i64>,
}

#[derive(Debug, Deserialize)]
struct RawItem {
    item_id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
}

/// Reads reviews (and item metadata when provided), validates each
/// record, and assembles a [`Corpus`].
pub fn ingest(source: &IngestSource, scale: RatingScale) -> Result<IngestOutcome> {
    scale.validate()?;
    let reviews_format = match source.reviews_format {
        Some(f) => f,
        None => SourceFormat::detect(&source.reviews)?,
    };
    let mut issues = Vec::new();
    let mut dropped_unrated = 0usize;

    let raw: Vec<(usize, RawReview)> = match reviews_format {
        SourceFormat::Jsonl => read_jsonl(&source.reviews, &mut issues)?,
        SourceFormat::Csv => read_csv(&source.reviews, &mut issues)?,
    };

    let mut reviews: Vec<Review> = Vec::with_capacity(raw.len());
    let mut triples: BTreeSet<(String, String, i64)> = BTreeSet::new();
    for (line, rec) in raw {
        let rating = match rec.rating {
            Some(r) => r,
            None => {
                dropped_unrated += 1;
                continue;
            }
        };
        if !scale.contains(rating) {
            issues.push(RecordIssue {
                file: source.reviews.clone(),
                line,
                message: format!(
                    "rating {} outside scale {}..={}",
                    rating, scale.min, scale.max
                ),
            });
            continue;
        }
        if rec.timestamp < 0 {
            issues.push(RecordIssue {
                file: source.reviews.clone(),
                line,
                message: format!("negative timestamp {}", rec.timestamp),
            });
            continue;
        }
        let helpful_votes = match rec.helpful_votes {
            Some(v) if v < 0 => {
                issues.push(RecordIssue {
                    file: source.reviews.clone(),
                    line,
                    message: format!("negative helpful_votes {}", v),
                });
                continue;
            }
            Some(v) => v as u64,
            None => 0,
        };
        let triple = (rec.user_id.clone(), rec.item_id.clone(), rec.timestamp);
        if !triples.insert(triple) {
            issues.push(RecordIssue {
                file: source.reviews.clone(),
                line,
                message: format!(
                    "duplicate interaction ({}, {}, {}); keeping the first occurrence",
                    rec.user_id, rec.item_id, rec.timestamp
                ),
            });
            continue;
        }
        reviews.push(Review {
            id: line as u64,
            user_id: rec.user_id,
            item_id: rec.item_id,
            rating,
            text: rec.text.unwrap_or_default(),
            timestamp: rec.timestamp,
            helpful_votes,
        });
    }

    let mut items: BTreeMap<String, ItemMeta> = BTreeMap::new();
    if let Some(items_path) = &source.items {
        let items_format = match source.items_format {
            Some(f) => f,
            None => SourceFormat::detect(items_path)?,
        };
        let raw_items: Vec<(usize, RawItem)> = match items_format {
            SourceFormat::Jsonl => read_jsonl(items_path, &mut issues)?,
            SourceFormat::Csv => read_items_csv(items_path, &mut issues)?,
        };
        for (line, item) in raw_items {
            if items.contains_key(&item.item_id) {
                issues.push(RecordIssue {
                    file: items_path.clone(),
                    line,
                    message: format!(
                        "duplicate item_id {:?}; keeping the first occurrence",
                        item.item_id
                    ),
                });
                continue;
            }
            items.insert(
                item.item_id.clone(),
                ItemMeta {
                    item_id: item.item_id,
                    title: item.title,
                    description: item.description,
                    attributes: item.attributes,
                },
            );
        }
        // Reviews pointing at items missing from the metadata table are
        // flagged, not dropped; prompts later fall back to a sentinel.
        for r in &reviews {
            if !items.contains_key(&r.item_id) {
                issues.push(RecordIssue {
                    file: items_path.clone(),
                    line: 0,
                    message: format!("no metadata for item {:?}", r.item_id),
                });
            }
        }
        issues.dedup();
    }

    let corpus = Corpus::from_parts(reviews, items, scale)?;
    Ok(IngestOutcome {
        corpus,
        issues,
        dropped_unrated,
    })
}

/// Parses a JSONL file into `(line, T)` pairs, logging malformed lines.
fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    issues: &mut Vec<RecordIssue>,
) -> Result<Vec<(usize, T)>> {
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw_line) in body.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(raw_line) {
            Ok(v) => out.push((line, v)),
            Err(e) => issues.push(RecordIssue {
                file: path.to_path_buf(),
                line,
                message: format!("malformed record: {}", e),
            }),
        }
    }
    Ok(out)
}

/// Parses a header-mapped CSV into `(line, T)` pairs via serde.
fn read_csv<T: serde::de::DeserializeOwned>(
    path: &Path,
    issues: &mut Vec<RecordIssue>,
) -> Result<Vec<(usize, T)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let pos_line = reader.position().line() as usize;
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => match record.deserialize::<T>(Some(&headers)) {
                Ok(v) => out.push((pos_line, v)),
                Err(e) => issues.push(RecordIssue {
                    file: path.to_path_buf(),
                    line: pos_line,
                    message: format!("malformed record: {}", e),
                }),
            },
            Err(e) => issues.push(RecordIssue {
                file: path.to_path_buf(),
                line: pos_line,
                message: format!("malformed record: {}", e),
            }),
        }
    }
    Ok(out)
}

/// CSV item metadata: the known columns map to fields and every other
/// column becomes an attribute.
fn read_items_csv(path: &Path, issues: &mut Vec<RecordIssue>) -> Result<Vec<(usize, RawItem)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let pos_line = reader.position().line() as usize;
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let mut item = RawItem {
                    item_id: String::new(),
                    title: String::new(),
                    description: String::new(),
                    attributes: BTreeMap::new(),
                };
                for (h, v) in headers.iter().zip(record.iter()) {
                    match h {
                        "item_id" => item.item_id = v.to_string(),
                        "title" => item.title = v.to_string(),
                        "description" => item.description = v.to_string(),
                        other if !v.is_empty() => {
                            item.attributes.insert(other.to_string(), v.to_string());
                        }
                        _ => {}
                    }
                }
                if item.item_id.is_empty() {
                    issues.push(RecordIssue {
                        file: path.to_path_buf(),
                        line: pos_line,
                        message: "missing item_id".to_string(),
                    });
                } else {
                    out.push((pos_line, item));
                }
            }
            Err(e) => issues.push(RecordIssue {
                file: path.to_path_buf(),
                line: pos_line,
                message: format!("malformed record: {}", e),
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn three_line_jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "r.jsonl",
            concat!(
                r#"{"user_id":"u1","item_id":"i1","rating":8,"text":"fine","timestamp":100}"#,
                "\n",
                r#"{"user_id":"u1","item_id":"i2","rating":3,"text":"meh","timestamp":200,"helpful_votes":4}"#,
                "\n",
                r#"{"user_id":"u2","item_id":"i1","rating":10,"text":"","timestamp":300}"#,
                "\n",
            ),
        );
        let out = ingest(&IngestSource::new(&p), RatingScale::one_to_ten()).unwrap();
        assert_eq!(out.corpus.len(), 3);
        assert!(out.issues.is_empty());
        assert_eq!(out.dropped_unrated, 0);
        // Ids are 1-based line numbers.
        let r2 = out.corpus.review(2).unwrap();
        assert_eq!(r2.helpful_votes, 4);
        assert_eq!(out.corpus.interacted_item_ids(), vec!["i1", "i2"]);
    }

    #[test]
    fn off_scale_rating_is_line_numbered_and_rest_kept() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "r.jsonl",
            concat!(
                r#"{"user_id":"u1","item_id":"i1","rating":8,"timestamp":100}"#,
                "\n",
                r#"{"user_id":"u2","item_id":"i1","rating":12,"timestamp":200}"#,
                "\n",
                r#"{"user_id":"u3","item_id":"i1","rating":1,"timestamp":300}"#,
                "\n",
            ),
        );
        let out = ingest(&IngestSource::new(&p), RatingScale::one_to_ten()).unwrap();
        assert_eq!(out.corpus.len(), 2);
        assert_eq!(out.issues.len(), 1);
        assert_eq!(out.issues[0].line, 2);
        assert!(out.issues[0].message.contains("outside scale"));
    }

    #[test]
    fn unrated_reviews_drop_their_users() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "r.jsonl",
            concat!(
                r#"{"user_id":"rated","item_id":"i1","rating":5,"timestamp":100}"#,
                "\n",
                r#"{"user_id":"lurker","item_id":"i1","rating":null,"timestamp":200}"#,
                "\n",
                r#"{"user_id":"lurker","item_id":"i2","timestamp":300}"#,
                "\n",
            ),
        );
        let out = ingest(&IngestSource::new(&p), RatingScale::one_to_ten()).unwrap();
        assert_eq!(out.corpus.len(), 1);
        assert_eq!(out.dropped_unrated, 2);
        assert!(out.issues.is_empty());
        assert_eq!(out.corpus.user_ids(), vec!["rated"]);
    }

    #[test]
    fn malformed_line_reported_rest_kept() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "r.jsonl",
            concat!(
                r#"{"user_id":"u1","item_id":"i1","rating":5,"timestamp":100}"#,
                "\n",
                "{not json\n",
                r#"{"user_id":"u2","item_id":"i1","rating":6,"timestamp":200}"#,
                "\n",
            ),
        );
        let out = ingest(&IngestSource::new(&p), RatingScale::one_to_ten()).unwrap();
        assert_eq!(out.corpus.len(), 2);
        assert_eq!(out.issues.len(), 1);
        assert_eq!(out.issues[0].line, 2);
    }

    #[test]
    fn duplicate_triple_keeps_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "r.jsonl",
            concat!(
                r#"{"user_id":"u","item_id":"i","rating":5,"timestamp":100}"#,
                "\n",
                r#"{"user_id":"u","item_id":"i","rating":9,"timestamp":100}"#,
                "\n",
            ),
        );
        let out = ingest(&IngestSource::new(&p), RatingScale::one_to_ten()).unwrap();
        assert_eq!(out.corpus.len(), 1);
        assert_eq!(out.corpus.reviews()[0].rating, 5);
        assert_eq!(out.issues.len(), 1);
        assert!(out.issues[0].message.contains("duplicate interaction"));
    }

    #[test]
    fn csv_reviews_and_items() {
        let dir = tempfile::tempdir().unwrap();
        let reviews = write(
            &dir,
            "r.csv",
            "user_id,item_id,rating,text,timestamp,helpful_votes\n\
             u1,i1,4,\"nice, really\",100,2\n\
             u2,i1,5,,200,\n",
        );
        let items = write(
            &dir,
            "i.csv",
            "item_id,title,description,genre\n\
             i1,First,Long description here,Drama\n",
        );
        let source = IngestSource {
            reviews,
            reviews_format: None,
            items: Some(items),
            items_format: None,
        };
        let out = ingest(&source, RatingScale::one_to_five()).unwrap();
        assert_eq!(out.corpus.len(), 2);
        // Header is line 1, so record ids start at 2.
        let r = out.corpus.review(2).unwrap();
        assert_eq!(r.text, "nice, really");
        assert_eq!(r.helpful_votes, 2);
        assert_eq!(out.corpus.review(3).unwrap().helpful_votes, 0);
        let meta = out.corpus.item("i1").unwrap();
        assert_eq!(meta.title, "First");
        assert_eq!(meta.attributes["genre"], "Drama");
        assert!(out.issues.is_empty());
    }

    #[test]
    fn missing_item_metadata_is_flagged_not_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let reviews = write(
            &dir,
            "r.jsonl",
            concat!(
                r#"{"user_id":"u","item_id":"known","rating":5,"timestamp":1}"#,
                "\n",
                r#"{"user_id":"u","item_id":"mystery","rating":6,"timestamp":2}"#,
                "\n",
            ),
        );
        let items = write(
            &dir,
            "i.jsonl",
            concat!(r#"{"item_id":"known","title":"K","description":"d"}"#, "\n"),
        );
        let source = IngestSource {
            reviews,
            reviews_format: None,
            items: Some(items),
            items_format: None,
        };
        let out = ingest(&source, RatingScale::one_to_ten()).unwrap();
        assert_eq!(out.corpus.len(), 2);
        assert!(out
            .issues
            .iter()
            .any(|i| i.message.contains("no metadata for item \"mystery\"")));
    }

    #[test]
    fn unknown_format_is_an_error() {
        assert!("parquet".parse::<SourceFormat>().is_err());
        assert!(SourceFormat::detect(Path::new("data.bin")).is_err());
        assert_eq!(
            "JSONL".parse::<SourceFormat>().unwrap(),
            SourceFormat::Jsonl
        );
    }
}
