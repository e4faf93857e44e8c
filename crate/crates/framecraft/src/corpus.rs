//! Document and annotation loading, plus prediction serialization.
//!
//! Annotations travel as TSV with character offsets, columns
//! `doc_id  entity  start  end [ main_role  fine_roles ]`, `#` lines ignored.
//! Offsets are Unicode scalar-value indices, not bytes. Validation is strict:
//! the first malformed row aborts the load so ablation inputs never silently
//! shrink.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::inference::Prediction;
use crate::taxonomy::{parse_fine_role, parse_main_role, FineRole, LabelError, MainRole};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    /// Filename stem, unique within a corpus.
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Slice by character offsets (`[start, end)`), `None` when out of range.
    pub fn slice_chars(&self, start: usize, end: usize) -> Option<&str> {
        if start >= end {
            return None;
        }
        let mut byte_start = None;
        let mut count = 0usize;
        for (byte_idx, _) in self.text.char_indices() {
            if count == start {
                byte_start = Some(byte_idx);
            }
            if count == end {
                return Some(&self.text[byte_start?..byte_idx]);
            }
            count += 1;
        }
        if count == end {
            return Some(&self.text[byte_start?..]);
        }
        None
    }
}

/// One classification unit: an entity surface form at a character span of a
/// document.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MentionInstance {
    pub doc_id: String,
    pub entity: String,
    /// 0-based inclusive character offset.
    pub start: usize,
    /// Exclusive character offset.
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldLabel {
    pub main: MainRole,
    /// At least one role, each a child of `main`, no duplicates.
    pub fine: Vec<FineRole>,
}

pub type AnnotatedMention = (MentionInstance, Option<GoldLabel>);

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("file {file} is not valid UTF-8")]
    NonUtf8 { file: String },
    #[error("document {file} is empty")]
    EmptyDocument { file: String },
    #[error("row {row}: expected {expected} tab-separated columns, found {found}")]
    ColumnCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: unknown document id {doc_id:?}")]
    UnknownDocument { row: usize, doc_id: String },
    #[error("row {row}: offset field {field:?} is not a non-negative integer")]
    BadOffset { row: usize, field: String },
    #[error("row {row}: start {start} is not before end {end}")]
    InvertedOffsets {
        row: usize,
        start: usize,
        end: usize,
    },
    #[error("row {row}: span {start}..{end} exceeds document {doc_id:?} length {len}")]
    OffsetOutOfRange {
        row: usize,
        doc_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("row {row}: document slice {found:?} does not match annotated entity {entity:?}")]
    SliceMismatch {
        row: usize,
        entity: String,
        found: String,
    },
    #[error("row {row}: empty fine-grained role list")]
    EmptyFineRoles { row: usize },
    #[error("row {row}: duplicate fine-grained role {role}")]
    DuplicateFineRole { row: usize, role: FineRole },
    #[error("row {row}: {source}")]
    Label {
        row: usize,
        #[source]
        source: LabelError,
    },
}

/// Load every `*.txt` file of a directory as a document, sorted by id.
pub fn load_documents(dir: &Path) -> Result<Vec<Document>, CorpusError> {
    let entries = fs::read_dir(dir).map_err(|source| CorpusError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut docs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| CorpusError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let file = path.display().to_string();
        let bytes = fs::read(&path).map_err(|source| CorpusError::Io {
            path: file.clone(),
            source,
        })?;
        let text =
            String::from_utf8(bytes).map_err(|_| CorpusError::NonUtf8 { file: file.clone() })?;
        if text.is_empty() {
            return Err(CorpusError::EmptyDocument { file });
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        docs.push(Document { id, text });
    }
    docs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(docs)
}

/// Parse an annotation TSV and validate every row against its document.
///
/// `with_labels` selects 6-column (gold-labeled) vs 4-column (mentions only)
/// mode. Rows come back in file order.
pub fn load_annotations(
    tsv_path: &Path,
    documents: &[Document],
    with_labels: bool,
) -> Result<Vec<AnnotatedMention>, CorpusError> {
    let content = fs::read_to_string(tsv_path).map_err(|source| CorpusError::Io {
        path: tsv_path.display().to_string(),
        source,
    })?;
    let by_id: HashMap<&str, &Document> = documents.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let row = idx + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let expected = if with_labels { 6 } else { 4 };
        if fields.len() != expected {
            return Err(CorpusError::ColumnCount {
                row,
                expected,
                found: fields.len(),
            });
        }
        let doc_id = fields[0];
        let entity = fields[1];
        let start = parse_offset(fields[2], row)?;
        let end = parse_offset(fields[3], row)?;
        let doc = by_id
            .get(doc_id)
            .ok_or_else(|| CorpusError::UnknownDocument {
                row,
                doc_id: doc_id.to_string(),
            })?;
        if start >= end {
            return Err(CorpusError::InvertedOffsets { row, start, end });
        }
        let len = doc.char_len();
        if end > len {
            return Err(CorpusError::OffsetOutOfRange {
                row,
                doc_id: doc_id.to_string(),
                start,
                end,
                len,
            });
        }
        let found = doc.slice_chars(start, end).unwrap_or_default();
        if found != entity {
            return Err(CorpusError::SliceMismatch {
                row,
                entity: entity.to_string(),
                found: found.to_string(),
            });
        }
        let mention = MentionInstance {
            doc_id: doc_id.to_string(),
            entity: entity.to_string(),
            start,
            end,
        };
        let gold = if with_labels {
            Some(parse_gold(fields[4], fields[5], row)?)
        } else {
            None
        };
        out.push((mention, gold));
    }
    Ok(out)
}

fn parse_offset(field: &str, row: usize) -> Result<usize, CorpusError> {
    field.parse::<usize>().map_err(|_| CorpusError::BadOffset {
        row,
        field: field.to_string(),
    })
}

fn parse_gold(main_field: &str, fine_field: &str, row: usize) -> Result<GoldLabel, CorpusError> {
    let main = parse_main_role(main_field).map_err(|source| CorpusError::Label { row, source })?;
    let mut fine = Vec::new();
    for part in fine_field.split(',') {
        let role = parse_fine_role(part).map_err(|source| CorpusError::Label { row, source })?;
        if role.parent() != main {
            return Err(CorpusError::Label {
                row,
                source: LabelError::NotAChild { main, fine: role },
            });
        }
        if fine.contains(&role) {
            return Err(CorpusError::DuplicateFineRole { row, role });
        }
        fine.push(role);
    }
    if fine.is_empty() {
        return Err(CorpusError::EmptyFineRoles { row });
    }
    Ok(GoldLabel { main, fine })
}

/// Parse a labeled 6-column TSV without validating spans against documents.
/// Labels are still checked against the taxonomy. Used for scoring, where
/// only the annotation files are at hand.
pub fn read_labeled_rows(
    tsv_path: &Path,
) -> Result<Vec<(MentionInstance, GoldLabel)>, CorpusError> {
    let content = fs::read_to_string(tsv_path).map_err(|source| CorpusError::Io {
        path: tsv_path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let row = idx + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(CorpusError::ColumnCount {
                row,
                expected: 6,
                found: fields.len(),
            });
        }
        let start = parse_offset(fields[2], row)?;
        let end = parse_offset(fields[3], row)?;
        if start >= end {
            return Err(CorpusError::InvertedOffsets { row, start, end });
        }
        let mention = MentionInstance {
            doc_id: fields[0].to_string(),
            entity: fields[1].to_string(),
            start,
            end,
        };
        out.push((mention, parse_gold(fields[4], fields[5], row)?));
    }
    Ok(out)
}

/// Write predictions as a 6-column TSV re-loadable by [`load_annotations`].
/// Fine roles are comma-joined in predicted likelihood order.
pub fn write_predictions(
    path: &Path,
    rows: &[(MentionInstance, Prediction)],
) -> Result<(), CorpusError> {
    let mut body = String::from("# doc_id\tentity\tstart\tend\tmain_role\tfine_roles\n");
    for (mention, pred) in rows {
        let fine: Vec<&str> = pred.fine.iter().map(|r| r.name()).collect();
        writeln!(
            body,
            "{}\t{}\t{}\t{}\t{}\t{}",
            mention.doc_id,
            mention.entity,
            mention.start,
            mention.end,
            pred.main.name(),
            fine.join(",")
        )
        .expect("writing to a String cannot fail");
    }
    fs::write(path, body).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}
