//! The five input-context variants for a mention: full text, entity
//! sentences, entity sentences with neighbors, and two LLM summaries.
//!
//! Extractive variants are pure functions over the document; summary variants
//! go through a chat backend. Extracted sentence groups are joined with the
//! `[...]` elision marker.

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, MentionInstance};
use crate::llmclient::{ChatBackend, ChatRequest, LlmError, ModelParams};

/// Marker placed between non-adjacent extracted sentence groups.
pub const GROUP_SEPARATOR: &str = "[...]";

const SUMMARY_NEUTRAL: &str = include_str!("../prompts/summary_neutral.txt");
const SUMMARY_FRAMING: &str = include_str!("../prompts/summary_framing.txt");

/// (name, content) of the embedded summary templates, for provenance.
pub fn summary_resources() -> [(&'static str, &'static str); 2] {
    [
        ("summary_neutral.txt", SUMMARY_NEUTRAL),
        ("summary_framing.txt", SUMMARY_FRAMING),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ContextStrategy {
    FullText,
    EntitySentences,
    EntitySentencesNeighbors,
    NeutralSummary,
    FramingPreservedSummary,
}

impl ContextStrategy {
    pub const ALL: [ContextStrategy; 5] = [
        ContextStrategy::FullText,
        ContextStrategy::EntitySentences,
        ContextStrategy::EntitySentencesNeighbors,
        ContextStrategy::NeutralSummary,
        ContextStrategy::FramingPreservedSummary,
    ];

    pub fn is_summary(self) -> bool {
        matches!(
            self,
            ContextStrategy::NeutralSummary | ContextStrategy::FramingPreservedSummary
        )
    }

    /// Short label used in result tables.
    pub fn short_name(self) -> &'static str {
        match self {
            ContextStrategy::FullText => "FT",
            ContextStrategy::EntitySentences => "Ent-Sent",
            ContextStrategy::EntitySentencesNeighbors => "Ent-Neigh",
            ContextStrategy::NeutralSummary => "Neutral-Sum",
            ContextStrategy::FramingPreservedSummary => "FP-Sum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryKind {
    Neutral,
    FramingPreserved,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub index: usize,
    /// Character offset of the first character.
    pub start: usize,
    /// Exclusive character offset past the last character.
    pub end: usize,
    pub text: String,
}

/// Input text handed to the prompt renderer, with its group structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextText {
    pub strategy: ContextStrategy,
    pub body: String,
    /// Number of `[...]`-separated groups; 1 for full text and summaries.
    pub group_count: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ContextError {
    #[error("context strategy requires a chat backend for summarization")]
    SummaryNeedsBackend,
    #[error("summary backend returned an empty response")]
    EmptySummary,
    #[error(transparent)]
    Backend(#[from] LlmError),
}

/// Tokens that end with `.` but do not terminate a sentence.
const ABBREVIATIONS: [&str; 7] = ["Mr.", "Mrs.", "Dr.", "U.S.", "e.g.", "i.e.", "vs."];

/// Rule-based sentence segmentation.
///
/// A sentence ends after `.`, `!` or `?` when followed by whitespace and an
/// uppercase letter (or end of text), unless the dot closes a guarded
/// abbreviation. Newlines always terminate the current sentence, so headlines
/// and paragraphs never merge. Offsets are character indices into `text`.
pub fn segment_sentences(text: &str) -> Vec<Sentence> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut sentences = Vec::new();
    let mut pos = 0usize;

    while pos < n {
        while pos < n && chars[pos].is_whitespace() {
            pos += 1;
        }
        if pos >= n {
            break;
        }
        let start = pos;
        let mut last_non_ws = pos;
        let mut end = None;
        let mut i = pos;
        while i < n {
            let c = chars[i];
            if c == '\n' {
                end = Some(last_non_ws + 1);
                break;
            }
            if !c.is_whitespace() {
                last_non_ws = i;
            }
            if (c == '.' && !ends_abbreviation(&chars, i)) || c == '!' || c == '?' {
                let mut j = i + 1;
                if j == n {
                    end = Some(i + 1);
                    break;
                }
                if chars[j].is_whitespace() {
                    while j < n && chars[j].is_whitespace() && chars[j] != '\n' {
                        j += 1;
                    }
                    if j == n || chars[j] == '\n' || chars[j].is_uppercase() {
                        end = Some(i + 1);
                        break;
                    }
                }
            }
            i += 1;
        }
        let end = end.unwrap_or(last_non_ws + 1);
        let index = sentences.len();
        sentences.push(Sentence {
            index,
            start,
            end,
            text: chars[start..end].iter().collect(),
        });
        pos = end;
    }
    sentences
}

/// True when the dot at `chars[dot]` closes a guarded abbreviation token.
fn ends_abbreviation(chars: &[char], dot: usize) -> bool {
    let mut w = dot;
    while w > 0 && (chars[w - 1].is_alphabetic() || chars[w - 1] == '.') {
        w -= 1;
    }
    let token: String = chars[w..=dot].iter().collect();
    ABBREVIATIONS.contains(&token.as_str())
}

/// Indices of sentences that mention the entity as a substring. The sentence
/// containing the annotated offset is always included, even when surface
/// matching fails there.
pub fn mention_sentence_indices(
    _doc: &Document,
    mention: &MentionInstance,
    sentences: &[Sentence],
) -> Vec<usize> {
    let mut indices: Vec<usize> = sentences
        .iter()
        .filter(|s| s.text.contains(&mention.entity))
        .map(|s| s.index)
        .collect();
    if let Some(host) = sentences
        .iter()
        .find(|s| s.start <= mention.start && mention.start < s.end)
    {
        indices.push(host.index);
    }
    indices.sort_unstable();
    indices.dedup();
    indices
}

/// Expand each index to a ±1-sentence window clamped to `[0, n)`, merging
/// overlapping or adjacent windows into disjoint ascending inclusive ranges.
pub fn neighbor_expand(indices: &[usize], n_sentences: usize) -> Vec<(usize, usize)> {
    if n_sentences == 0 {
        return Vec::new();
    }
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for &i in indices {
        debug_assert!(i < n_sentences);
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(n_sentences - 1);
        match merged.last_mut() {
            Some(last) if lo <= last.1 + 1 => last.1 = last.1.max(hi),
            _ => merged.push((lo, hi)),
        }
    }
    merged
}

/// Build the input context for a mention under the given strategy.
///
/// Summary strategies call the backend; extractive strategies are pure and
/// deterministic. Consecutive extracted sentences form one group with no
/// separator, since nothing is elided between them.
pub fn build_context(
    doc: &Document,
    mention: &MentionInstance,
    strategy: ContextStrategy,
    params: &ModelParams,
    backend: Option<&dyn ChatBackend>,
) -> Result<ContextText, ContextError> {
    match strategy {
        ContextStrategy::FullText => Ok(ContextText {
            strategy,
            body: doc.text.clone(),
            group_count: 1,
        }),
        ContextStrategy::EntitySentences => {
            let sentences = segment_sentences(&doc.text);
            let indices = mention_sentence_indices(doc, mention, &sentences);
            let groups = consecutive_runs(&indices);
            Ok(render_groups(strategy, &sentences, &groups))
        }
        ContextStrategy::EntitySentencesNeighbors => {
            let sentences = segment_sentences(&doc.text);
            let indices = mention_sentence_indices(doc, mention, &sentences);
            let groups = neighbor_expand(&indices, sentences.len());
            Ok(render_groups(strategy, &sentences, &groups))
        }
        ContextStrategy::NeutralSummary | ContextStrategy::FramingPreservedSummary => {
            let backend = backend.ok_or(ContextError::SummaryNeedsBackend)?;
            let kind = if strategy == ContextStrategy::NeutralSummary {
                SummaryKind::Neutral
            } else {
                SummaryKind::FramingPreserved
            };
            let body = generate_summary(doc, &mention.entity, kind, params, backend)?;
            Ok(ContextText {
                strategy,
                body,
                group_count: 1,
            })
        }
    }
}

fn consecutive_runs(indices: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &i in indices {
        match runs.last_mut() {
            Some(last) if i == last.1 + 1 => last.1 = i,
            _ => runs.push((i, i)),
        }
    }
    runs
}

fn render_groups(
    strategy: ContextStrategy,
    sentences: &[Sentence],
    groups: &[(usize, usize)],
) -> ContextText {
    let rendered: Vec<String> = groups
        .iter()
        .map(|&(lo, hi)| {
            sentences[lo..=hi]
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    ContextText {
        strategy,
        body: rendered.join(&format!(" {GROUP_SEPARATOR} ")),
        group_count: groups.len().max(1),
    }
}

/// Render the kind's summary template and return the backend's reply, trimmed.
pub fn generate_summary(
    doc: &Document,
    entity: &str,
    kind: SummaryKind,
    params: &ModelParams,
    backend: &dyn ChatBackend,
) -> Result<String, ContextError> {
    let prompt = summary_prompt(doc, entity, kind);
    let request = ChatRequest::new(String::new(), prompt, params);
    let response = backend.chat(&request)?;
    let text = response.text.trim().to_string();
    if text.is_empty() {
        return Err(ContextError::EmptySummary);
    }
    Ok(text)
}

/// The fully rendered summary request text for `kind`.
pub fn summary_prompt(doc: &Document, entity: &str, kind: SummaryKind) -> String {
    let template = match kind {
        SummaryKind::Neutral => SUMMARY_NEUTRAL,
        SummaryKind::FramingPreserved => SUMMARY_FRAMING,
    };
    template
        .replace("{entity}", entity)
        .replace("{document}", &doc.text)
}
