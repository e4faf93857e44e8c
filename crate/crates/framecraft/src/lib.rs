//! framecraft: a harness for classifying how named entities are framed in
//! news articles with zero-shot chat models.
//!
//! The pipeline builds an entity-centered input context, renders a
//! systematically varied prompt pair, queries a chat-completion backend
//! (live, scripted, or gold-label oracle), parses and constrains the reply
//! against the fixed role taxonomy, and scores predictions with Main Role
//! Accuracy and Exact Match Ratio.

pub mod context;
pub mod corpus;
pub mod eval;
pub mod inference;
pub mod llmclient;
pub mod promptkit;
pub mod runner;
pub mod taxonomy;

pub use context::{build_context, segment_sentences, ContextStrategy, ContextText, Sentence};
pub use corpus::{
    load_annotations, load_documents, write_predictions, Document, GoldLabel, MentionInstance,
};
pub use eval::{avg_fine_roles, evaluate, exact_match, EvalReport};
pub use inference::{
    classify_multi_step, classify_single_step, extract_json_object, finalize_prediction,
    parse_prediction, ConstraintPolicy, InferenceMode, Prediction, RawPrediction,
};
pub use llmclient::{
    cache_key, cached_chat, ChatBackend, ChatRequest, ChatResponse, HttpBackend, ModelParams,
    OracleBackend, ScriptedBackend,
};
pub use promptkit::{input_format_phrase, render, PromptConfig, PromptSetting, RenderedPrompt};
pub use runner::{run_experiment, run_grid, ExperimentSpec, RunArtifacts};
pub use taxonomy::{parse_fine_role, parse_main_role, FineRole, MainRole, Taxonomy};

/// Every embedded prompt resource as (file name, content), for provenance
/// records in run directories.
pub fn resource_texts() -> Vec<(&'static str, &'static str)> {
    let mut all: Vec<(&'static str, &'static str)> = Vec::new();
    all.extend(promptkit::template_resources());
    all.extend(taxonomy::definition_resources());
    all.extend(context::summary_resources());
    all
}
