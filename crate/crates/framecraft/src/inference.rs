//! Single-step and multi-step classification: parse model output, enforce
//! the taxonomy constraint, and retry once on unparsable replies.

use serde::{Deserialize, Serialize};

use crate::context::{build_context, ContextError, ContextStrategy};
use crate::corpus::{Document, MentionInstance};
use crate::llmclient::{cache_key, ChatBackend, ChatRequest, LlmError, ModelParams};
use crate::promptkit::{render, PromptConfig, PromptSetting};
use crate::taxonomy::{parse_fine_role, parse_main_role, FineRole, LabelError, MainRole, Taxonomy};

/// Sentence appended to the user turn when the first reply fails to parse.
const REASK_SUFFIX: &str = "Return only the JSON object in the specified format.";

/// Model output as decoded, before any validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
pub struct RawPrediction {
    pub main_role: Option<String>,
    pub fine_grained_roles: Option<Vec<String>>,
    pub reasoning: Option<String>,
}

/// A validated prediction: one main role and one or two fine roles that are
/// children of it, in stated likelihood order. `flagged` marks instances
/// where the constraint fallback had to substitute a label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub main: MainRole,
    pub fine: Vec<FineRole>,
    pub reasoning: Option<String>,
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    SingleStep,
    MultiStep,
}

/// What to do when filtering empties the fine-role list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintPolicy {
    Strict,
    /// Substitute the first fine role of the main and flag the instance, so
    /// every mention stays scoreable.
    #[default]
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("malformed JSON in model output: {0}")]
    MalformedJson(String),
    #[error("model output for {stage} is missing required key {key:?}")]
    MissingKey {
        stage: &'static str,
        key: &'static str,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("model output unparsable after one re-ask: {0}")]
    ParseFailed(#[source] ParseError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("no fine-grained role valid for {main} remained after filtering")]
    EmptyAfterConstraint { main: MainRole },
    #[error("prediction carries no main role and no forced main role")]
    MissingMainRole,
}

/// Extract the first balanced top-level `{...}` span, preferring the content
/// of a markdown code fence when one is present. Braces inside JSON strings
/// are honored.
pub fn extract_json_object(text: &str) -> Result<&str, ParseError> {
    if let Some(fenced) = fenced_block(text) {
        if let Some(span) = balanced_object(fenced) {
            return Ok(span);
        }
    }
    balanced_object(text).ok_or(ParseError::NoJsonFound)
}

fn fenced_block(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after_marker = &text[open + 3..];
    // Skip an optional language tag up to the end of the marker line.
    let body_start = after_marker.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after_marker[body_start..];
    match body.find("```") {
        Some(close) => Some(&body[..close]),
        None => Some(body),
    }
}

fn balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + c.len_utf8()]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Decode one model reply for the given stage. Unknown keys are ignored;
/// the stage decides which keys are required.
pub fn parse_prediction(text: &str, stage: PromptSetting) -> Result<RawPrediction, ParseError> {
    let object = extract_json_object(text)?;
    let raw: RawPrediction =
        serde_json::from_str(object).map_err(|e| ParseError::MalformedJson(e.to_string()))?;
    let missing = |key| ParseError::MissingKey {
        stage: stage.name(),
        key,
    };
    match stage {
        PromptSetting::SingleStep => {
            if raw.main_role.is_none() {
                return Err(missing("main_role"));
            }
            if raw.fine_grained_roles.is_none() {
                return Err(missing("fine_grained_roles"));
            }
        }
        PromptSetting::MultiStepMain => {
            if raw.main_role.is_none() {
                return Err(missing("main_role"));
            }
        }
        PromptSetting::MultiStepFine(_) => {
            if raw.fine_grained_roles.is_none() {
                return Err(missing("fine_grained_roles"));
            }
        }
    }
    Ok(raw)
}

/// Canonicalize and constrain a raw prediction.
///
/// The main role comes from `forced_main` (multi-step stage two) or is parsed
/// from the raw output. Fine labels are canonicalized (unrecognized strings
/// dropped), deduplicated, truncated to two, then filtered to children of the
/// main role. An emptied list is an error under `Strict` and a flagged
/// substitution of the main's first fine role under `Fallback`.
pub fn finalize_prediction(
    raw: &RawPrediction,
    forced_main: Option<MainRole>,
    taxonomy: &Taxonomy,
    policy: ConstraintPolicy,
) -> Result<Prediction, InferenceError> {
    let main = match forced_main {
        Some(main) => main,
        None => {
            let label = raw
                .main_role
                .as_deref()
                .ok_or(InferenceError::MissingMainRole)?;
            parse_main_role(label)?
        }
    };
    let mut fine: Vec<FineRole> = raw
        .fine_grained_roles
        .as_deref()
        .unwrap_or_default()
        .iter()
        .filter_map(|s| parse_fine_role(s).ok())
        .collect();
    let mut seen = std::collections::HashSet::new();
    fine.retain(|r| seen.insert(*r));
    fine.truncate(2);
    fine.retain(|r| r.parent() == main);

    let mut flagged = false;
    if fine.is_empty() {
        match policy {
            ConstraintPolicy::Strict => return Err(InferenceError::EmptyAfterConstraint { main }),
            ConstraintPolicy::Fallback => {
                fine.push(taxonomy.fine_roles_of(main)[0]);
                flagged = true;
            }
        }
    }
    Ok(Prediction {
        main,
        fine,
        reasoning: raw.reasoning.clone(),
        flagged,
    })
}

/// One chat exchange as seen by the classifier, for run logs.
#[derive(Debug, Clone, Serialize)]
pub struct ChatCall {
    pub digest: String,
    pub from_cache: bool,
}

/// A prediction together with the chat calls that produced it.
#[derive(Debug, Clone)]
pub struct Classified {
    pub prediction: Prediction,
    pub calls: Vec<ChatCall>,
}

/// Ask the backend and parse; on parse failure, re-ask once with an explicit
/// format reminder appended to the user turn (a different request, so it
/// bypasses the original's cache key), then give up.
fn ask_and_parse(
    request: &ChatRequest,
    stage: PromptSetting,
    backend: &dyn ChatBackend,
    calls: &mut Vec<ChatCall>,
) -> Result<RawPrediction, InferenceError> {
    let response = backend.chat(request)?;
    calls.push(ChatCall {
        digest: cache_key(request),
        from_cache: response.from_cache,
    });
    match parse_prediction(&response.text, stage) {
        Ok(raw) => Ok(raw),
        Err(_) => {
            let mut retry = request.clone();
            retry.user = format!("{}\n{REASK_SUFFIX}", request.user);
            let response = backend.chat(&retry)?;
            calls.push(ChatCall {
                digest: cache_key(&retry),
                from_cache: response.from_cache,
            });
            parse_prediction(&response.text, stage).map_err(InferenceError::ParseFailed)
        }
    }
}

/// Jointly predict main and fine roles in one chat call.
#[allow(clippy::too_many_arguments)]
pub fn classify_single_step(
    doc: &Document,
    mention: &MentionInstance,
    strategy: ContextStrategy,
    config: &PromptConfig,
    params: &ModelParams,
    policy: ConstraintPolicy,
    backend: &dyn ChatBackend,
    taxonomy: &Taxonomy,
) -> Result<Classified, InferenceError> {
    let context = build_context(doc, mention, strategy, params, Some(backend))?;
    let prompt = render(
        PromptSetting::SingleStep,
        config,
        &mention.entity,
        &context,
        taxonomy,
    );
    let request = ChatRequest::new(prompt.system, prompt.user, params);
    let mut calls = Vec::new();
    let raw = ask_and_parse(&request, PromptSetting::SingleStep, backend, &mut calls)?;
    let prediction = finalize_prediction(&raw, None, taxonomy, policy)?;
    Ok(Classified { prediction, calls })
}

/// Predict the main role first, then the fine roles under that main role.
/// The two stages may use different contexts and prompt configs.
#[allow(clippy::too_many_arguments)]
pub fn classify_multi_step(
    doc: &Document,
    mention: &MentionInstance,
    strategy_main: ContextStrategy,
    config_main: &PromptConfig,
    strategy_fine: ContextStrategy,
    config_fine: &PromptConfig,
    params: &ModelParams,
    policy: ConstraintPolicy,
    backend: &dyn ChatBackend,
    taxonomy: &Taxonomy,
) -> Result<Classified, InferenceError> {
    let mut calls = Vec::new();

    let context = build_context(doc, mention, strategy_main, params, Some(backend))?;
    let prompt = render(
        PromptSetting::MultiStepMain,
        config_main,
        &mention.entity,
        &context,
        taxonomy,
    );
    let request = ChatRequest::new(prompt.system, prompt.user, params);
    let stage_one = ask_and_parse(&request, PromptSetting::MultiStepMain, backend, &mut calls)?;
    let main_label = stage_one
        .main_role
        .as_deref()
        .ok_or(InferenceError::MissingMainRole)?;
    let main = parse_main_role(main_label)?;

    let context = build_context(doc, mention, strategy_fine, params, Some(backend))?;
    let setting = PromptSetting::MultiStepFine(main);
    let prompt = render(setting, config_fine, &mention.entity, &context, taxonomy);
    let request = ChatRequest::new(prompt.system, prompt.user, params);
    let stage_two = ask_and_parse(&request, setting, backend, &mut calls)?;

    let mut prediction = finalize_prediction(&stage_two, Some(main), taxonomy, policy)?;
    if prediction.reasoning.is_none() {
        prediction.reasoning = stage_one.reasoning;
    }
    Ok(Classified { prediction, calls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::{CountingBackend, OracleBackend, ScriptedBackend};
    use std::sync::Arc;

    fn tax() -> &'static Taxonomy {
        Taxonomy::shared()
    }

    #[test]
    fn extracts_object_after_prose() {
        assert_eq!(
            extract_json_object("Sure! {\"main_role\": \"Innocent\"}").unwrap(),
            "{\"main_role\": \"Innocent\"}"
        );
    }

    #[test]
    fn extracts_object_from_fenced_block() {
        let text = "```json\n{\"main_role\": \"Innocent\"}\n```";
        assert_eq!(
            extract_json_object(text).unwrap(),
            "{\"main_role\": \"Innocent\"}"
        );
    }

    #[test]
    fn no_braces_is_an_error() {
        assert_eq!(
            extract_json_object("no braces here"),
            Err(ParseError::NoJsonFound)
        );
    }

    #[test]
    fn braces_inside_strings_stay_balanced() {
        let text = r#"{"reasoning": "uses { and } freely", "main_role": "Innocent"}"#;
        assert_eq!(extract_json_object(text).unwrap(), text);
    }

    #[test]
    fn single_step_requires_both_keys() {
        let raw = parse_prediction(
            r#"{"main_role":"Antagonist","fine_grained_roles":["Deceiver","Corrupt"]}"#,
            PromptSetting::SingleStep,
        )
        .unwrap();
        assert_eq!(raw.main_role.as_deref(), Some("Antagonist"));
        assert_eq!(raw.fine_grained_roles.as_ref().unwrap().len(), 2);

        let err = parse_prediction(r#"{"main_role":"Antagonist"}"#, PromptSetting::SingleStep)
            .unwrap_err();
        assert_eq!(
            err,
            ParseError::MissingKey {
                stage: "single_step",
                key: "fine_grained_roles"
            }
        );
    }

    #[test]
    fn fine_stage_captures_reasoning() {
        let raw = parse_prediction(
            r#"{"fine_grained_roles":["Victim"],"reasoning":"because"}"#,
            PromptSetting::MultiStepFine(MainRole::Innocent),
        )
        .unwrap();
        assert_eq!(raw.reasoning.as_deref(), Some("because"));
    }

    #[test]
    fn finalize_filters_foreign_children() {
        let raw = RawPrediction {
            main_role: Some("Innocent".into()),
            fine_grained_roles: Some(vec!["Victim".into(), "Tyrant".into()]),
            reasoning: None,
        };
        let pred = finalize_prediction(&raw, None, tax(), ConstraintPolicy::Fallback).unwrap();
        assert_eq!(pred.main, MainRole::Innocent);
        assert_eq!(pred.fine, vec![FineRole::Victim]);
        assert!(!pred.flagged);
    }

    #[test]
    fn forced_main_overrides_and_case_folds() {
        let raw = RawPrediction {
            main_role: None,
            fine_grained_roles: Some(vec!["victim".into()]),
            reasoning: None,
        };
        let pred = finalize_prediction(
            &raw,
            Some(MainRole::Innocent),
            tax(),
            ConstraintPolicy::Strict,
        )
        .unwrap();
        assert_eq!(pred.fine, vec![FineRole::Victim]);
    }

    #[test]
    fn empty_after_filter_follows_policy() {
        let raw = RawPrediction {
            main_role: Some("Innocent".into()),
            fine_grained_roles: Some(vec!["Tyrant".into()]),
            reasoning: None,
        };
        let err = finalize_prediction(&raw, None, tax(), ConstraintPolicy::Strict).unwrap_err();
        assert!(matches!(
            err,
            InferenceError::EmptyAfterConstraint {
                main: MainRole::Innocent
            }
        ));
        let pred = finalize_prediction(&raw, None, tax(), ConstraintPolicy::Fallback).unwrap();
        assert_eq!(pred.fine, vec![FineRole::Forgotten]);
        assert!(pred.flagged);
    }

    #[test]
    fn unknown_main_role_is_an_error() {
        let raw = RawPrediction {
            main_role: Some("Hero".into()),
            fine_grained_roles: Some(vec!["Victim".into()]),
            reasoning: None,
        };
        let err = finalize_prediction(&raw, None, tax(), ConstraintPolicy::Fallback).unwrap_err();
        assert!(matches!(
            err,
            InferenceError::Label(LabelError::UnknownMainRole(_))
        ));
    }

    fn fixture() -> (Document, MentionInstance) {
        let doc = Document {
            id: "d".into(),
            text: "Kremlin spoke. Others listened.".into(),
        };
        let mention = MentionInstance {
            doc_id: "d".into(),
            entity: "Kremlin".into(),
            start: 0,
            end: 7,
        };
        (doc, mention)
    }

    #[test]
    fn single_step_round_trips_through_the_oracle() {
        let (doc, mention) = fixture();
        let oracle = OracleBackend::from_gold([(
            "Kremlin",
            MainRole::Antagonist,
            &[FineRole::Deceiver][..],
        )]);
        let counting = CountingBackend::new(Arc::new(oracle));
        let out = classify_single_step(
            &doc,
            &mention,
            ContextStrategy::EntitySentences,
            &PromptConfig::BASELINE,
            &ModelParams::default(),
            ConstraintPolicy::Fallback,
            &counting,
            tax(),
        )
        .unwrap();
        assert_eq!(out.prediction.main, MainRole::Antagonist);
        assert_eq!(out.prediction.fine, vec![FineRole::Deceiver]);
        assert_eq!(
            counting.calls(),
            1,
            "exactly one backend call on the happy path"
        );
        assert_eq!(out.calls.len(), 1);
    }

    #[test]
    fn unparsable_output_fails_after_one_reask() {
        let (doc, mention) = fixture();
        let backend = ScriptedBackend::constant("not json at all");
        let counting = CountingBackend::new(Arc::new(backend));
        let err = classify_single_step(
            &doc,
            &mention,
            ContextStrategy::FullText,
            &PromptConfig::BASELINE,
            &ModelParams::default(),
            ConstraintPolicy::Fallback,
            &counting,
            tax(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            InferenceError::ParseFailed(ParseError::NoJsonFound)
        ));
        assert_eq!(counting.calls(), 2, "initial ask plus one re-ask");
    }

    #[test]
    fn multi_step_round_trips_and_uses_two_calls() {
        let (doc, mention) = fixture();
        let oracle =
            OracleBackend::from_gold([("Kremlin", MainRole::Innocent, &[FineRole::Scapegoat][..])]);
        let counting = CountingBackend::new(Arc::new(oracle));
        let out = classify_multi_step(
            &doc,
            &mention,
            ContextStrategy::FullText,
            &PromptConfig::BASELINE,
            ContextStrategy::EntitySentences,
            &PromptConfig::BASELINE,
            &ModelParams::default(),
            ConstraintPolicy::Fallback,
            &counting,
            tax(),
        )
        .unwrap();
        assert_eq!(out.prediction.main, MainRole::Innocent);
        assert_eq!(out.prediction.fine, vec![FineRole::Scapegoat]);
        assert_eq!(counting.calls(), 2);
    }

    #[test]
    fn multi_step_composes_scripted_stage_answers() {
        let (doc, mention) = fixture();
        // Stage one says Protagonist, stage two says Martyr.
        let backend = ScriptedBackend::from_sequence(vec![
            r#"{"main_role": "Protagonist"}"#.into(),
            r#"{"fine_grained_roles": ["Martyr"]}"#.into(),
        ]);
        let out = classify_multi_step(
            &doc,
            &mention,
            ContextStrategy::FullText,
            &PromptConfig::BASELINE,
            ContextStrategy::FullText,
            &PromptConfig::BASELINE,
            &ModelParams::default(),
            ConstraintPolicy::Fallback,
            &backend,
            tax(),
        )
        .unwrap();
        assert_eq!(out.prediction.main, MainRole::Protagonist);
        assert_eq!(out.prediction.fine, vec![FineRole::Martyr]);
    }

    #[test]
    fn stage_two_cannot_override_the_main_role() {
        let (doc, mention) = fixture();
        // Stage two smuggles a contradicting main_role key; stage one wins.
        let backend = ScriptedBackend::from_sequence(vec![
            r#"{"main_role": "Protagonist"}"#.into(),
            r#"{"main_role": "Innocent", "fine_grained_roles": ["Martyr"]}"#.into(),
        ]);
        let out = classify_multi_step(
            &doc,
            &mention,
            ContextStrategy::FullText,
            &PromptConfig::BASELINE,
            ContextStrategy::FullText,
            &PromptConfig::BASELINE,
            &ModelParams::default(),
            ConstraintPolicy::Fallback,
            &backend,
            tax(),
        )
        .unwrap();
        assert_eq!(out.prediction.main, MainRole::Protagonist);
        assert_eq!(out.prediction.fine, vec![FineRole::Martyr]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_label() -> impl Strategy<Value = String> {
            prop_oneof![
                proptest::sample::select(
                    FineRole::ALL
                        .iter()
                        .map(|r| r.name().to_string())
                        .collect::<Vec<_>>()
                ),
                proptest::sample::select(
                    FineRole::ALL
                        .iter()
                        .map(|r| r.name().to_lowercase())
                        .collect::<Vec<_>>()
                ),
                "[A-Za-z ]{0,12}",
            ]
        }

        proptest! {
            #[test]
            fn finalized_predictions_respect_the_taxonomy(
                main_idx in 0usize..3,
                labels in proptest::collection::vec(arb_label(), 0..6),
            ) {
                let main = MainRole::ALL[main_idx];
                let raw = RawPrediction {
                    main_role: Some(main.name().to_string()),
                    fine_grained_roles: Some(labels),
                    reasoning: None,
                };
                if let Ok(pred) = finalize_prediction(&raw, None, tax(), ConstraintPolicy::Fallback) {
                    prop_assert!(!pred.fine.is_empty() && pred.fine.len() <= 2);
                    let mut seen = std::collections::HashSet::new();
                    for r in &pred.fine {
                        prop_assert_eq!(r.parent(), pred.main);
                        prop_assert!(seen.insert(*r), "duplicate fine role");
                    }
                }
            }

            #[test]
            fn serialized_predictions_parse_back_to_the_same_labels(
                main_idx in 0usize..3,
                picks in proptest::collection::vec(0usize..12, 1..=2),
            ) {
                let main = MainRole::ALL[main_idx];
                let children = tax().fine_roles_of(main);
                let mut fine: Vec<FineRole> = Vec::new();
                for p in picks {
                    let role = children[p % children.len()];
                    if !fine.contains(&role) {
                        fine.push(role);
                    }
                }
                // The declared single-step output format, round-tripped.
                let names: Vec<&str> = fine.iter().map(|r| r.name()).collect();
                let reply = serde_json::json!({
                    "main_role": main.name(),
                    "fine_grained_roles": names,
                }).to_string();
                let raw = parse_prediction(&reply, PromptSetting::SingleStep).unwrap();
                let pred = finalize_prediction(&raw, None, tax(), ConstraintPolicy::Strict).unwrap();
                prop_assert_eq!(pred.main, main);
                prop_assert_eq!(pred.fine, fine);
            }
        }
    }
}
