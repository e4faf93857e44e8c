//! Renders the system/user prompt pair for every experimental setting.
//!
//! The system prompt is five slots joined by newlines; empty slots collapse.
//! All slot texts live under `prompts/` as resource files so the wording can
//! be audited without reading code. Rendering is pure: identical inputs give
//! identical bytes.

use serde::{Deserialize, Serialize};

use crate::context::{ContextStrategy, ContextText};
use crate::taxonomy::{DefinitionLevel, MainRole, Taxonomy};

const PERSONA: &str = include_str!("../prompts/persona.txt");
const INPUT_FORMAT: &str = include_str!("../prompts/input_format.txt");
const ASK_REASONING: &str = include_str!("../prompts/reasoning_ask.txt");
const REASONING_IN_JSON: &str = include_str!("../prompts/reasoning_json.txt");
const REASONING_EXAMPLE: &str = include_str!("../prompts/reasoning_example.txt");

const SINGLE_TASK_DEFINITION: &str = include_str!("../prompts/single_step_task_definition.txt");
const SINGLE_TASK_INSTRUCTIONS: &str = include_str!("../prompts/single_step_task_instructions.txt");
const SINGLE_OUTPUT_FORMAT: &str = include_str!("../prompts/single_step_output_format.txt");
const MULTI_MAIN_TASK_DEFINITION: &str =
    include_str!("../prompts/multi_step_main_task_definition.txt");
const MULTI_MAIN_TASK_INSTRUCTIONS: &str =
    include_str!("../prompts/multi_step_main_task_instructions.txt");
const MULTI_MAIN_OUTPUT_FORMAT: &str = include_str!("../prompts/multi_step_main_output_format.txt");
const MULTI_FINE_TASK_DEFINITION: &str =
    include_str!("../prompts/multi_step_fine_task_definition.txt");
const MULTI_FINE_TASK_INSTRUCTIONS: &str =
    include_str!("../prompts/multi_step_fine_task_instructions.txt");
const MULTI_FINE_OUTPUT_FORMAT: &str = include_str!("../prompts/multi_step_fine_output_format.txt");

/// (name, content) of every embedded template resource, for provenance.
pub fn template_resources() -> [(&'static str, &'static str); 14] {
    [
        ("persona.txt", PERSONA),
        ("input_format.txt", INPUT_FORMAT),
        ("reasoning_ask.txt", ASK_REASONING),
        ("reasoning_json.txt", REASONING_IN_JSON),
        ("reasoning_example.txt", REASONING_EXAMPLE),
        ("single_step_task_definition.txt", SINGLE_TASK_DEFINITION),
        (
            "single_step_task_instructions.txt",
            SINGLE_TASK_INSTRUCTIONS,
        ),
        ("single_step_output_format.txt", SINGLE_OUTPUT_FORMAT),
        (
            "multi_step_main_task_definition.txt",
            MULTI_MAIN_TASK_DEFINITION,
        ),
        (
            "multi_step_main_task_instructions.txt",
            MULTI_MAIN_TASK_INSTRUCTIONS,
        ),
        (
            "multi_step_main_output_format.txt",
            MULTI_MAIN_OUTPUT_FORMAT,
        ),
        (
            "multi_step_fine_task_definition.txt",
            MULTI_FINE_TASK_DEFINITION,
        ),
        (
            "multi_step_fine_task_instructions.txt",
            MULTI_FINE_TASK_INSTRUCTIONS,
        ),
        (
            "multi_step_fine_output_format.txt",
            MULTI_FINE_OUTPUT_FORMAT,
        ),
    ]
}

/// The three prompt-design axes: expert persona, label definitions, rationale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub expert_persona: bool,
    pub label_definitions: bool,
    pub rationale: bool,
}

impl PromptConfig {
    pub const BASELINE: PromptConfig = PromptConfig {
        expert_persona: false,
        label_definitions: false,
        rationale: false,
    };

    /// All eight flag combinations, in (EP, LD, RA) binary counting order.
    pub fn all_combinations() -> [PromptConfig; 8] {
        let mut out = [PromptConfig::BASELINE; 8];
        for (i, cfg) in out.iter_mut().enumerate() {
            cfg.expert_persona = i & 0b100 != 0;
            cfg.label_definitions = i & 0b010 != 0;
            cfg.rationale = i & 0b001 != 0;
        }
        out
    }
}

/// Which prompt of the inference pipeline is being rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSetting {
    SingleStep,
    MultiStepMain,
    /// Second multi-step stage, carrying the main role decided by stage one.
    MultiStepFine(MainRole),
}

impl PromptSetting {
    pub fn name(&self) -> &'static str {
        match self {
            PromptSetting::SingleStep => "single_step",
            PromptSetting::MultiStepMain => "multi_step_main",
            PromptSetting::MultiStepFine(_) => "multi_step_fine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

/// The "You will be provided with ..." phrase for a context strategy.
pub fn input_format_phrase(strategy: ContextStrategy) -> String {
    let document_type = match strategy {
        ContextStrategy::FullText => "news article",
        ContextStrategy::EntitySentences | ContextStrategy::EntitySentencesNeighbors => {
            "excerpt of a news article"
        }
        ContextStrategy::NeutralSummary | ContextStrategy::FramingPreservedSummary => {
            "news article summary"
        }
    };
    INPUT_FORMAT.replace("{document_type_str}", document_type)
}

/// Render the system and user prompts for one chat call.
///
/// Slot texts are substituted verbatim; the entity is substituted last so
/// surface forms can never inject slot syntax. Runs of spaces left by empty
/// slots collapse, and empty lines drop out.
pub fn render(
    setting: PromptSetting,
    config: &PromptConfig,
    entity: &str,
    context: &ContextText,
    taxonomy: &Taxonomy,
) -> RenderedPrompt {
    let (task_definition, task_instructions, output_format) = match setting {
        PromptSetting::SingleStep => (
            SINGLE_TASK_DEFINITION,
            SINGLE_TASK_INSTRUCTIONS,
            SINGLE_OUTPUT_FORMAT,
        ),
        PromptSetting::MultiStepMain => (
            MULTI_MAIN_TASK_DEFINITION,
            MULTI_MAIN_TASK_INSTRUCTIONS,
            MULTI_MAIN_OUTPUT_FORMAT,
        ),
        PromptSetting::MultiStepFine(_) => (
            MULTI_FINE_TASK_DEFINITION,
            MULTI_FINE_TASK_INSTRUCTIONS,
            MULTI_FINE_OUTPUT_FORMAT,
        ),
    };

    let restrict = match setting {
        PromptSetting::MultiStepFine(main) => Some(main),
        _ => None,
    };
    let label_definitions = if config.label_definitions {
        let block = match setting {
            PromptSetting::SingleStep => {
                taxonomy.definitions_block(DefinitionLevel::MainAndFine, None)
            }
            PromptSetting::MultiStepMain => {
                taxonomy.definitions_block(DefinitionLevel::MainOnly, None)
            }
            PromptSetting::MultiStepFine(main) => {
                taxonomy.definitions_block(DefinitionLevel::MainAndFine, Some(main))
            }
        };
        // Definitions start on their own line wherever the slot sits.
        format!("\n{block}")
    } else {
        String::new()
    };
    let (ask, in_json, example) = if config.rationale {
        (ASK_REASONING, REASONING_IN_JSON, REASONING_EXAMPLE)
    } else {
        ("", "", "")
    };

    let fill = |template: &str| -> String {
        let mut text = template
            .replace("{taxonomy}", &taxonomy.listing(restrict))
            .replace("{label_definitions}", &label_definitions)
            .replace("{ask_reasoning}", ask)
            .replace("{reasoning_in_json}", in_json)
            .replace("{reasoning_example}", example);
        if let PromptSetting::MultiStepFine(main) = setting {
            text = text.replace("{main_role_candidate}", main.name());
        }
        text.replace("{entity}", entity)
    };

    let persona = if config.expert_persona {
        PERSONA.replace("{entity}", entity)
    } else {
        String::new()
    };
    let provided = format!(
        "You will be provided with {}.",
        input_format_phrase(context.strategy)
    );
    let task = format!("Your task is to {}", fill(task_definition));
    let instructions = fill(task_instructions);
    let output = fill(output_format);

    let system = [persona, provided, task, instructions, output]
        .iter()
        .flat_map(|slot| slot.lines())
        .map(|line| line.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|line| !line.is_empty())
        .collect::<Vec<_>>()
        .join("\n");

    RenderedPrompt {
        system,
        user: format!("DOCUMENT:{}", context.body),
    }
}
