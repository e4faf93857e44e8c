//! Experiment execution: single runs, the ablation grid, and result tables.
//!
//! A run directory is content-complete: it holds the spec copy, per-instance
//! log, predictions TSV, the evaluation report, prompt resource digests, and
//! a git describe string, so any table can be reproduced from its artifacts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::ContextStrategy;
use crate::corpus::{write_predictions, AnnotatedMention, CorpusError, Document};
use crate::eval::{evaluate, EvalReport};
use crate::inference::{
    classify_multi_step, classify_single_step, Classified, ConstraintPolicy, InferenceMode,
    Prediction,
};
use crate::llmclient::{CachedBackend, ChatBackend, CountingBackend, ModelParams};
use crate::promptkit::PromptConfig;
use crate::taxonomy::{MainRole, Taxonomy};

fn default_model() -> String {
    ModelParams::default().model
}

fn default_seed() -> u64 {
    42
}

fn default_max_fine() -> u8 {
    2
}

fn default_max_in_flight() -> usize {
    4
}

/// One experiment: inference mode, per-stage context and prompt config,
/// model parameters, and output policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub mode: InferenceMode,
    pub strategy_main: ContextStrategy,
    #[serde(default)]
    pub config_main: PromptConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy_fine: Option<ContextStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fine: Option<PromptConfig>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub policy: ConstraintPolicy,
    #[serde(default = "default_max_fine")]
    pub max_fine: u8,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

impl ExperimentSpec {
    /// A single-step spec with defaults for everything but the essentials.
    pub fn single_step(name: &str, strategy: ContextStrategy, config: PromptConfig) -> Self {
        ExperimentSpec {
            name: name.into(),
            mode: InferenceMode::SingleStep,
            strategy_main: strategy,
            config_main: config,
            strategy_fine: None,
            config_fine: None,
            model: default_model(),
            temperature: 0.0,
            seed: default_seed(),
            policy: ConstraintPolicy::Fallback,
            max_fine: default_max_fine(),
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn multi_step(
        name: &str,
        strategy_main: ContextStrategy,
        config_main: PromptConfig,
        strategy_fine: ContextStrategy,
        config_fine: PromptConfig,
    ) -> Self {
        ExperimentSpec {
            strategy_fine: Some(strategy_fine),
            config_fine: Some(config_fine),
            mode: InferenceMode::MultiStep,
            ..Self::single_step(name, strategy_main, config_main)
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let bytes = fs::read(path).map_err(|source| RunError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec: ExperimentSpec = serde_json::from_slice(&bytes).map_err(|e| RunError::Json {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let has_fine_stage = self.strategy_fine.is_some() && self.config_fine.is_some();
        let any_fine_stage = self.strategy_fine.is_some() || self.config_fine.is_some();
        match self.mode {
            InferenceMode::MultiStep if !has_fine_stage => {
                return Err(RunError::BadSpecShape {
                    name: self.name.clone(),
                });
            }
            InferenceMode::SingleStep if any_fine_stage => {
                return Err(RunError::BadSpecShape {
                    name: self.name.clone(),
                });
            }
            _ => {}
        }
        if !(1..=2).contains(&self.max_fine) {
            return Err(RunError::BadMaxFine {
                name: self.name.clone(),
            });
        }
        Ok(())
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            model: self.model.clone(),
            temperature: self.temperature,
            seed: self.seed,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("spec {name:?}: fine-stage fields must be present exactly when mode is multi_step")]
    BadSpecShape { name: String },
    #[error("spec {name:?}: max_fine must be 1 or 2")]
    BadMaxFine { name: String },
    #[error("mention references unknown document {doc_id:?}")]
    UnknownDocument { doc_id: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {detail}")]
    Json { path: String, detail: String },
    #[error("grid expands to zero experiments")]
    EmptyGrid,
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Per-instance log record, one JSON line each in `log.jsonl`.
#[derive(Debug, Serialize)]
struct InstanceLog {
    doc_id: String,
    entity: String,
    start: usize,
    end: usize,
    status: &'static str,
    prompt_digests: Vec<String>,
    cache_hits: Vec<bool>,
    flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    reasoning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    spec_name: &'a str,
    instances: usize,
    backend_calls: usize,
    error_count: usize,
    wall_time_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval: Option<&'a EvalReport>,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub name: String,
    pub out_dir: PathBuf,
    pub predictions_path: PathBuf,
    pub log_path: PathBuf,
    pub report: Option<EvalReport>,
    pub backend_calls: usize,
    pub error_count: usize,
    pub wall_time: Duration,
    /// Digests of every prompt sent, for cache-disjointness checks.
    pub prompt_digests: BTreeSet<String>,
}

/// Substituted when an instance fails hard under the fallback policy, so the
/// predictions file still covers every mention. Always flagged.
fn error_fallback(taxonomy: &Taxonomy) -> Prediction {
    let main = MainRole::ALL[0];
    Prediction {
        main,
        fine: vec![taxonomy.fine_roles_of(main)[0]],
        reasoning: None,
        flagged: true,
    }
}

/// Classify every mention per the spec and write run artifacts to `out_dir`.
///
/// Per-instance failures are recorded and the run continues; only corpus or
/// configuration problems abort. With gold labels present, the artifacts
/// include an evaluation report.
pub fn run_experiment(
    spec: &ExperimentSpec,
    documents: &[Document],
    annotations: &[AnnotatedMention],
    backend: Arc<dyn ChatBackend>,
    cache_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<RunArtifacts, RunError> {
    spec.validate()?;
    let started = Instant::now();
    let taxonomy = Taxonomy::shared();
    let by_id: HashMap<&str, &Document> = documents.iter().map(|d| (d.id.as_str(), d)).collect();
    for (mention, _) in annotations {
        if !by_id.contains_key(mention.doc_id.as_str()) {
            return Err(RunError::UnknownDocument {
                doc_id: mention.doc_id.clone(),
            });
        }
    }

    let counting = Arc::new(CountingBackend::new(backend));
    let effective: Arc<dyn ChatBackend> = match cache_dir {
        Some(dir) => Arc::new(CachedBackend::new(counting.clone(), dir)),
        None => counting.clone(),
    };

    let params = spec.params();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.max_in_flight.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;

    let results: Vec<Result<Classified, String>> = pool.install(|| {
        annotations
            .par_iter()
            .map(|(mention, _)| {
                let doc = by_id[mention.doc_id.as_str()];
                let outcome = match spec.mode {
                    InferenceMode::SingleStep => classify_single_step(
                        doc,
                        mention,
                        spec.strategy_main,
                        &spec.config_main,
                        &params,
                        spec.policy,
                        effective.as_ref(),
                        taxonomy,
                    ),
                    InferenceMode::MultiStep => classify_multi_step(
                        doc,
                        mention,
                        spec.strategy_main,
                        &spec.config_main,
                        spec.strategy_fine.expect("validated"),
                        spec.config_fine.as_ref().expect("validated"),
                        &params,
                        spec.policy,
                        effective.as_ref(),
                        taxonomy,
                    ),
                };
                outcome
                    .map(|mut classified| {
                        if spec.max_fine == 1 {
                            classified.prediction.fine.truncate(1);
                        }
                        classified
                    })
                    .map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut logs = Vec::new();
    let mut pairs = Vec::new();
    let mut digests = BTreeSet::new();
    let mut error_count = 0;
    for ((mention, gold), outcome) in annotations.iter().zip(results) {
        match outcome {
            Ok(classified) => {
                for call in &classified.calls {
                    digests.insert(call.digest.clone());
                }
                logs.push(InstanceLog {
                    doc_id: mention.doc_id.clone(),
                    entity: mention.entity.clone(),
                    start: mention.start,
                    end: mention.end,
                    status: if classified.prediction.flagged {
                        "fallback"
                    } else {
                        "ok"
                    },
                    prompt_digests: classified.calls.iter().map(|c| c.digest.clone()).collect(),
                    cache_hits: classified.calls.iter().map(|c| c.from_cache).collect(),
                    flagged: classified.prediction.flagged,
                    reasoning: classified.prediction.reasoning.clone(),
                    error: None,
                });
                if let Some(gold) = gold {
                    pairs.push((classified.prediction.clone(), gold.clone()));
                }
                rows.push((mention.clone(), classified.prediction));
            }
            Err(message) => {
                error_count += 1;
                let substituted = match spec.policy {
                    ConstraintPolicy::Fallback => Some(error_fallback(taxonomy)),
                    ConstraintPolicy::Strict => None,
                };
                logs.push(InstanceLog {
                    doc_id: mention.doc_id.clone(),
                    entity: mention.entity.clone(),
                    start: mention.start,
                    end: mention.end,
                    status: "error",
                    prompt_digests: Vec::new(),
                    cache_hits: Vec::new(),
                    flagged: substituted.is_some(),
                    reasoning: None,
                    error: Some(message),
                });
                if let Some(prediction) = substituted {
                    if let Some(gold) = gold {
                        pairs.push((prediction.clone(), gold.clone()));
                    }
                    rows.push((mention.clone(), prediction));
                }
            }
        }
    }

    fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let predictions_path = out_dir.join("predictions.tsv");
    write_predictions(&predictions_path, &rows)?;

    let log_path = out_dir.join("log.jsonl");
    let log_body: String = logs
        .iter()
        .map(|entry| serde_json::to_string(entry).expect("log entry serializes"))
        .collect::<Vec<_>>()
        .join("\n");
    write_text(&log_path, &(log_body + "\n"))?;

    let report = if !pairs.is_empty() && annotations.iter().all(|(_, g)| g.is_some()) {
        Some(evaluate(&pairs).expect("pairs is non-empty"))
    } else {
        None
    };

    let wall_time = started.elapsed();
    let run_report = RunReport {
        spec_name: &spec.name,
        instances: annotations.len(),
        backend_calls: counting.calls(),
        error_count,
        wall_time_secs: wall_time.as_secs_f64(),
        eval: report.as_ref(),
    };
    write_text(
        &out_dir.join("report.json"),
        &serde_json::to_string_pretty(&run_report).expect("report serializes"),
    )?;
    write_text(
        &out_dir.join("spec.json"),
        &serde_json::to_string_pretty(spec).expect("spec serializes"),
    )?;
    write_text(
        &out_dir.join("resources.json"),
        &serde_json::to_string_pretty(&provenance()).expect("provenance serializes"),
    )?;

    Ok(RunArtifacts {
        name: spec.name.clone(),
        out_dir: out_dir.to_path_buf(),
        predictions_path,
        log_path,
        report,
        backend_calls: counting.calls(),
        error_count,
        wall_time,
        prompt_digests: digests,
    })
}

fn write_text(path: &Path, body: &str) -> Result<(), RunError> {
    fs::write(path, body).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Prompt resource digests plus a git describe string, written into every
/// run directory.
fn provenance() -> serde_json::Value {
    let mut digests = BTreeMap::new();
    for (name, text) in crate::resource_texts() {
        digests.insert(name, hex::encode(Sha256::digest(text.as_bytes())));
    }
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|out| out.status.success())
        .map(|out| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    serde_json::json!({ "prompt_resources": digests, "git": git })
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Declarative ablation grid: a list of spec files plus an optional axes
/// block that expands strategies x one-at-a-time prompt modifications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFile {
    #[serde(default)]
    pub spec_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<GridAxes>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridAxes {
    pub base: ExperimentSpec,
    pub strategies: Vec<ContextStrategy>,
    pub variants: Vec<GridVariant>,
}

/// One-modification-at-a-time prompt variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridVariant {
    Baseline,
    ExpertPersona,
    LabelDefinitions,
    Rationale,
}

impl GridVariant {
    pub fn short(self) -> &'static str {
        match self {
            GridVariant::Baseline => "baseline",
            GridVariant::ExpertPersona => "ep",
            GridVariant::LabelDefinitions => "ld",
            GridVariant::Rationale => "ra",
        }
    }

    pub fn config(self) -> PromptConfig {
        match self {
            GridVariant::Baseline => PromptConfig::BASELINE,
            GridVariant::ExpertPersona => PromptConfig {
                expert_persona: true,
                ..PromptConfig::BASELINE
            },
            GridVariant::LabelDefinitions => PromptConfig {
                label_definitions: true,
                ..PromptConfig::BASELINE
            },
            GridVariant::Rationale => PromptConfig {
                rationale: true,
                ..PromptConfig::BASELINE
            },
        }
    }
}

/// Load a grid file and expand it into concrete experiment specs.
/// Referenced spec files resolve relative to the grid file's directory.
pub fn load_grid(path: &Path) -> Result<Vec<ExperimentSpec>, RunError> {
    let bytes = fs::read(path).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let grid: GridFile = serde_json::from_slice(&bytes).map_err(|e| RunError::Json {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut specs = Vec::new();
    for file in &grid.spec_files {
        specs.push(ExperimentSpec::from_file(&base_dir.join(file))?);
    }
    if let Some(axes) = &grid.axes {
        specs.extend(expand_axes(axes)?);
    }
    if specs.is_empty() {
        return Err(RunError::EmptyGrid);
    }
    Ok(specs)
}

/// Expand the axes block: every strategy crossed with every variant, the
/// varied strategy and config applied to all stages the base mode has.
pub fn expand_axes(axes: &GridAxes) -> Result<Vec<ExperimentSpec>, RunError> {
    let mut specs = Vec::new();
    for &strategy in &axes.strategies {
        for &variant in &axes.variants {
            let mut spec = axes.base.clone();
            spec.name = format!(
                "{}-{}",
                strategy.short_name().to_lowercase().replace(' ', "-"),
                variant.short()
            );
            spec.strategy_main = strategy;
            spec.config_main = variant.config();
            if spec.mode == InferenceMode::MultiStep {
                spec.strategy_fine = Some(strategy);
                spec.config_fine = Some(variant.config());
            }
            spec.validate()?;
            specs.push(spec);
        }
    }
    Ok(specs)
}

/// One grid row: the spec plus its outcome (Err carries the failure text).
pub struct GridRow {
    pub spec: ExperimentSpec,
    pub outcome: Result<RunArtifacts, String>,
}

pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub markdown: String,
    pub csv: String,
}

/// Run each spec in order (specs run sequentially so cost accounting stays
/// legible) and render the combined result table.
pub fn run_grid(
    specs: &[ExperimentSpec],
    documents: &[Document],
    annotations: &[AnnotatedMention],
    backend: Arc<dyn ChatBackend>,
    cache_dir: Option<&Path>,
    out_root: &Path,
) -> Result<GridOutcome, RunError> {
    if specs.is_empty() {
        return Err(RunError::EmptyGrid);
    }
    let mut rows = Vec::new();
    for spec in specs {
        let out_dir = out_root.join(&spec.name);
        let outcome = run_experiment(
            spec,
            documents,
            annotations,
            backend.clone(),
            cache_dir,
            &out_dir,
        )
        .map_err(|e| e.to_string());
        rows.push(GridRow {
            spec: spec.clone(),
            outcome,
        });
    }
    let table_rows: Vec<TableRow> = rows
        .iter()
        .map(|row| match &row.outcome {
            Ok(artifacts) => TableRow::from_run(&row.spec, artifacts.report.as_ref()),
            Err(_) => TableRow::failed(&row.spec),
        })
        .collect();
    let (markdown, csv) = render_table(&table_rows);
    Ok(GridOutcome {
        rows,
        markdown,
        csv,
    })
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

/// Round `numer/denom` to two decimals, half-up, in decimal arithmetic.
/// `0.955` therefore renders as "0.96" regardless of float representation.
pub fn format_ratio2(numer: usize, denom: usize) -> String {
    assert!(denom > 0, "ratio denominator must be positive");
    let hundredths = (200 * numer + denom) / (2 * denom);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRow {
    pub setting: String,
    pub context: String,
    pub ep: String,
    pub ld: String,
    pub ra: String,
    pub mra: String,
    pub emr: String,
}

impl TableRow {
    pub fn from_run(spec: &ExperimentSpec, report: Option<&EvalReport>) -> Self {
        let (mra, emr) = match report {
            Some(r) => (
                format_ratio2(r.main_matches, r.n),
                format_ratio2(r.exact_matches, r.n),
            ),
            None => ("-".into(), "-".into()),
        };
        Self::shape(spec, mra, emr)
    }

    pub fn failed(spec: &ExperimentSpec) -> Self {
        Self::shape(spec, "FAILED".into(), "FAILED".into())
    }

    fn shape(spec: &ExperimentSpec, mra: String, emr: String) -> Self {
        let setting = match spec.mode {
            InferenceMode::SingleStep => "single",
            InferenceMode::MultiStep => "multi",
        };
        let context = match spec.strategy_fine {
            Some(fine) if fine != spec.strategy_main => {
                format!("{}/{}", spec.strategy_main.short_name(), fine.short_name())
            }
            _ => spec.strategy_main.short_name().to_string(),
        };
        let flag = |main: bool, fine: Option<bool>| -> String {
            let sign = |b| if b { "+" } else { "-" };
            match fine {
                Some(f) if f != main => format!("{}/{}", sign(main), sign(f)),
                _ => sign(main).to_string(),
            }
        };
        let fine_cfg = spec.config_fine.as_ref();
        TableRow {
            setting: setting.into(),
            context,
            ep: flag(
                spec.config_main.expert_persona,
                fine_cfg.map(|c| c.expert_persona),
            ),
            ld: flag(
                spec.config_main.label_definitions,
                fine_cfg.map(|c| c.label_definitions),
            ),
            ra: flag(spec.config_main.rationale, fine_cfg.map(|c| c.rationale)),
            mra,
            emr,
        }
    }
}

/// Render rows as a markdown table and a CSV with identical numeric values.
pub fn render_table(rows: &[TableRow]) -> (String, String) {
    let header = ["setting", "context", "EP", "LD", "RA", "MRA", "EMR"];
    let mut markdown = format!("| {} |\n", header.join(" | "));
    markdown.push_str("|---|---|---|---|---|---|---|\n");
    let mut csv = header.join(",") + "\n";
    for row in rows {
        let cells = [
            &row.setting,
            &row.context,
            &row.ep,
            &row.ld,
            &row.ra,
            &row.mra,
            &row.emr,
        ];
        markdown.push_str(&format!(
            "| {} |\n",
            cells
                .iter()
                .map(|c| c.as_str())
                .collect::<Vec<_>>()
                .join(" | ")
        ));
        csv.push_str(
            &(cells
                .iter()
                .map(|c| c.as_str())
                .collect::<Vec<_>>()
                .join(",")
                + "\n"),
        );
    }
    (markdown, csv)
}
