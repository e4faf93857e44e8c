use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use framecraft::context::{build_context, generate_summary, ContextStrategy, SummaryKind};
use framecraft::corpus::{load_annotations, load_documents, read_labeled_rows, AnnotatedMention};
use framecraft::eval::{evaluate, EvalReport};
use framecraft::inference::Prediction;
use framecraft::llmclient::{
    CachedBackend, ChatBackend, HttpBackend, ModelParams, OracleBackend, ScriptedBackend,
};
use framecraft::promptkit::{render, PromptConfig, PromptSetting};
use framecraft::runner::{format_ratio2, load_grid, run_experiment, run_grid, ExperimentSpec};
use framecraft::taxonomy::{parse_main_role, Taxonomy};

#[derive(Parser)]
#[command(
    name = "framecraft",
    version,
    about = "Entity framing classification harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment spec over a corpus and write run artifacts.
    Run(RunArgs),
    /// Run an ablation grid of experiment specs and print the result table.
    Grid(GridArgs),
    /// Score a predictions TSV against a gold TSV.
    Evaluate(EvaluateArgs),
    /// Print the system and user prompts for one annotated mention.
    RenderPrompt(RenderPromptArgs),
    /// Generate a neutral or framing-preserved summary for one document.
    Summarize(SummarizeArgs),
    /// Emit the role hierarchy and definition texts as JSON.
    DumpTaxonomy,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Http,
    Scripted,
    Oracle,
}

#[derive(clap::Args)]
struct BackendArgs {
    /// Which chat backend to use.
    #[arg(long, value_enum, default_value = "oracle")]
    backend: BackendKind,
    /// Scripted-backend fixture file (JSON object keyed by request digest,
    /// or JSON array replayed in order).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Chat-completions endpoint base, e.g. https://api.openai.com/v1
    #[arg(
        long,
        env = "FRAMECRAFT_ENDPOINT",
        default_value = "https://api.openai.com/v1"
    )]
    endpoint: String,
    /// Response cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl BackendArgs {
    /// Build the inner backend; `annotations` feeds the oracle's gold map.
    fn build(&self, annotations: &[AnnotatedMention]) -> anyhow::Result<Arc<dyn ChatBackend>> {
        Ok(match self.backend {
            BackendKind::Http => Arc::new(HttpBackend::from_env(&self.endpoint)?),
            BackendKind::Scripted => {
                let path = self
                    .fixtures
                    .as_deref()
                    .context("--fixtures is required with --backend scripted")?;
                Arc::new(ScriptedBackend::from_fixture_file(path)?)
            }
            BackendKind::Oracle => {
                let mut gold = HashMap::new();
                for (mention, label) in annotations {
                    let label = label
                        .as_ref()
                        .context("oracle backend needs gold labels; run without --unlabeled")?;
                    gold.insert(mention.entity.clone(), (label.main, label.fine.clone()));
                }
                Arc::new(OracleBackend::new(gold))
            }
        })
    }

    /// Same, with the cache layered on when configured.
    fn build_cached(
        &self,
        annotations: &[AnnotatedMention],
    ) -> anyhow::Result<Arc<dyn ChatBackend>> {
        let inner = self.build(annotations)?;
        Ok(match &self.cache {
            Some(dir) => Arc::new(CachedBackend::new(inner, dir.clone())),
            None => inner,
        })
    }
}

#[derive(clap::Args)]
struct CorpusArgs {
    /// Directory of `<id>.txt` article files.
    #[arg(long)]
    docs: PathBuf,
    /// Annotation TSV (doc_id, entity, start, end[, main_role, fine_roles]).
    #[arg(long)]
    ann: PathBuf,
    /// Read 4-column annotations without gold labels.
    #[arg(long)]
    unlabeled: bool,
}

impl CorpusArgs {
    fn load(&self) -> anyhow::Result<(Vec<framecraft::Document>, Vec<AnnotatedMention>)> {
        let docs = load_documents(&self.docs)?;
        let annotations = load_annotations(&self.ann, &docs, !self.unlabeled)?;
        Ok((docs, annotations))
    }
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Root directory for run artifacts.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct GridArgs {
    /// Grid JSON file (spec file list and/or axes block).
    #[arg(long)]
    grid: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Root directory for run artifacts.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    /// Gold 6-column TSV.
    #[arg(long)]
    gold: PathBuf,
    /// Predictions 6-column TSV.
    #[arg(long)]
    pred: PathBuf,
    /// Emit the report as JSON instead of a text table.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SettingArg {
    SingleStep,
    MultiStepMain,
    MultiStepFine,
}

#[derive(clap::Args)]
struct RenderPromptArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// 0-based index into the annotation rows.
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long, value_enum)]
    setting: SettingArg,
    /// Candidate main role; required for multi-step-fine.
    #[arg(long)]
    main_role: Option<String>,
    #[arg(long, value_enum)]
    strategy: ContextStrategy,
    #[arg(long)]
    persona: bool,
    #[arg(long)]
    definitions: bool,
    #[arg(long)]
    rationale: bool,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value = "gpt-4o-2024-08-06")]
    model: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Neutral,
    Framing,
}

#[derive(clap::Args)]
struct SummarizeArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Directory of `<id>.txt` article files.
    #[arg(long)]
    docs: PathBuf,
    /// Document id (filename stem).
    #[arg(long)]
    doc: String,
    /// Entity surface form to focus on.
    #[arg(long)]
    entity: String,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value = "gpt-4o-2024-08-06")]
    model: String,
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::RenderPrompt(args) => cmd_render_prompt(args),
        Command::Summarize(args) => cmd_summarize(args),
        Command::DumpTaxonomy => {
            println!(
                "{}",
                serde_json::to_string_pretty(&Taxonomy::shared().to_json())?
            );
            Ok(())
        }
    }
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let spec = ExperimentSpec::from_file(&args.spec)?;
    let (docs, annotations) = args.corpus.load()?;
    let backend = args.backend.build(&annotations)?;
    let out_dir = args.out.join(&spec.name);
    let artifacts = run_experiment(
        &spec,
        &docs,
        &annotations,
        backend,
        args.backend.cache.as_deref(),
        &out_dir,
    )?;
    println!(
        "run {} finished in {:.2}s",
        artifacts.name,
        artifacts.wall_time.as_secs_f64()
    );
    println!("  instances      {}", annotations.len());
    println!("  backend calls  {}", artifacts.backend_calls);
    println!("  errors         {}", artifacts.error_count);
    if let Some(report) = &artifacts.report {
        print_report_table(report);
    }
    println!("  artifacts      {}", artifacts.out_dir.display());
    Ok(())
}

fn cmd_grid(args: GridArgs) -> anyhow::Result<()> {
    let specs = load_grid(&args.grid)?;
    let (docs, annotations) = args.corpus.load()?;
    let backend = args.backend.build(&annotations)?;
    let outcome = run_grid(
        &specs,
        &docs,
        &annotations,
        backend,
        args.backend.cache.as_deref(),
        &args.out,
    )?;
    print!("{}", outcome.markdown);
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("table.md"), &outcome.markdown)?;
    std::fs::write(args.out.join("table.csv"), &outcome.csv)?;
    for row in &outcome.rows {
        if let Err(message) = &row.outcome {
            eprintln!("spec {} failed: {message}", row.spec.name);
        }
    }
    println!("tables written under {}", args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let gold_rows = read_labeled_rows(&args.gold)?;
    let pred_rows = read_labeled_rows(&args.pred)?;
    let mut by_mention: HashMap<_, _> = HashMap::new();
    for (mention, label) in &pred_rows {
        if label.fine.len() > 2 {
            bail!(
                "prediction for {}/{} carries more than two fine roles",
                mention.doc_id,
                mention.entity
            );
        }
        by_mention.insert(
            (
                mention.doc_id.clone(),
                mention.entity.clone(),
                mention.start,
                mention.end,
            ),
            label.clone(),
        );
    }
    let mut pairs = Vec::new();
    for (mention, gold) in &gold_rows {
        let key = (
            mention.doc_id.clone(),
            mention.entity.clone(),
            mention.start,
            mention.end,
        );
        let label = by_mention.get(&key).with_context(|| {
            format!(
                "no prediction for {} {:?} at {}..{}",
                mention.doc_id, mention.entity, mention.start, mention.end
            )
        })?;
        let prediction = Prediction {
            main: label.main,
            fine: label.fine.clone(),
            reasoning: None,
            flagged: false,
        };
        pairs.push((prediction, gold.clone()));
    }
    if pred_rows.len() != gold_rows.len() {
        bail!(
            "gold has {} rows but predictions have {}",
            gold_rows.len(),
            pred_rows.len()
        );
    }
    let report = evaluate(&pairs)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_report_table(&report);
    }
    Ok(())
}

fn print_report_table(report: &EvalReport) {
    println!("  {:<14} {}", "instances", report.n);
    println!(
        "  {:<14} {}  ({}/{})",
        "MRA",
        format_ratio2(report.main_matches, report.n),
        report.main_matches,
        report.n
    );
    println!(
        "  {:<14} {}  ({}/{})",
        "EMR",
        format_ratio2(report.exact_matches, report.n),
        report.exact_matches,
        report.n
    );
    println!("  {:<14} {}", "flagged", report.flagged_count);
    println!("  {:<14} {:<6} correct", "main role", "gold");
    for (main, counts) in &report.per_main {
        println!(
            "  {:<14} {:<6} {}",
            main.name(),
            counts.gold,
            counts.correct_main
        );
    }
}

fn cmd_render_prompt(args: RenderPromptArgs) -> anyhow::Result<()> {
    let (docs, annotations) = args.corpus.load()?;
    let (mention, _) = annotations
        .get(args.row)
        .with_context(|| format!("row {} out of range ({} rows)", args.row, annotations.len()))?;
    let doc = docs
        .iter()
        .find(|d| d.id == mention.doc_id)
        .context("annotation references a missing document")?;
    let setting = match args.setting {
        SettingArg::SingleStep => PromptSetting::SingleStep,
        SettingArg::MultiStepMain => PromptSetting::MultiStepMain,
        SettingArg::MultiStepFine => {
            let name = args
                .main_role
                .as_deref()
                .context("--main-role is required with --setting multi-step-fine")?;
            PromptSetting::MultiStepFine(parse_main_role(name)?)
        }
    };
    let config = PromptConfig {
        expert_persona: args.persona,
        label_definitions: args.definitions,
        rationale: args.rationale,
    };
    let params = ModelParams {
        model: args.model.clone(),
        ..ModelParams::default()
    };
    let backend = if args.strategy.is_summary() {
        Some(args.backend.build_cached(&annotations)?)
    } else {
        None
    };
    let context = build_context(doc, mention, args.strategy, &params, backend.as_deref())?;
    let prompt = render(
        setting,
        &config,
        &mention.entity,
        &context,
        Taxonomy::shared(),
    );
    println!("=== SYSTEM ===");
    println!("{}", prompt.system);
    println!("=== USER ===");
    println!("{}", prompt.user);
    Ok(())
}

fn cmd_summarize(args: SummarizeArgs) -> anyhow::Result<()> {
    let docs = load_documents(&args.docs)?;
    let doc = docs
        .iter()
        .find(|d| d.id == args.doc)
        .with_context(|| format!("no document with id {:?}", args.doc))?;
    let kind = match args.kind {
        KindArg::Neutral => SummaryKind::Neutral,
        KindArg::Framing => SummaryKind::FramingPreserved,
    };
    let params = ModelParams {
        model: args.model.clone(),
        ..ModelParams::default()
    };
    let backend = args.backend.build_cached(&[])?;
    let summary = generate_summary(doc, &args.entity, kind, &params, backend.as_ref())?;
    println!("{summary}");
    Ok(())
}
