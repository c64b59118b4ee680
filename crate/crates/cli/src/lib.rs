//! Command-line driver for the annotation pipeline and the expert review
//! server.

use std::path::PathBuf;

use annotate_core::backends::{BackendError, RunError};
use annotate_core::metrics::EvalMode;
use annotate_core::pipeline::PipelineError;
use annotate_core::prompting::PromptVariant;
use clap::{ArgGroup, Args, Parser, Subcommand};

pub mod commands;
pub mod project;
pub mod server;

pub use project::Project;

#[derive(Debug, Parser)]
#[command(name = "annotate", version, about = "LLM relation annotation, aggregation and expert triage")]
pub struct Cli {
    #[command(flatten)]
    pub project: ProjectArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus per-field overrides. Flags win over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ProjectArgs {
    /// TOML or JSON project config. Defaults to ./annotate.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub schemas: Option<PathBuf>,
    #[arg(long, global = true)]
    pub exemplars: Option<PathBuf>,
    #[arg(long, global = true)]
    pub styles: Option<PathBuf>,
    #[arg(long, global = true)]
    pub similarity: Option<PathBuf>,
    #[arg(long, global = true)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pricing: Option<PathBuf>,
    #[arg(long, global = true)]
    pub runs_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub review_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Annotate the dataset with one backend over a grid of variants, temperatures and runs.
    Annotate(AnnotateArgs),
    /// Vote across runs with RelIndex and write the vote file.
    Aggregate(AggregateArgs),
    /// Accuracy and micro-F1 per run, averaged per annotator, prompt and temperature.
    Evaluate(EvaluateArgs),
    /// Pairwise Cohen and overall Fleiss kappa between runs.
    Agreement(RunsOutArgs),
    /// Coverage-accuracy curve from a vote file.
    Curve(CurveArgs),
    /// Split votes into auto-accepted and expert-review sets and build the review queue.
    Triage(TriageArgs),
    /// Cost and time estimates for runs, explicit averages or the human baseline.
    Cost(CostArgs),
    /// Serve the review API and static UI.
    Serve(ServeArgs),
    /// Write the final labels: auto labels with expert decisions applied.
    Export(OutArgs),
    /// Write a synthetic dataset, schemas, exemplars and a mock project config.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Backend name from the config; `mock` falls back to a built-in profile.
    #[arg(long)]
    pub backend: String,
    /// Prompt variants; all six when omitted.
    #[arg(long = "variant", value_parser = parse_variant)]
    pub variants: Vec<PromptVariant>,
    /// Temperatures; the backend's configured one when omitted.
    #[arg(long = "temp")]
    pub temperatures: Vec<f64>,
    /// Runs per cell, numbered from 1.
    #[arg(long, default_value_t = 1)]
    pub runs: u32,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_parallel: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RunsOutArgs {
    /// Run directories; every run under the runs dir when omitted.
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub runs: RunsOutArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub runs: RunsOutArgs,
    #[arg(long, value_parser = parse_mode, default_value = "all_classes")]
    pub mode: EvalMode,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub votes: PathBuf,
    /// Number of evenly spaced coverage steps.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("policy").required(true).args(["coverage", "threshold"])))]
pub struct TriageArgs {
    #[arg(long)]
    pub votes: PathBuf,
    /// Auto-accept the most reliable fraction of instances.
    #[arg(long)]
    pub coverage: Option<f64>,
    /// Auto-accept instances with rel_index at or above this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Where to write the split; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,
    /// Pricing model name; each run's configured pricing when omitted.
    #[arg(long)]
    pub model: Option<String>,
    /// Explicit instance count instead of runs.
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long, default_value_t = 0.0)]
    pub avg_input: f64,
    #[arg(long, default_value_t = 0.0)]
    pub avg_output: f64,
    #[arg(long, default_value_t = 0.0)]
    pub avg_seconds: f64,
    /// Human baseline report instead.
    #[arg(long)]
    pub human: bool,
    #[arg(long, default_value_t = 45.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 7.25)]
    pub wage: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory of UI assets served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_variant(s: &str) -> Result<PromptVariant, String> {
    s.parse().map_err(|e: annotate_core::prompting::PromptError| e.to_string())
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    match s {
        "all_classes" => Ok(EvalMode::AllClasses),
        "exclude_no_relation" => Ok(EvalMode::ExcludeNoRelation),
        other => Err(format!("unknown mode {other} (all_classes, exclude_no_relation)")),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    commands::dispatch(cli)
}

/// 2 for transport failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let transport = err.chain().any(|cause| {
        cause.downcast_ref::<PipelineError>().is_some_and(PipelineError::is_transport)
            || matches!(cause.downcast_ref::<BackendError>(), Some(BackendError::Transport { .. }))
            || matches!(
                cause.downcast_ref::<RunError>(),
                Some(RunError::Incomplete { .. } | RunError::Backend(BackendError::Transport { .. }))
            )
    });
    if transport {
        2
    } else {
        1
    }
}
