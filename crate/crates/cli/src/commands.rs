use std::io::Write;
use std::path::{Path, PathBuf};

use annotate_core::aggregation::{coverage_curve, curve_csv, default_steps, gold_map, panel_votes, triage, TriagePolicy, VoteResult};
use annotate_core::backends::{make_annotator, run_annotation};
use annotate_core::dataset::Dataset;
use annotate_core::costing::{estimate_cost, find_pricing, human_report, CostEstimate, UsageStats};
use annotate_core::pipeline::{agreement, evaluate_runs, panel, read_json, run_dir, write_json, write_text, PipelineError};
use annotate_core::prompting::PromptVariant;
use annotate_core::review::{export_jsonl, QueueFile, ReviewStore};
use annotate_core::store::RunStore;
use annotate_core::synth::{proportional_counts, synthetic_bank, synthetic_dataset};
use anyhow::Context;
use serde::Serialize;

use crate::project::{builtin_mock, Project};
use crate::{
    AggregateArgs, AnnotateArgs, Cli, Command, CostArgs, CurveArgs, EvaluateArgs, OutArgs, RunsOutArgs, ServeArgs,
    SynthArgs, TriageArgs,
};

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    if let Command::Synth(args) = &cli.command {
        return synth(args);
    }
    let project = Project::resolve(&cli.project)?;
    match cli.command {
        Command::Annotate(a) => annotate(&project, &a),
        Command::Aggregate(a) => aggregate(&project, &a),
        Command::Evaluate(a) => evaluate(&project, &a),
        Command::Agreement(a) => agreement_cmd(&project, &a),
        Command::Curve(a) => curve(&project, &a),
        Command::Triage(a) => triage_cmd(&project, &a),
        Command::Cost(a) => cost(&project, &a),
        Command::Serve(a) => serve(&project, &a),
        Command::Export(a) => export(&project, &a),
        Command::Synth(_) => unreachable!("handled above"),
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), PipelineError> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            let mut text = serde_json::to_string_pretty(value).expect("report serializes");
            text.push('\n');
            to_stdout(&text)
        }
    }
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<(), PipelineError> {
    match out {
        Some(path) => write_text(path, text),
        None => to_stdout(text),
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn to_stdout(text: &str) -> Result<(), PipelineError> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(PipelineError::Io {
            path: PathBuf::from("<stdout>"),
            message: e.to_string(),
        }),
        _ => Ok(()),
    }
}

fn annotate(project: &Project, args: &AnnotateArgs) -> anyhow::Result<()> {
    let dataset = project.dataset()?;
    let bank = project.bank()?;
    let styles = project.styles()?;
    let mut backend = project.backend(&args.backend)?;
    if let Some(seed) = args.seed {
        backend.seed = Some(seed);
    }
    if let Some(p) = args.max_parallel {
        backend.max_parallel = p;
    }
    let variants = if args.variants.is_empty() {
        PromptVariant::ALL.to_vec()
    } else {
        args.variants.clone()
    };
    let temperatures = if args.temperatures.is_empty() {
        vec![backend.temperature]
    } else {
        args.temperatures.clone()
    };
    for &temperature in &temperatures {
        let mut config = backend.clone();
        config.temperature = temperature;
        let annotator = make_annotator(&config, &dataset, &styles).map_err(PipelineError::from)?;
        for &variant in &variants {
            for run_index in 1..=args.runs.max(1) {
                let dir = run_dir(&project.config.runs_dir, &config.name, variant, temperature, run_index);
                let store = RunStore::open(&dir).map_err(PipelineError::from)?;
                let manifest = run_annotation(&dataset, &bank, annotator.as_ref(), variant, run_index, &store)
                    .map_err(PipelineError::from)
                    .with_context(|| format!("run {}", dir.display()))?;
                println!(
                    "{}\t{}\t{} instances\t{} in / {} out tokens",
                    manifest.run_id,
                    dir.display(),
                    manifest.totals.instances,
                    manifest.totals.input_tokens,
                    manifest.totals.output_tokens
                );
            }
        }
    }
    Ok(())
}

fn aggregate(project: &Project, args: &AggregateArgs) -> anyhow::Result<()> {
    let dataset = project.dataset()?;
    let runs = project.runs(&args.runs.runs, &dataset)?;
    let sims = project.similarity(&dataset)?;
    let votes = panel_votes(&dataset, &panel(&runs), &sims).map_err(PipelineError::from)?;
    emit_json(args.runs.out.as_deref(), &votes)?;
    log::info!("{} votes from {} annotators", votes.len(), runs.len());
    Ok(())
}

fn evaluate(project: &Project, args: &EvaluateArgs) -> anyhow::Result<()> {
    let dataset = project.dataset()?;
    let runs = project.runs(&args.runs.runs, &dataset)?;
    let report = evaluate_runs(&dataset, &runs, args.mode)?;
    emit_json(args.runs.out.as_deref(), &report)?;
    Ok(())
}

fn agreement_cmd(project: &Project, args: &RunsOutArgs) -> anyhow::Result<()> {
    let dataset = project.dataset()?;
    let runs = project.runs(&args.runs, &dataset)?;
    emit_json(args.out.as_deref(), &agreement(&dataset, &runs)?)?;
    Ok(())
}

fn curve(project: &Project, args: &CurveArgs) -> anyhow::Result<()> {
    let votes: Vec<VoteResult> = read_json(&args.votes)?;
    let gold = gold_map(&project.dataset()?);
    let points = coverage_curve(&votes, &gold, &default_steps(args.steps.max(1))).map_err(PipelineError::from)?;
    if args.json {
        emit_json(args.out.as_deref(), &points)?;
    } else {
        emit_text(args.out.as_deref(), &curve_csv(&points))?;
    }
    Ok(())
}

fn triage_cmd(project: &Project, args: &TriageArgs) -> anyhow::Result<()> {
    let dataset = project.dataset()?;
    let votes: Vec<VoteResult> = read_json(&args.votes)?;
    let policy = match (args.coverage, args.threshold) {
        (Some(c), None) => TriagePolicy::Coverage(c),
        (None, Some(t)) => TriagePolicy::Threshold(t),
        _ => unreachable!("clap enforces exactly one policy"),
    };
    let split = triage(&votes, policy).map_err(PipelineError::from)?;
    let queue = QueueFile::build(&dataset, &votes, &split).map_err(PipelineError::from)?;
    let store = ReviewStore::create(&project.config.review_dir, &queue).map_err(PipelineError::from)?;
    emit_json(args.out.as_deref(), &split)?;
    let progress = store.progress();
    log::info!(
        "{} auto-accepted, {} queued for review in {}",
        progress.auto_accepted,
        progress.total,
        project.config.review_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunCost {
    run: String,
    usage: UsageStats,
    estimate: CostEstimate,
}

fn cost(project: &Project, args: &CostArgs) -> anyhow::Result<()> {
    let out = args.out.as_deref();
    if args.human {
        let n = match args.n {
            Some(n) => n,
            None => project.dataset()?.instances.len() as u64,
        };
        let report = human_report(n, args.seconds, args.wage);
        eprintln!("{report}");
        emit_json(out, &report)?;
        return Ok(());
    }
    let models = project.pricing()?;
    if let Some(n) = args.n {
        let name = args.model.as_deref().context("--n needs --model to pick a pricing model")?;
        let pricing = find_pricing(&models, name).map_err(PipelineError::from)?;
        let usage = UsageStats {
            n,
            avg_input: args.avg_input,
            avg_output: args.avg_output,
            avg_seconds: args.avg_seconds,
            unit: pricing.unit(),
        };
        emit_json(out, &estimate_cost(&usage, pricing).map_err(PipelineError::from)?)?;
        return Ok(());
    }
    let dataset = project.dataset()?;
    let runs = project.runs(&args.runs, &dataset)?;
    let mut costs = Vec::new();
    for run in &runs {
        let name = args.model.as_deref().unwrap_or(&run.manifest.backend.pricing);
        let pricing = find_pricing(&models, name).map_err(PipelineError::from)?;
        let usage = UsageStats::from_totals(&run.manifest.totals, pricing.unit());
        let estimate = estimate_cost(&usage, pricing).map_err(PipelineError::from)?;
        costs.push(RunCost {
            run: run.label(),
            usage,
            estimate,
        });
    }
    emit_json(out, &costs)?;
    Ok(())
}

/// Review store for the project dataset; a queue built from other data is a
/// hard error.
fn review_store(project: &Project, dataset: &Dataset) -> Result<ReviewStore, PipelineError> {
    let store = ReviewStore::open(&project.config.review_dir)?;
    let queued = &store.queue_file().dataset_fingerprint;
    let fingerprint = dataset.fingerprint();
    if *queued != fingerprint {
        return Err(PipelineError::FingerprintMismatch {
            run: project.config.review_dir.display().to_string(),
            run_fingerprint: queued.clone(),
            dataset_fingerprint: fingerprint,
        });
    }
    Ok(store)
}

fn serve(project: &Project, args: &ServeArgs) -> anyhow::Result<()> {
    let dataset = project.dataset()?;
    let store = review_store(project, &dataset)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(crate::server::serve(&args.addr, store, dataset, args.static_dir.clone()))
}

fn export(project: &Project, args: &OutArgs) -> anyhow::Result<()> {
    let dataset = project.dataset()?;
    let store = review_store(project, &dataset)?;
    let rows = store.export(&dataset).map_err(PipelineError::from)?;
    emit_text(args.out.as_deref(), &export_jsonl(&rows))?;
    Ok(())
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let dataset = synthetic_dataset(&proportional_counts(args.n), args.seed);
    let dir: PathBuf = args.out.clone();
    write_text(&dir.join("dataset.jsonl"), &dataset.to_jsonl())?;
    write_text(&dir.join("schemas.json"), &dataset.schemas_to_json())?;
    write_text(&dir.join("exemplars.json"), &synthetic_bank().to_json())?;
    let config = serde_json::json!({
        "dataset": "dataset.jsonl",
        "schemas": "schemas.json",
        "exemplars": "exemplars.json",
        "runs_dir": "runs",
        "review_dir": "review",
        "backends": [builtin_mock()],
    });
    write_json(&dir.join("annotate.json"), &config)?;
    println!("{} instances written to {}", dataset.instances.len(), dir.display());
    Ok(())
}
