//! Glue between the run store and the analysis modules: locating and loading
//! runs, checking them against the dataset, and producing the reports the CLI
//! writes.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AggregationError, PanelMember};
use crate::backends::{BackendError, RunError};
use crate::config::ConfigError;
use crate::costing::CostError;
use crate::dataset::{Dataset, DatasetError};
use crate::metrics::{
    cohen_kappa, evaluate, fleiss_kappa_from_vectors, table_report, EvalMode, LabelVector, MetricsError, RunKey,
    TableReport,
};
use crate::parsing::{AnnotationRecord, ResponseParser};
use crate::prompting::{PromptError, PromptVariant};
use crate::review::ReviewError;
use crate::store::{RunManifest, RunStore, StoreError, MANIFEST_FILE};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("run {run} was made on dataset {run_fingerprint}, but the dataset given is {dataset_fingerprint}")]
    FingerprintMismatch {
        run: String,
        run_fingerprint: String,
        dataset_fingerprint: String,
    },
    #[error("missing: {}", .0.join(", "))]
    Missing(Vec<String>),
}

impl PipelineError {
    /// True when the failure came from talking to a remote backend.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            PipelineError::Backend(BackendError::Transport { .. })
                | PipelineError::Run(RunError::Backend(BackendError::Transport { .. }) | RunError::Incomplete { .. })
        )
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn io(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Conventional location of one run: `root/backend/variant/t<temp>/run<k>`.
pub fn run_dir(root: &Path, backend: &str, variant: PromptVariant, temperature: f64, run_index: u32) -> PathBuf {
    root.join(backend)
        .join(variant.as_str())
        .join(format!("t{temperature}"))
        .join(format!("run{run_index}"))
}

/// Every directory under `root` holding a run manifest, sorted by path.
pub fn discover_runs(root: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST_FILE).is_file() {
            found.push(dir.clone());
        }
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if dir == root => return Err(io(&dir, e)),
            Err(_) => continue,
        };
        for entry in entries.flatten() {
            if entry.file_type().is_ok_and(|t| t.is_dir()) {
                stack.push(entry.path());
            }
        }
    }
    found.sort();
    Ok(found)
}

/// A completed run with its records parsed.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<AnnotationRecord>,
}

impl LoadedRun {
    pub fn label(&self) -> String {
        self.manifest.annotator_label()
    }

    pub fn key(&self) -> RunKey {
        RunKey {
            annotator: self.manifest.backend.name.clone(),
            variant: self.manifest.variant,
            temperature: self.manifest.temperature,
            run_index: self.manifest.run_index,
        }
    }

    pub fn labels(&self, dataset: &Dataset) -> Result<LabelVector, PipelineError> {
        let ids: Vec<String> = dataset.instances.iter().map(|i| i.id.clone()).collect();
        Ok(LabelVector::from_records(&ids, &self.records)?)
    }
}

/// Loads a finished run, refusing runs made on a different dataset.
pub fn load_run(dir: &Path, dataset: &Dataset, parser: &ResponseParser) -> Result<LoadedRun, PipelineError> {
    let store = RunStore::existing(dir)?;
    let manifest = store
        .manifest()?
        .ok_or_else(|| PipelineError::Missing(vec![format!("{} (no manifest; run incomplete)", dir.display())]))?;
    let fingerprint = dataset.fingerprint();
    if manifest.dataset_fingerprint != fingerprint {
        return Err(PipelineError::FingerprintMismatch {
            run: dir.display().to_string(),
            run_fingerprint: manifest.dataset_fingerprint,
            dataset_fingerprint: fingerprint,
        });
    }
    let index = dataset.index();
    let mut records = Vec::new();
    for r in store.read_records()? {
        let inst = index
            .get(r.response.instance_id.as_str())
            .ok_or_else(|| PipelineError::Missing(vec![format!("instance {}", r.response.instance_id)]))?;
        records.push(AnnotationRecord::from_run_record(&r, inst, dataset.schema_for(inst), parser));
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        records,
    })
}

pub fn load_runs(dirs: &[PathBuf], dataset: &Dataset, parser: &ResponseParser) -> Result<Vec<LoadedRun>, PipelineError> {
    let missing: Vec<String> = dirs
        .iter()
        .filter(|d| !d.join(MANIFEST_FILE).is_file())
        .map(|d| d.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::Missing(missing));
    }
    dirs.iter().map(|d| load_run(d, dataset, parser)).collect()
}

/// Summary report: one row per annotator × prompt × temperature, runs
/// averaged.
pub fn evaluate_runs(dataset: &Dataset, runs: &[LoadedRun], mode: EvalMode) -> Result<TableReport, PipelineError> {
    let reports = runs
        .iter()
        .map(|r| Ok((r.key(), evaluate(&r.labels(dataset)?, dataset, mode)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(table_report(mode, reports)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseKappa {
    pub a: String,
    pub b: String,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub annotators: Vec<String>,
    pub cohen: Vec<PairwiseKappa>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleiss: Option<f64>,
}

/// Pairwise Cohen's kappa for every pair of runs, and Fleiss' kappa when
/// there are at least two.
pub fn agreement(dataset: &Dataset, runs: &[LoadedRun]) -> Result<AgreementReport, PipelineError> {
    let vectors = runs.iter().map(|r| r.labels(dataset)).collect::<Result<Vec<_>, _>>()?;
    let names: Vec<String> = runs.iter().map(LoadedRun::label).collect();
    let mut cohen = Vec::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            cohen.push(PairwiseKappa {
                a: names[i].clone(),
                b: names[j].clone(),
                kappa: cohen_kappa(&vectors[i], &vectors[j])?,
            });
        }
    }
    let fleiss = if vectors.len() >= 2 {
        Some(fleiss_kappa_from_vectors(&vectors)?)
    } else {
        None
    };
    Ok(AgreementReport {
        annotators: names,
        cohen,
        fleiss,
    })
}

/// Panel of annotators for voting, one member per run.
pub fn panel(runs: &[LoadedRun]) -> Vec<PanelMember> {
    runs.iter()
        .map(|r| PanelMember {
            name: r.label(),
            records: r.records.clone(),
        })
        .collect()
}
