//! Expert review store: a triage queue (`queue.json`) plus an append-only
//! decision log (`decisions.log`) replayed on open. Every decision is synced
//! to disk before [`ReviewStore::decide`] returns.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{TriagePolicy, TriageSplit, VoteResult};
use crate::dataset::{mark_entities, Dataset, EntitySpan};
use crate::parsing::ParsedLabel;
use crate::store::format_timestamp;

pub const QUEUE_FILE: &str = "queue.json";
pub const DECISIONS_FILE: &str = "decisions.log";

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("label {label} is not an option for {instance_id}")]
    InvalidLabel { instance_id: String, label: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("no vote for instance {0}")]
    MissingVote(String),
    #[error("review store at {0} has no queue; run triage first")]
    NoQueue(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReviewError + '_ {
    move |e| ReviewError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorVote {
    pub annotator: String,
    pub outcome: ParsedLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub label: String,
    pub reviewer: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub instance_id: String,
    pub pair_type: String,
    pub sentence: String,
    pub marked_sentence: String,
    pub e1: EntitySpan,
    pub e2: EntitySpan,
    /// Canonical schema order, never the shuffled prompt order.
    pub options: Vec<ReviewOption>,
    pub votes: Vec<AnnotatorVote>,
    pub confid: BTreeMap<String, f64>,
    pub rel_index: f64,
    pub selected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoLabel {
    pub instance_id: String,
    pub label: String,
    pub rel_index: f64,
}

/// Contents of `queue.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueFile {
    pub dataset_fingerprint: String,
    pub policy: TriagePolicy,
    pub auto: Vec<AutoLabel>,
    /// Ascending rel_index, then instance id.
    pub items: Vec<ReviewItem>,
}

impl QueueFile {
    /// Builds the queue for a triage split from the votes it was made from.
    pub fn build(dataset: &Dataset, votes: &[VoteResult], split: &TriageSplit) -> Result<Self, ReviewError> {
        let by_id: BTreeMap<&str, &VoteResult> = votes.iter().map(|v| (v.instance_id.as_str(), v)).collect();
        let vote = |id: &str| by_id.get(id).copied().ok_or_else(|| ReviewError::MissingVote(id.to_string()));
        let auto = split
            .auto
            .iter()
            .map(|id| {
                let v = vote(id)?;
                Ok(AutoLabel {
                    instance_id: id.clone(),
                    label: v.selected.clone(),
                    rel_index: v.rel_index,
                })
            })
            .collect::<Result<_, ReviewError>>()?;
        let items = split
            .expert_queue
            .iter()
            .map(|id| {
                let v = vote(id)?;
                let inst = dataset.get(id).ok_or_else(|| ReviewError::UnknownInstance(id.clone()))?;
                let schema = dataset.schema_for(inst);
                let options = schema
                    .labels
                    .iter()
                    .map(|l| ReviewOption {
                        label: l.clone(),
                        text: schema.render_option(l, &inst.e1.surface, &inst.e2.surface).unwrap_or_default(),
                    })
                    .collect();
                let votes = v
                    .assessments
                    .iter()
                    .enumerate()
                    .map(|(k, outcome)| AnnotatorVote {
                        annotator: v.annotators.get(k).cloned().unwrap_or_else(|| format!("annotator{}", k + 1)),
                        outcome: outcome.clone(),
                    })
                    .collect();
                Ok(ReviewItem {
                    instance_id: id.clone(),
                    pair_type: inst.pair_type.clone(),
                    sentence: inst.sentence.clone(),
                    marked_sentence: mark_entities(inst),
                    e1: inst.e1.clone(),
                    e2: inst.e2.clone(),
                    options,
                    votes,
                    confid: v.confid.clone(),
                    rel_index: v.rel_index,
                    selected: v.selected.clone(),
                    decision: None,
                })
            })
            .collect::<Result<_, ReviewError>>()?;
        Ok(Self {
            dataset_fingerprint: dataset.fingerprint(),
            policy: split.policy,
            auto,
            items,
        })
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub instance_id: String,
    pub label: String,
    pub reviewer: String,
    pub timestamp: String,
    /// Sequence number of the decision this one replaces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub instance_id: String,
    pub label: String,
    pub remaining: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superseded: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub reviewed: usize,
    pub remaining: usize,
    pub auto_accepted: usize,
    /// Mean rel_index of the items still waiting, if any.
    pub mean_rel_index_remaining: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Auto,
    Expert,
    /// Queued for review, not yet decided; carries the voted label.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub id: String,
    pub pair_type: String,
    pub sentence: String,
    pub e1: EntitySpan,
    pub e2: EntitySpan,
    pub label: String,
    pub source: LabelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
}

pub struct ReviewStore {
    dir: PathBuf,
    queue: QueueFile,
    index: BTreeMap<String, usize>,
    decisions: BTreeMap<String, LogEntry>,
    next_seq: u64,
    log: File,
}

impl ReviewStore {
    /// Writes a fresh queue. An existing decision log is kept; decisions for
    /// instances no longer queued are ignored on replay.
    pub fn create(dir: &Path, queue: &QueueFile) -> Result<Self, ReviewError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(QUEUE_FILE);
        let tmp = dir.join(".queue.json.tmp");
        let mut json = serde_json::to_string_pretty(queue).expect("queue serializes");
        json.push('\n');
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(json.as_bytes()).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Self::open(dir)
    }

    pub fn open(dir: &Path) -> Result<Self, ReviewError> {
        let queue_path = dir.join(QUEUE_FILE);
        if !queue_path.exists() {
            return Err(ReviewError::NoQueue(dir.to_path_buf()));
        }
        let text = fs::read_to_string(&queue_path).map_err(io_err(&queue_path))?;
        let queue: QueueFile = serde_json::from_str(&text).map_err(|e| ReviewError::Corrupt {
            path: queue_path.clone(),
            message: e.to_string(),
        })?;
        let index = queue
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| (item.instance_id.clone(), i))
            .collect();

        let log_path = dir.join(DECISIONS_FILE);
        let existing = match fs::read_to_string(&log_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(&log_path)(e)),
        };
        // a torn final line from a crash mid-write never got acknowledged
        let complete = existing.rfind('\n').map(|i| &existing[..=i]).unwrap_or("");
        if complete.len() != existing.len() {
            fs::write(&log_path, complete).map_err(io_err(&log_path))?;
        }
        let mut store = Self {
            dir: dir.to_path_buf(),
            queue,
            index,
            decisions: BTreeMap::new(),
            next_seq: 1,
            log: OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(io_err(&log_path))?,
        };
        for (n, line) in complete.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: LogEntry = serde_json::from_str(line).map_err(|e| ReviewError::Corrupt {
                path: log_path.clone(),
                message: format!("line {}: {e}", n + 1),
            })?;
            store.next_seq = store.next_seq.max(entry.seq + 1);
            store.apply(entry);
        }
        Ok(store)
    }

    fn apply(&mut self, entry: LogEntry) {
        if let Some(&i) = self.index.get(&entry.instance_id) {
            self.queue.items[i].decision = Some(Decision {
                label: entry.label.clone(),
                reviewer: entry.reviewer.clone(),
                timestamp: entry.timestamp.clone(),
            });
            self.decisions.insert(entry.instance_id.clone(), entry);
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn queue_file(&self) -> &QueueFile {
        &self.queue
    }

    pub fn item(&self, instance_id: &str) -> Option<&ReviewItem> {
        self.index.get(instance_id).map(|&i| &self.queue.items[i])
    }

    /// Up to `limit` undecided items, least reliable first.
    pub fn pending(&self, limit: usize) -> Vec<ReviewItem> {
        self.queue
            .items
            .iter()
            .filter(|i| i.decision.is_none())
            .take(limit)
            .cloned()
            .collect()
    }

    fn remaining(&self) -> usize {
        self.queue.items.len() - self.decisions.len()
    }

    /// Records an expert decision and syncs it before returning. A second
    /// decision on the same instance wins and records what it superseded.
    pub fn decide(&mut self, instance_id: &str, label: &str, reviewer: &str) -> Result<DecisionOutcome, ReviewError> {
        let item = self
            .item(instance_id)
            .ok_or_else(|| ReviewError::UnknownInstance(instance_id.to_string()))?;
        if !item.options.iter().any(|o| o.label == label) {
            return Err(ReviewError::InvalidLabel {
                instance_id: instance_id.to_string(),
                label: label.to_string(),
            });
        }
        let entry = LogEntry {
            seq: self.next_seq,
            instance_id: instance_id.to_string(),
            label: label.to_string(),
            reviewer: reviewer.to_string(),
            timestamp: format_timestamp(chrono::Utc::now()),
            supersedes: self.decisions.get(instance_id).map(|e| e.seq),
        };
        let mut line = serde_json::to_string(&entry).expect("log entry serializes");
        line.push('\n');
        let path = self.dir.join(DECISIONS_FILE);
        self.log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.log.sync_data().map_err(io_err(&path))?;
        self.next_seq += 1;
        let superseded = entry.supersedes;
        self.apply(entry);
        Ok(DecisionOutcome {
            instance_id: instance_id.to_string(),
            label: label.to_string(),
            remaining: self.remaining(),
            superseded,
        })
    }

    pub fn progress(&self) -> Progress {
        let waiting: Vec<f64> = self
            .queue
            .items
            .iter()
            .filter(|i| i.decision.is_none())
            .map(|i| i.rel_index)
            .collect();
        Progress {
            total: self.queue.items.len(),
            reviewed: self.decisions.len(),
            remaining: waiting.len(),
            auto_accepted: self.queue.auto.len(),
            mean_rel_index_remaining: (!waiting.is_empty())
                .then(|| waiting.iter().sum::<f64>() / waiting.len() as f64),
        }
    }

    /// Final labels in dataset order: expert decisions over voted labels.
    pub fn export(&self, dataset: &Dataset) -> Result<Vec<ExportRow>, ReviewError> {
        let auto: BTreeMap<&str, &AutoLabel> =
            self.queue.auto.iter().map(|a| (a.instance_id.as_str(), a)).collect();
        dataset
            .instances
            .iter()
            .filter(|inst| auto.contains_key(inst.id.as_str()) || self.index.contains_key(&inst.id))
            .map(|inst| {
                let (label, source, reviewer) = if let Some(a) = auto.get(inst.id.as_str()) {
                    (a.label.clone(), LabelSource::Auto, None)
                } else {
                    let item = self.item(&inst.id).expect("filtered above");
                    match &item.decision {
                        Some(d) => (d.label.clone(), LabelSource::Expert, Some(d.reviewer.clone())),
                        None => (item.selected.clone(), LabelSource::Pending, None),
                    }
                };
                Ok(ExportRow {
                    id: inst.id.clone(),
                    pair_type: inst.pair_type.clone(),
                    sentence: inst.sentence.clone(),
                    e1: inst.e1.clone(),
                    e2: inst.e2.clone(),
                    label,
                    source,
                    reviewer,
                })
            })
            .collect()
    }

    pub fn log_entries(&self) -> Result<Vec<LogEntry>, ReviewError> {
        let path = self.dir.join(DECISIONS_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| ReviewError::Corrupt {
                    path: path.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

pub fn export_jsonl(rows: &[ExportRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}
