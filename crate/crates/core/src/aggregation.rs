//! Combining several annotators per instance: plain majority vote,
//! similarity-weighted RelIndex voting, coverage–accuracy curves and triage.
//!
//! RelIndex: with `K` outcomes `a_1..a_K` and a label similarity `sim`,
//! `confid(l) = (1/K) * Σ_i sim(a_i, l)`; the selected label is the argmax and
//! `rel_index` the maximum. Blanks add nothing to any label but still count
//! in `K`; a hallucination counts as its canonical style when that style is a
//! schema label, and as a blank otherwise.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, RelationSchema};
use crate::parsing::{AnnotationRecord, ParsedLabel};

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no outcomes to vote on")]
    NoOutcomes,
    #[error("no usable votes: every outcome is blank")]
    NoUsableVotes,
    #[error("label {label} is not in the {pair_type} similarity matrix")]
    UnknownLabel { pair_type: String, label: String },
    #[error("similarity matrix for {pair_type}: {reason}")]
    InvalidMatrix { pair_type: String, reason: String },
    #[error("no similarity matrix for pair type {0}")]
    MissingMatrix(String),
    #[error("similarity file: {0}")]
    File(String),
    #[error("no votes")]
    EmptyVotes,
    #[error("instance {0} has no gold label")]
    MissingGold(String),
    #[error("coverage step {0} outside (0, 1]")]
    BadStep(f64),
    #[error("invalid triage policy: {0}")]
    BadPolicy(String),
    #[error("annotator {annotator} has no outcome for instance(s): {}", missing.join(", "))]
    MissingOutcomes { annotator: String, missing: Vec<String> },
    #[error("instance {0} is not in the dataset")]
    UnknownInstance(String),
}

/// Expert-declared label closeness for one entity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pair_type: String,
    labels: Vec<String>,
    values: BTreeMap<(String, String), f64>,
}

impl SimilarityMatrix {
    pub fn identity(schema: &RelationSchema) -> Self {
        Self {
            pair_type: schema.pair_type.clone(),
            labels: schema.labels.clone(),
            values: BTreeMap::new(),
        }
    }

    /// Builds a matrix from nested `label -> label -> value` entries. Missing
    /// off-diagonal entries are 0, a one-sided entry is mirrored, and the
    /// diagonal must be 1 if given.
    pub fn from_entries(
        schema: &RelationSchema,
        entries: &BTreeMap<String, BTreeMap<String, f64>>,
    ) -> Result<Self, AggregationError> {
        let invalid = |reason: String| AggregationError::InvalidMatrix {
            pair_type: schema.pair_type.clone(),
            reason,
        };
        let mut values = BTreeMap::new();
        for (a, row) in entries {
            for (b, &v) in row {
                for l in [a, b] {
                    if !schema.contains(l) {
                        return Err(invalid(format!("unknown label {l}")));
                    }
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(invalid(format!("sim({a}, {b}) = {v} outside [0, 1]")));
                }
                if a == b {
                    if v != 1.0 {
                        return Err(invalid(format!("sim({a}, {a}) must be 1")));
                    }
                    continue;
                }
                let key = if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
                if let Some(prev) = values.insert(key, v) {
                    if prev != v {
                        return Err(invalid(format!("sim({a}, {b}) is not symmetric")));
                    }
                }
            }
        }
        values.retain(|_, v| *v != 0.0);
        Ok(Self {
            pair_type: schema.pair_type.clone(),
            labels: schema.labels.clone(),
            values,
        })
    }

    pub fn pair_type(&self) -> &str {
        &self.pair_type
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn sim(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        let key = if a < b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.values.get(&key).copied().unwrap_or(0.0)
    }

    /// Nested form used by the similarity file, with every cell present.
    pub fn to_entries(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        self.labels
            .iter()
            .map(|a| (a.clone(), self.labels.iter().map(|b| (b.clone(), self.sim(a, b))).collect()))
            .collect()
    }
}

/// Similarity matrices for every pair type of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySet {
    matrices: BTreeMap<String, SimilarityMatrix>,
}

type SimilarityFile = BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>;

impl SimilaritySet {
    pub fn identity(schemas: &BTreeMap<String, RelationSchema>) -> Self {
        Self {
            matrices: schemas
                .iter()
                .map(|(p, s)| (p.clone(), SimilarityMatrix::identity(s)))
                .collect(),
        }
    }

    /// Parses `pair_type -> label -> label -> value`. Pair types without an
    /// entry get the identity matrix.
    pub fn from_json(text: &str, schemas: &BTreeMap<String, RelationSchema>) -> Result<Self, AggregationError> {
        let raw: SimilarityFile = serde_json::from_str(text).map_err(|e| AggregationError::File(e.to_string()))?;
        let mut set = Self::identity(schemas);
        for (pair_type, entries) in &raw {
            let schema = schemas
                .get(pair_type)
                .ok_or_else(|| AggregationError::MissingMatrix(pair_type.clone()))?;
            set.matrices
                .insert(pair_type.clone(), SimilarityMatrix::from_entries(schema, entries)?);
        }
        Ok(set)
    }

    pub fn load(path: &Path, schemas: &BTreeMap<String, RelationSchema>) -> Result<Self, AggregationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AggregationError::File(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, schemas)
    }

    pub fn to_json(&self) -> String {
        let raw: SimilarityFile = self
            .matrices
            .iter()
            .map(|(p, m)| (p.clone(), m.to_entries()))
            .collect();
        serde_json::to_string_pretty(&raw).expect("similarity serializes")
    }

    pub fn get(&self, pair_type: &str) -> Result<&SimilarityMatrix, AggregationError> {
        self.matrices
            .get(pair_type)
            .ok_or_else(|| AggregationError::MissingMatrix(pair_type.to_string()))
    }
}

/// Winner of a plain majority vote.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "label", rename_all = "snake_case")]
pub enum Vote {
    Label(String),
    /// All hallucinations pooled; sorts after every real label.
    Hallucination,
}

/// Most frequent non-blank outcome and its support. Ties go to the
/// lexicographically smallest label id.
pub fn majority_vote(outcomes: &[ParsedLabel]) -> Result<(Vote, usize), AggregationError> {
    if outcomes.is_empty() {
        return Err(AggregationError::NoOutcomes);
    }
    let mut counts: BTreeMap<Vote, usize> = BTreeMap::new();
    for o in outcomes {
        let vote = match o {
            ParsedLabel::Label { label } => Vote::Label(label.clone()),
            ParsedLabel::Hallucination { .. } => Vote::Hallucination,
            ParsedLabel::Blank => continue,
        };
        *counts.entry(vote).or_default() += 1;
    }
    let mut best: Option<(Vote, usize)> = None;
    for (vote, count) in counts {
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((vote, count));
        }
    }
    best.ok_or(AggregationError::NoUsableVotes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub instance_id: String,
    pub confid: BTreeMap<String, f64>,
    pub selected: String,
    pub rel_index: f64,
    pub assessments: Vec<ParsedLabel>,
    /// Annotator names aligned with `assessments`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotators: Vec<String>,
}

/// `confid(l)` for every label under an arbitrary similarity function.
/// Outcomes are mapped to labels first (see module docs); sums run in outcome
/// order and are divided by `K` once.
pub fn confidences(
    outcomes: &[Option<&str>],
    labels: &[String],
    sim: impl Fn(&str, &str) -> f64,
) -> BTreeMap<String, f64> {
    let k = outcomes.len() as f64;
    labels
        .iter()
        .map(|l| {
            let total: f64 = outcomes.iter().flatten().map(|a| sim(a, l)).sum();
            (l.clone(), total / k)
        })
        .collect()
}

/// Argmax with ties to the smallest label id.
pub fn argmax(confid: &BTreeMap<String, f64>) -> Option<(&String, f64)> {
    let mut best: Option<(&String, f64)> = None;
    for (label, &c) in confid {
        if best.is_none_or(|(_, b)| c.partial_cmp(&b) == Some(Ordering::Greater)) {
            best = Some((label, c));
        }
    }
    best
}

pub fn relindex_vote(
    instance_id: &str,
    outcomes: &[ParsedLabel],
    sim: &SimilarityMatrix,
) -> Result<VoteResult, AggregationError> {
    if outcomes.is_empty() {
        return Err(AggregationError::NoOutcomes);
    }
    let mapped = outcomes
        .iter()
        .map(|o| match o {
            ParsedLabel::Label { label } if sim.contains(label) => Ok(Some(label.as_str())),
            ParsedLabel::Label { label } => Err(AggregationError::UnknownLabel {
                pair_type: sim.pair_type().to_string(),
                label: label.clone(),
            }),
            ParsedLabel::Hallucination { style: Some(s), .. } if sim.contains(s) => Ok(Some(s.as_str())),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let confid = confidences(&mapped, sim.labels(), |a, b| sim.sim(a, b));
    let (selected, rel_index) = argmax(&confid)
        .map(|(l, c)| (l.clone(), c))
        .ok_or_else(|| AggregationError::InvalidMatrix {
            pair_type: sim.pair_type().to_string(),
            reason: "no labels".into(),
        })?;
    Ok(VoteResult {
        instance_id: instance_id.to_string(),
        confid,
        selected,
        rel_index,
        assessments: outcomes.to_vec(),
        annotators: Vec::new(),
    })
}

/// One annotator's parsed records, keyed by its display name.
#[derive(Debug, Clone)]
pub struct PanelMember {
    pub name: String,
    pub records: Vec<AnnotationRecord>,
}

/// RelIndex votes for every dataset instance over a panel of annotators.
pub fn panel_votes(
    dataset: &Dataset,
    panel: &[PanelMember],
    sims: &SimilaritySet,
) -> Result<Vec<VoteResult>, AggregationError> {
    if panel.is_empty() {
        return Err(AggregationError::NoOutcomes);
    }
    let lookups: Vec<BTreeMap<&str, &ParsedLabel>> = panel
        .iter()
        .map(|m| m.records.iter().map(|r| (r.instance_id.as_str(), &r.parsed)).collect())
        .collect();
    for (member, lookup) in panel.iter().zip(&lookups) {
        let missing: Vec<String> = dataset
            .instances
            .iter()
            .filter(|i| !lookup.contains_key(i.id.as_str()))
            .map(|i| i.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(AggregationError::MissingOutcomes {
                annotator: member.name.clone(),
                missing,
            });
        }
    }
    dataset
        .instances
        .iter()
        .map(|inst| {
            let outcomes: Vec<ParsedLabel> = lookups.iter().map(|l| l[inst.id.as_str()].clone()).collect();
            let mut vote = relindex_vote(&inst.id, &outcomes, sims.get(&inst.pair_type)?)?;
            vote.annotators = panel.iter().map(|m| m.name.clone()).collect();
            Ok(vote)
        })
        .collect()
}

/// Descending rel_index, ties by ascending instance id.
pub fn sort_by_reliability(votes: &mut [&VoteResult]) {
    votes.sort_by(|a, b| {
        b.rel_index
            .partial_cmp(&a.rel_index)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.instance_id.cmp(&b.instance_id))
    });
}

/// `⌈p·n⌉`, at least 1, tolerant of float noise such as `0.65 * 100`.
pub fn coverage_count(p: f64, n: usize) -> usize {
    ((p * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub coverage: f64,
    pub n: usize,
    pub accuracy: f64,
}

/// Evenly spaced steps `1/k, 2/k, ..., 1`.
pub fn default_steps(k: usize) -> Vec<f64> {
    (1..=k).map(|i| i as f64 / k as f64).collect()
}

/// Accuracy of the selected labels over the most reliable `⌈p·N⌉` votes for
/// each step `p`.
pub fn coverage_curve(
    votes: &[VoteResult],
    gold: &BTreeMap<String, String>,
    steps: &[f64],
) -> Result<Vec<CurvePoint>, AggregationError> {
    if votes.is_empty() {
        return Err(AggregationError::EmptyVotes);
    }
    if let Some(&bad) = steps.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(AggregationError::BadStep(bad));
    }
    let mut ordered: Vec<&VoteResult> = votes.iter().collect();
    sort_by_reliability(&mut ordered);
    let mut correct_prefix = Vec::with_capacity(ordered.len() + 1);
    correct_prefix.push(0usize);
    for v in &ordered {
        let g = gold
            .get(&v.instance_id)
            .ok_or_else(|| AggregationError::MissingGold(v.instance_id.clone()))?;
        let last = *correct_prefix.last().unwrap();
        correct_prefix.push(last + (*g == v.selected) as usize);
    }
    Ok(steps
        .iter()
        .map(|&p| {
            let n = coverage_count(p, ordered.len());
            CurvePoint {
                coverage: p,
                n,
                accuracy: correct_prefix[n] as f64 / n as f64,
            }
        })
        .collect())
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("coverage,accuracy\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.coverage, p.accuracy));
    }
    out
}

/// Gold labels of the dataset by instance id.
pub fn gold_map(dataset: &Dataset) -> BTreeMap<String, String> {
    dataset
        .instances
        .iter()
        .filter_map(|i| i.gold_label.clone().map(|g| (i.id.clone(), g)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriagePolicy {
    Threshold(f64),
    Coverage(f64),
}

impl TriagePolicy {
    pub fn validate(&self) -> Result<(), AggregationError> {
        match *self {
            TriagePolicy::Threshold(t) if (0.0..=1.0).contains(&t) => Ok(()),
            TriagePolicy::Coverage(c) if c > 0.0 && c <= 1.0 => Ok(()),
            other => Err(AggregationError::BadPolicy(format!("{other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageSplit {
    pub policy: TriagePolicy,
    /// Most reliable first.
    pub auto: Vec<String>,
    /// Least reliable first.
    pub expert_queue: Vec<String>,
}

pub fn triage(votes: &[VoteResult], policy: TriagePolicy) -> Result<TriageSplit, AggregationError> {
    policy.validate()?;
    let mut ordered: Vec<&VoteResult> = votes.iter().collect();
    sort_by_reliability(&mut ordered);
    let cut = match policy {
        TriagePolicy::Threshold(t) => ordered.iter().take_while(|v| v.rel_index >= t).count(),
        TriagePolicy::Coverage(c) => coverage_count(c, ordered.len()),
    };
    let auto = ordered[..cut].iter().map(|v| v.instance_id.clone()).collect();
    let mut rest: Vec<&VoteResult> = ordered[cut..].to_vec();
    rest.sort_by(|a, b| {
        a.rel_index
            .partial_cmp(&b.rel_index)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.instance_id.cmp(&b.instance_id))
    });
    Ok(TriageSplit {
        policy,
        auto,
        expert_queue: rest.into_iter().map(|v| v.instance_id.clone()).collect(),
    })
}

/// Labels voted on by at least one outcome, for reporting.
pub fn voted_labels(votes: &[VoteResult]) -> BTreeSet<String> {
    votes
        .iter()
        .flat_map(|v| v.assessments.iter().filter_map(|a| a.as_label().map(str::to_string)))
        .collect()
}
