//! Agreement (Cohen's and Fleiss' kappa), quality (micro-F1 and accuracy
//! per entity pair), run averaging, hallucination proportion and a paired
//! two-tailed t-test.
//!
//! Micro-F1 convention: a blank prediction is a false negative only; a
//! hallucination is a false positive for an out-of-schema class plus a false
//! negative for the gold class. With only valid labels and all classes
//! counted, micro-F1 therefore equals accuracy.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::parsing::{AnnotationRecord, ParsedLabel};
use crate::prompting::PromptVariant;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label vectors are not aligned at position {position} ({left} vs {right})")]
    IdMismatch {
        position: usize,
        left: String,
        right: String,
    },
    #[error("{0}: no items")]
    Empty(&'static str),
    #[error("rating row {row} sums to {found}, expected {expected}")]
    UnequalRowSums { row: usize, found: u32, expected: u32 },
    #[error("fleiss kappa needs at least 2 raters per item")]
    TooFewRaters,
    #[error("instance {0} has no gold label")]
    MissingGold(String),
    #[error("instance {0} is not in the dataset")]
    UnknownInstance(String),
    #[error("no prediction for instance {0}")]
    MissingPrediction(String),
    #[error("reports cover different entity pairs: {0:?} vs {1:?}")]
    PairSetMismatch(Vec<String>, Vec<String>),
    #[error("no instances with gold label {0}")]
    EmptyFilter(String),
    #[error("paired samples differ in length ({0} vs {1}) or have fewer than 2 pairs")]
    BadSample(usize, usize),
}

/// Parsed outcomes aligned to instance ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub ids: Vec<String>,
    pub outcomes: Vec<ParsedLabel>,
}

impl LabelVector {
    pub fn new(ids: Vec<String>, outcomes: Vec<ParsedLabel>) -> Result<Self, MetricsError> {
        if ids.len() != outcomes.len() {
            return Err(MetricsError::LengthMismatch(ids.len(), outcomes.len()));
        }
        Ok(Self { ids, outcomes })
    }

    /// Unkeyed vector; ids are positions.
    pub fn from_outcomes(outcomes: Vec<ParsedLabel>) -> Self {
        let ids = (0..outcomes.len()).map(|i| i.to_string()).collect();
        Self { ids, outcomes }
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        Self::from_outcomes(labels.iter().map(|l| ParsedLabel::label(l.as_ref())).collect())
    }

    /// One annotator's outcomes in `ids` order.
    pub fn from_records(ids: &[String], records: &[AnnotationRecord]) -> Result<Self, MetricsError> {
        let by_id: HashMap<&str, &ParsedLabel> =
            records.iter().map(|r| (r.instance_id.as_str(), &r.parsed)).collect();
        let outcomes = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|p| (*p).clone())
                    .ok_or_else(|| MetricsError::MissingPrediction(id.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { ids: ids.to_vec(), outcomes })
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    fn categories(&self) -> Vec<String> {
        self.outcomes.iter().map(ParsedLabel::category).collect()
    }
}

fn check_aligned(a: &LabelVector, b: &LabelVector) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if let Some(position) = a.ids.iter().zip(&b.ids).position(|(x, y)| x != y) {
        return Err(MetricsError::IdMismatch {
            position,
            left: a.ids[position].clone(),
            right: b.ids[position].clone(),
        });
    }
    Ok(())
}

/// Cohen's kappa between two annotators. Blank and hallucination are each a
/// category of their own.
pub fn cohen_kappa(a: &LabelVector, b: &LabelVector) -> Result<f64, MetricsError> {
    check_aligned(a, b)?;
    if a.is_empty() {
        return Err(MetricsError::Empty("cohen_kappa"));
    }
    let (ca, cb) = (a.categories(), b.categories());
    let n = ca.len() as f64;
    let agree = ca.iter().zip(&cb).filter(|(x, y)| x == y).count() as f64;
    let mut margins: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for c in &ca {
        margins.entry(c).or_default().0 += 1;
    }
    for c in &cb {
        margins.entry(c).or_default().1 += 1;
    }
    let p_o = agree / n;
    let p_e: f64 = margins
        .values()
        .map(|&(x, y)| (x as f64 / n) * (y as f64 / n))
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(if ca == cb { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Fleiss' kappa over an item × category matrix of rater counts.
pub fn fleiss_kappa(ratings: &[Vec<u32>]) -> Result<f64, MetricsError> {
    let Some(first) = ratings.first() else {
        return Err(MetricsError::Empty("fleiss_kappa"));
    };
    let raters: u32 = first.iter().sum();
    if raters < 2 {
        return Err(MetricsError::TooFewRaters);
    }
    let width = first.len();
    for (row, r) in ratings.iter().enumerate() {
        let found: u32 = r.iter().sum();
        if found != raters || r.len() != width {
            return Err(MetricsError::UnequalRowSums {
                row,
                found,
                expected: raters,
            });
        }
    }
    let items = ratings.len() as f64;
    let n = raters as f64;
    let p_bar = ratings
        .iter()
        .map(|r| {
            let sq: f64 = r.iter().map(|&c| (c as f64) * (c as f64)).sum();
            (sq - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..width)
        .map(|j| {
            let share = ratings.iter().map(|r| r[j] as f64).sum::<f64>() / (items * n);
            share * share
        })
        .sum();
    if p_bar == 1.0 || (1.0 - p_e).abs() < 1e-15 {
        // perfect agreement, or every rating fell in one category
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Builds the Fleiss rating matrix from aligned annotator vectors.
pub fn rating_matrix(raters: &[LabelVector]) -> Result<Vec<Vec<u32>>, MetricsError> {
    let Some(first) = raters.first() else {
        return Err(MetricsError::Empty("rating_matrix"));
    };
    for r in &raters[1..] {
        check_aligned(first, r)?;
    }
    let cats: Vec<Vec<String>> = raters.iter().map(LabelVector::categories).collect();
    let all: BTreeSet<&String> = cats.iter().flatten().collect();
    let index: BTreeMap<&String, usize> = all.into_iter().enumerate().map(|(i, c)| (c, i)).collect();
    Ok((0..first.len())
        .map(|i| {
            let mut row = vec![0u32; index.len()];
            for c in &cats {
                row[index[&c[i]]] += 1;
            }
            row
        })
        .collect())
}

pub fn fleiss_kappa_from_vectors(raters: &[LabelVector]) -> Result<f64, MetricsError> {
    fleiss_kappa(&rating_matrix(raters)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    AllClasses,
    ExcludeNoRelation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub micro_f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub micro_f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_pair: BTreeMap<String, PairMetrics>,
    /// Unweighted mean over entity pairs.
    pub overall: Scores,
}

impl MetricReport {
    pub fn from_pairs(per_pair: BTreeMap<String, PairMetrics>) -> Self {
        let k = per_pair.len().max(1) as f64;
        let overall = Scores {
            micro_f1: per_pair.values().map(|m| m.micro_f1).sum::<f64>() / k,
            accuracy: per_pair.values().map(|m| m.accuracy).sum::<f64>() / k,
        };
        Self { per_pair, overall }
    }

    pub fn pair_types(&self) -> Vec<String> {
        self.per_pair.keys().cloned().collect()
    }
}

#[derive(Default)]
struct Pool {
    correct: usize,
    total: usize,
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and pooled micro-F1 per entity pair against expert labels.
pub fn evaluate(predictions: &LabelVector, dataset: &Dataset, mode: EvalMode) -> Result<MetricReport, MetricsError> {
    let index = dataset.index();
    let mut pools: BTreeMap<String, Pool> = BTreeMap::new();
    for (id, outcome) in predictions.ids.iter().zip(&predictions.outcomes) {
        let inst = index.get(id.as_str()).ok_or_else(|| MetricsError::UnknownInstance(id.clone()))?;
        let gold = inst.gold_label.as_deref().ok_or_else(|| MetricsError::MissingGold(id.clone()))?;
        let excluded = match mode {
            EvalMode::AllClasses => None,
            EvalMode::ExcludeNoRelation => Some(dataset.schema_for(inst).no_relation_label.as_str()),
        };
        let counted = |label: &str| excluded != Some(label);
        let pool = pools.entry(inst.pair_type.clone()).or_default();
        pool.total += 1;
        match outcome {
            ParsedLabel::Label { label } if label == gold => {
                pool.correct += 1;
                if counted(gold) {
                    pool.tp += 1;
                }
            }
            ParsedLabel::Label { label } => {
                if counted(label) {
                    pool.fp += 1;
                }
                if counted(gold) {
                    pool.fn_ += 1;
                }
            }
            ParsedLabel::Blank => {
                if counted(gold) {
                    pool.fn_ += 1;
                }
            }
            ParsedLabel::Hallucination { .. } => {
                pool.fp += 1;
                if counted(gold) {
                    pool.fn_ += 1;
                }
            }
        }
    }
    let per_pair = pools
        .into_iter()
        .map(|(pair, p)| {
            let m = PairMetrics {
                micro_f1: ratio(2 * p.tp, 2 * p.tp + p.fp + p.fn_),
                accuracy: ratio(p.correct, p.total),
                precision: ratio(p.tp, p.tp + p.fp),
                recall: ratio(p.tp, p.tp + p.fn_),
                n: p.total,
            };
            (pair, m)
        })
        .collect();
    Ok(MetricReport::from_pairs(per_pair))
}

/// Field-wise mean of reports over the same entity pairs.
pub fn average_runs(reports: &[MetricReport]) -> Result<MetricReport, MetricsError> {
    let Some(first) = reports.first() else {
        return Err(MetricsError::Empty("average_runs"));
    };
    let pairs = first.pair_types();
    for r in &reports[1..] {
        if r.pair_types() != pairs {
            return Err(MetricsError::PairSetMismatch(pairs, r.pair_types()));
        }
    }
    let k = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let per_pair = pairs
        .iter()
        .map(|p| {
            let m = PairMetrics {
                micro_f1: mean(&|r| r.per_pair[p].micro_f1),
                accuracy: mean(&|r| r.per_pair[p].accuracy),
                precision: mean(&|r| r.per_pair[p].precision),
                recall: mean(&|r| r.per_pair[p].recall),
                n: first.per_pair[p].n,
            };
            (p.clone(), m)
        })
        .collect();
    Ok(MetricReport {
        per_pair,
        overall: Scores {
            micro_f1: mean(&|r| r.overall.micro_f1),
            accuracy: mean(&|r| r.overall.accuracy),
        },
    })
}

/// Share of records parsed as hallucinations among instances whose gold
/// label is `gold_filter`.
pub fn hallucination_rate(
    records: &[AnnotationRecord],
    dataset: &Dataset,
    gold_filter: &str,
) -> Result<f64, MetricsError> {
    let index = dataset.index();
    let mut total = 0usize;
    let mut hallucinated = 0usize;
    for r in records {
        let inst = index
            .get(r.instance_id.as_str())
            .ok_or_else(|| MetricsError::UnknownInstance(r.instance_id.clone()))?;
        let gold = inst
            .gold_label
            .as_deref()
            .ok_or_else(|| MetricsError::MissingGold(r.instance_id.clone()))?;
        if gold == gold_filter {
            total += 1;
            hallucinated += r.parsed.is_hallucination() as usize;
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptyFilter(gold_filter.to_string()));
    }
    Ok(hallucinated as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub mean_difference: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Two-tailed paired t-test on per-pair metric values.
pub fn paired_ttest(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult, MetricsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricsError::BadSample(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    let (t, p_value) = if var <= f64::EPSILON * f64::EPSILON * mean.abs().max(1.0) {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / (var / n).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (t, (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(TTestResult {
        t,
        df,
        mean_difference: mean,
        p_value,
        significant: p_value < alpha,
    })
}

/// Per-pair values of one metric, in pair order.
pub fn per_pair_values(report: &MetricReport, metric: Metric) -> Vec<f64> {
    report
        .per_pair
        .values()
        .map(|m| match metric {
            Metric::MicroF1 => m.micro_f1,
            Metric::Accuracy => m.accuracy,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MicroF1,
    Accuracy,
}

/// Identifies one evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub annotator: String,
    pub variant: PromptVariant,
    pub temperature: f64,
    pub run_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_index: u32,
    pub report: MetricReport,
}

/// One annotator × prompt × temperature cell, averaged over its runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub annotator: String,
    pub variant: PromptVariant,
    pub temperature: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub averaged: MetricReport,
    pub runs: Vec<RunRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub mode: EvalMode,
    pub rows: Vec<TableRow>,
}

/// Groups run reports by annotator, variant and temperature and averages
/// each group. Rows come out in first-seen order; runs within a row by index.
pub fn table_report(mode: EvalMode, runs: Vec<(RunKey, MetricReport)>) -> Result<TableReport, MetricsError> {
    let mut rows: Vec<(String, PromptVariant, f64, Vec<RunRow>)> = Vec::new();
    for (key, report) in runs {
        let row = RunRow {
            run_index: key.run_index,
            report,
        };
        match rows
            .iter_mut()
            .find(|(a, v, t, _)| *a == key.annotator && *v == key.variant && t.to_bits() == key.temperature.to_bits())
        {
            Some(existing) => existing.3.push(row),
            None => rows.push((key.annotator, key.variant, key.temperature, vec![row])),
        }
    }
    let rows = rows
        .into_iter()
        .map(|(annotator, variant, temperature, mut runs)| {
            runs.sort_by_key(|r| r.run_index);
            let reports: Vec<MetricReport> = runs.iter().map(|r| r.report.clone()).collect();
            let averaged = average_runs(&reports)?;
            Ok(TableRow {
                annotator,
                variant,
                temperature,
                micro_f1: averaged.overall.micro_f1,
                accuracy: averaged.overall.accuracy,
                averaged,
                runs,
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    Ok(TableReport { mode, rows })
}
