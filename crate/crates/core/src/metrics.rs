//! Detection quality, the composite defense score, accuracy-trace summaries,
//! 2-D projection exports and the CSV sinks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;

use crate::defenses::{pca_reduce, ClientHistory};
use crate::error::{input, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

pub fn confusion(flags: &[usize], truth: &[usize], population: &[usize]) -> Result<ConfusionCounts> {
    let pop: BTreeSet<usize> = population.iter().copied().collect();
    let flags: BTreeSet<usize> = flags.iter().copied().collect();
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    if let Some(x) = flags.iter().chain(&truth).find(|x| !pop.contains(x)) {
        return input(format!("id {x} is outside the population"));
    }
    let tp = flags.intersection(&truth).count();
    let fp = flags.len() - tp;
    let fn_ = truth.len() - tp;
    Ok(ConfusionCounts { tp, fp, fn_, tn: pop.len() - tp - fp - fn_ })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy, precision, recall and F1. With nothing flagged, precision is 1
/// when there was nothing to find and 0 otherwise; with nothing to find,
/// recall is 1.
pub fn prf(c: &ConfusionCounts) -> Result<Prf> {
    if c.total() == 0 {
        return input("empty population");
    }
    let truth = c.tp + c.fn_;
    let precision = if c.tp + c.fp == 0 {
        if truth == 0 { 1.0 } else { 0.0 }
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if truth == 0 { 1.0 } else { c.tp as f64 / truth as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Prf { accuracy: (c.tp + c.tn) as f64 / c.total() as f64, precision, recall, f1 })
}

/// `fp / (fp + tn)`, 0 when there are no negatives.
pub fn fpr(c: &ConfusionCounts) -> f64 {
    if c.fp + c.tn == 0 {
        0.0
    } else {
        c.fp as f64 / (c.fp + c.tn) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeParams {
    alpha: f64,
    beta: f64,
}

impl CompositeParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && (alpha + beta - 1.0).abs() < 1e-12) {
            return input(format!("composite weights must be non-negative and sum to 1, got {alpha}, {beta}"));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for CompositeParams {
    fn default() -> Self {
        Self { alpha: 0.6, beta: 0.4 }
    }
}

/// `100 · (α · recall + β · (1 − fpr))`.
pub fn composite_score(recall: f64, fpr: f64, params: &CompositeParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&recall) || !(0.0..=1.0).contains(&fpr) {
        return input(format!("recall {recall} and fpr {fpr} must lie in [0, 1]"));
    }
    Ok(100.0 * (params.alpha * recall + params.beta * (1.0 - fpr)))
}

/// One client update inside a projection window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowEntry {
    pub round: usize,
    pub client_id: usize,
    pub update: Vec<f64>,
    pub malicious: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRow {
    pub round: usize,
    pub client_id: usize,
    pub pc1: f64,
    pub pc2: f64,
    pub truth_malicious: bool,
}

/// Fits a 2-component PCA on every update of the window and returns one row
/// per `(client, round)`, in input order.
pub fn export_projection(entries: &[WindowEntry]) -> Result<Vec<ProjectionRow>> {
    let clients: BTreeSet<usize> = entries.iter().map(|e| e.client_id).collect();
    if clients.len() < 2 {
        return input("projection needs updates from at least two clients");
    }
    let dim = entries[0].update.len();
    if entries.iter().any(|e| e.update.len() != dim) {
        return input("window updates have different lengths");
    }
    let x = Array2::from_shape_fn((entries.len(), dim), |(i, j)| entries[i].update[j]);
    let k = 2.min(entries.len() - 1).min(dim);
    let p = pca_reduce(x.view(), k)?;
    Ok(entries
        .iter()
        .enumerate()
        .map(|(i, e)| ProjectionRow {
            round: e.round,
            client_id: e.client_id,
            pc1: p.coords[[i, 0]],
            pc2: if k > 1 { p.coords[[i, 1]] } else { 0.0 },
            truth_malicious: e.malicious,
        })
        .collect())
}

/// Groups projection rows into per-client point lists, ordered by client id.
pub fn histories(rows: &[ProjectionRow]) -> Vec<ClientHistory> {
    let mut by: BTreeMap<usize, Vec<[f64; 2]>> = BTreeMap::new();
    for r in rows {
        by.entry(r.client_id).or_default().push([r.pc1, r.pc2]);
    }
    by.into_iter().map(|(id, points)| ClientHistory { id, points }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSummary {
    pub final_accuracy: f64,
    pub last10_mean: f64,
    /// Largest per-round drop against the clean trace; 0 without one.
    pub max_drop: f64,
}

/// Mean of the last `k` entries, accumulated as deviations from the first of
/// them so a constant tail averages to itself exactly.
pub fn mean_last(trace: &[f64], k: usize) -> f64 {
    let tail = &trace[trace.len().saturating_sub(k)..];
    let anchor = tail[0];
    anchor + tail.iter().map(|v| v - anchor).sum::<f64>() / tail.len() as f64
}

pub fn summarize(trace: &[f64], clean: Option<&[f64]>) -> Result<TraceSummary> {
    if trace.is_empty() {
        return input("empty accuracy trace");
    }
    let max_drop = match clean {
        Some(c) if c.len() != trace.len() => return input("clean and attacked traces differ in length"),
        Some(c) => c.iter().zip(trace).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max),
        None => 0.0,
    };
    Ok(TraceSummary { final_accuracy: trace[trace.len() - 1], last10_mean: mean_last(trace, 10), max_drop })
}

/// Whole-run detection outcome over the clients that were reviewed at least
/// once: a client counts as flagged if any review flagged it.
pub fn run_confusion(
    reviewed: &BTreeSet<usize>,
    flagged: &BTreeSet<usize>,
    malicious: &BTreeSet<usize>,
) -> Result<ConfusionCounts> {
    let pop: Vec<usize> = reviewed.iter().copied().collect();
    let flags: Vec<usize> = flagged.intersection(reviewed).copied().collect();
    let truth: Vec<usize> = malicious.intersection(reviewed).copied().collect();
    confusion(&flags, &truth, &pop)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub round: usize,
    pub scenario: String,
    pub malicious_fraction: f64,
    pub attack: String,
    pub aggregator: String,
    pub defense: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRow {
    pub round: usize,
    pub detector: String,
    pub client_id: usize,
    pub score: f64,
    pub threshold: f64,
    pub flagged: bool,
    pub truth_malicious: bool,
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

/// Writes `results.csv` rows; `axis` adds the swept key and value columns.
pub fn write_results(path: &Path, rows: &[(Option<(String, f64)>, ResultRow)], with_axis: bool) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["round", "scenario", "malicious_fraction", "attack", "aggregator", "defense", "accuracy"];
    if with_axis {
        header.extend(["axis", "axis_value"]);
    }
    w.write_record(&header)?;
    for (axis, r) in rows {
        let mut rec = vec![
            r.round.to_string(),
            r.scenario.clone(),
            r.malicious_fraction.to_string(),
            r.attack.clone(),
            r.aggregator.clone(),
            r.defense.clone(),
            r.accuracy.to_string(),
        ];
        if with_axis {
            let (k, v) = axis.clone().unwrap_or_default();
            rec.push(k);
            rec.push(v.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_detections(path: &Path, rows: &[DetectionRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["round", "detector", "client_id", "score", "threshold", "flagged", "truth_malicious"])?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.detector.clone(),
            r.client_id.to_string(),
            r.score.to_string(),
            r.threshold.to_string(),
            r.flagged.to_string(),
            r.truth_malicious.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_projections(path: &Path, rows: &[ProjectionRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["round", "client_id", "pc1", "pc2", "truth_malicious"])?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.client_id.to_string(),
            r.pc1.to_string(),
            r.pc2.to_string(),
            r.truth_malicious.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
