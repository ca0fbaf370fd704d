//! Three-class classification metrics: accuracy, macro F1/PPV/recall, and macro
//! one-vs-rest AUC-ROC.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClassLabel;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: ClassLabel,
    pub support: usize,
    pub ppv: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the class has no positives or no negatives.
    pub auc_roc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub auc_roc_ovr_macro: f64,
    pub ppv_macro: f64,
    pub recall_macro: f64,
    pub fid: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// Notes on undefined ratios or skipped AUC classes.
    pub flags: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn ratio(num: usize, den: usize, what: &str, label: ClassLabel, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(format!("{what} undefined for {label}"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Area under the ROC curve of `scores` for binary `positive` labels, by
/// trapezoidal integration; tied scores form one diagonal segment.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Some(area / (p * n) as f64)
}

/// Metrics for an `n × 3` probability matrix (row-major) and true class indices.
pub fn compute_metrics(probs: &[f64], labels: &[usize]) -> Result<MetricsReport> {
    let n = labels.len();
    if n == 0 || probs.len() != n * NUM_CLASSES {
        return Err(Error::Shape(format!("need n >= 1 rows of {NUM_CLASSES} probabilities for {n} labels")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    for (i, row) in probs.chunks(NUM_CLASSES).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("probability row {i} sums to {s}")));
        }
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (row, &y) in probs.chunks(NUM_CLASSES).zip(labels) {
        confusion[y][argmax(row)] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let mut flags = Vec::new();
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let label = ClassLabel::from_index(c).expect("three classes");
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
        let ppv = ratio(tp, predicted, "ppv", label, &mut flags);
        let recall = ratio(tp, support, "recall", label, &mut flags);
        // 2·TP / (2·TP + FP + FN), which is the harmonic mean when both ratios exist.
        let f1 = ratio(2 * tp, predicted + support, "f1", label, &mut flags);
        let scores: Vec<f64> = probs.chunks(NUM_CLASSES).map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let auc_roc = roc_auc(&scores, &positive);
        if auc_roc.is_none() {
            flags.push(format!("auc skipped for {label}"));
        }
        per_class.push(ClassMetrics { label, support, ppv, recall, f1, auc_roc });
    }
    let macro_of = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    let aucs: Vec<f64> = per_class.iter().filter_map(|c| c.auc_roc).collect();
    let auc = if aucs.is_empty() { 0.0 } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };
    Ok(MetricsReport {
        accuracy: correct as f64 / n as f64,
        f1_macro: macro_of(|c| c.f1),
        auc_roc_ovr_macro: auc,
        ppv_macro: macro_of(|c| c.ppv),
        recall_macro: macro_of(|c| c.recall),
        fid: None,
        per_class,
        confusion,
        flags,
        metadata: BTreeMap::new(),
    })
}
