//! Average precision, flag rates and rank summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::outpro::OodResult;
use crate::{Error, Result};

/// Precision-recall points at each distinct score, highest threshold first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub auc_pr: f64,
}

/// Step-wise PR curve. Points sharing a score enter together, so a tie group
/// contributes its pooled precision.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("NaN score".into()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateLabels(format!(
            "{positives} positives among {} points",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = PrCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
        auc_pr: 0.0,
    };
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut last_recall = 0.0;
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            tp += usize::from(labels[order[k]]);
            seen += 1;
            k += 1;
        }
        let p = tp as f64 / seen as f64;
        let r = tp as f64 / positives as f64;
        curve.auc_pr += (r - last_recall) * p;
        last_recall = r;
        curve.thresholds.push(t);
        curve.precision.push(p);
        curve.recall.push(r);
    }
    Ok(curve)
}

/// Average precision of scores oriented so that larger means more OOD.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    pr_curve(scores, labels).map(|c| c.auc_pr)
}

pub fn flag_rate(results: &[OodResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::TooSmall("flag rate of an empty result set".into()));
    }
    Ok(results.iter().filter(|r| r.flagged).count() as f64 / results.len() as f64)
}

/// Mean rank per method, 1 = best, midranks for ties. Every run must score
/// every method.
pub fn average_ranks(runs: &[BTreeMap<String, f64>]) -> Result<BTreeMap<String, f64>> {
    let Some(first) = runs.first() else {
        return Err(Error::TooSmall("no runs to rank".into()));
    };
    let methods: Vec<&String> = first.keys().collect();
    let mut total: BTreeMap<String, f64> = methods.iter().map(|m| ((*m).clone(), 0.0)).collect();
    for run in runs {
        if run.len() != methods.len() || methods.iter().any(|m| !run.contains_key(*m)) {
            return Err(Error::InvalidParameter("runs score different method sets".into()));
        }
        for (m, r) in midranks_desc(run) {
            *total.get_mut(&m).expect("same keys") += r;
        }
    }
    let n = runs.len() as f64;
    total.values_mut().for_each(|v| *v /= n);
    Ok(total)
}

fn midranks_desc(run: &BTreeMap<String, f64>) -> Vec<(String, f64)> {
    let mut items: Vec<(&String, f64)> = run.iter().map(|(k, v)| (k, *v)).collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut out = Vec::with_capacity(items.len());
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j + 1 < items.len() && items[j + 1].1 == items[i].1 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &items[i..=j] {
            out.push((item.0.clone(), rank));
        }
        i = j + 1;
    }
    out
}
