//! Classification metrics and seed aggregation.
//!
//! AUROC is the Mann-Whitney statistic with average ranks for ties. AUC-PR
//! is average precision over distinct score thresholds. Multiclass forms
//! are one-vs-rest macro averages over the classes present in the labels.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DlinkError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_balanced: f64,
    pub f1_weighted: f64,
    pub kappa: f64,
    pub auroc: f64,
    pub auc_pr: f64,
}

impl MetricReport {
    fn fields(&self) -> [f64; 5] {
        [self.acc_balanced, self.f1_weighted, self.kappa, self.auroc, self.auc_pr]
    }

    fn from_fields(v: [f64; 5]) -> Self {
        Self {
            acc_balanced: v[0],
            f1_weighted: v[1],
            kappa: v[2],
            auroc: v[3],
            auc_pr: v[4],
        }
    }
}

fn confusion(y_true: &[usize], y_pred: &[usize], n: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(DlinkError::Usage("label and prediction counts differ".into()));
    }
    let mut m = vec![vec![0usize; n]; n];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n || p >= n {
            return Err(DlinkError::Usage(format!("class index out of range for {n} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Mean recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion(y_true, y_pred, num_classes)?;
    let recalls: Vec<f64> = (0..num_classes)
        .filter_map(|k| {
            let support: usize = m[k].iter().sum();
            (support > 0).then(|| m[k][k] as f64 / support as f64)
        })
        .collect();
    if recalls.is_empty() {
        return Err(DlinkError::UndefinedMetric("balanced accuracy of an empty set".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Per-class F1 weighted by support; a class never predicted and never
/// present contributes nothing.
pub fn weighted_f1(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion(y_true, y_pred, num_classes)?;
    let total = y_true.len() as f64;
    let mut acc = 0.0;
    for k in 0..num_classes {
        let tp = m[k][k] as f64;
        let support: usize = m[k].iter().sum();
        let predicted: usize = (0..num_classes).map(|r| m[r][k]).sum();
        if support == 0 {
            continue;
        }
        let denom = (support + predicted) as f64;
        let f1 = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        acc += f1 * support as f64 / total;
    }
    Ok(acc)
}

pub fn cohen_kappa(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion(y_true, y_pred, num_classes)?;
    let n = y_true.len() as f64;
    if n == 0.0 {
        return Err(DlinkError::UndefinedMetric("kappa of an empty set".into()));
    }
    let observed = (0..num_classes).map(|k| m[k][k] as f64).sum::<f64>() / n;
    let expected = (0..num_classes)
        .map(|k| {
            let row: usize = m[k].iter().sum();
            let col: usize = (0..num_classes).map(|r| m[r][k]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - expected).abs() < 1e-15 {
        return Ok(if observed >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((observed - expected) / (1.0 - expected))
}

fn check_binary(positive: &[bool]) -> Result<(usize, usize)> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DlinkError::UndefinedMetric(
            "AUROC and AUC-PR need both positive and negative samples".into(),
        ));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank of the tie group
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: `sum_n (R_n - R_{n-1}) P_n` over descending distinct
/// thresholds.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| positive[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// All metrics from class probabilities `(N, K)`. Predictions are the
/// row-wise argmax.
pub fn metric_report(probs: &Array2<f64>, labels: &[usize]) -> Result<MetricReport> {
    let (n, k) = probs.dim();
    if n != labels.len() {
        return Err(DlinkError::Usage("probability rows and labels differ in count".into()));
    }
    let pred: Vec<usize> = probs
        .rows()
        .into_iter()
        .map(|r| crate::teacher::argmax(r.iter().copied()))
        .collect();
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return Err(DlinkError::UndefinedMetric(
            "AUROC is undefined for a single-class test set".into(),
        ));
    }
    let (auroc, auc_pr) = if k == 2 {
        let scores: Vec<f64> = probs.column(1).to_vec();
        let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        (auroc_binary(&scores, &positive)?, average_precision(&scores, &positive)?)
    } else {
        let (mut a, mut p) = (0.0, 0.0);
        for &c in &present {
            let scores: Vec<f64> = probs.column(c).to_vec();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            a += auroc_binary(&scores, &positive)?;
            p += average_precision(&scores, &positive)?;
        }
        (a / present.len() as f64, p / present.len() as f64)
    };
    Ok(MetricReport {
        acc_balanced: balanced_accuracy(labels, &pred, k)?,
        f1_weighted: weighted_f1(labels, &pred, k)?,
        kappa: cohen_kappa(labels, &pred, k)?,
        auroc,
        auc_pr,
    })
}

/// Mean and population standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub seeds: usize,
    pub mean: MetricReport,
    pub std: MetricReport,
}

pub fn aggregate(reports: &[MetricReport]) -> Result<MetricSummary> {
    if reports.is_empty() {
        return Err(DlinkError::Usage("nothing to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 5];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.fields()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 5];
    for r in reports {
        for ((s, v), m) in var.iter_mut().zip(r.fields()).zip(mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    Ok(MetricSummary {
        seeds: reports.len(),
        mean: MetricReport::from_fields(mean),
        std: MetricReport::from_fields(var.map(f64::sqrt)),
    })
}
