//! Binary classification metrics and repeated-run aggregation.

use std::fmt::Write as _;

use crate::{Error, Real, Result};

/// Default operating point; a score at the threshold counts as positive.
pub const DEFAULT_THRESHOLD: Real = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(scores: &[Real], labels: &[Real]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Usage("metrics need at least one sample".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Usage(format!("labels must be 0 or 1, got {bad}")));
    }
    Ok(())
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion(scores: &[Real], labels: &[Real], threshold: Real) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Accuracy, precision, recall and F1. A ratio with a zero denominator is
/// reported as 0 and flagged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasicMetrics {
    pub accuracy: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: usize, den: usize) -> (Real, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as Real / den as Real, false)
    }
}

pub fn basic_metrics(c: &Confusion) -> BasicMetrics {
    let (accuracy, _) = ratio(c.tp + c.tn, c.total());
    let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
    let (f1, f1_undefined) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    BasicMetrics {
        accuracy,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: Real,
    pub tpr: Real,
    pub threshold: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Roc {
    pub auc: Real,
    /// From `(0, 0)` at an infinite threshold down to every distinct score.
    pub points: Vec<RocPoint>,
}

/// Rank-based AUC, `(concordant + 0.5 * tied) / (pos * neg)` over all
/// positive/negative pairs, plus the ROC curve.
pub fn roc_auc(scores: &[Real], labels: &[Real]) -> Result<Roc> {
    check_inputs(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Usage("scores must not be NaN".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Usage("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // walk groups of equal scores from the top
    let (mut concordant, mut tied) = (0u64, 0u64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: Real::INFINITY,
    }];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gp, mut gn) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // positives in this group beat every negative still below it
        concordant += (gp * (neg - fp - gn)) as u64;
        tied += (gp * gn) as u64;
        tp += gp;
        fp += gn;
        points.push(RocPoint {
            fpr: fp as Real / neg as Real,
            tpr: tp as Real / pos as Real,
            threshold: s,
        });
    }
    let auc = (concordant as Real + 0.5 * tied as Real) / (pos as Real * neg as Real);
    Ok(Roc { auc, points })
}

/// Test-set numbers of one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub auc: Real,
    pub threshold: Real,
    pub n: usize,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl MetricsReport {
    pub fn values(&self) -> [Real; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.auc]
    }
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "precision", "recall", "f1", "auc"];

/// Confusion-based metrics at `threshold` plus AUC.
pub fn evaluate(scores: &[Real], labels: &[Real], threshold: Real) -> Result<(MetricsReport, Roc)> {
    let c = confusion(scores, labels, threshold)?;
    let m = basic_metrics(&c);
    let roc = roc_auc(scores, labels)?;
    Ok((
        MetricsReport {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc: roc.auc,
            threshold,
            n: scores.len(),
            precision_undefined: m.precision_undefined,
            recall_undefined: m.recall_undefined,
        },
        roc,
    ))
}

/// Per-metric mean and sample standard deviation over runs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunAggregate {
    pub runs: usize,
    pub mean: [Real; 5],
    /// `None` for a single run.
    pub sd: Option<[Real; 5]>,
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<RunAggregate> {
    if reports.is_empty() {
        return Err(Error::Usage("cannot aggregate zero runs".into()));
    }
    let n = reports.len() as Real;
    let mut mean = [0.0; 5];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n;
        }
    }
    let sd = (reports.len() > 1).then(|| {
        let mut var = [0.0; 5];
        for r in reports {
            for ((acc, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.map(|s| (s / (n - 1.0)).sqrt())
    });
    Ok(RunAggregate {
        runs: reports.len(),
        mean,
        sd,
    })
}

pub const METRICS_HEADER: &str = "run_id,accuracy,precision,recall,f1,auc";
pub const SUMMARY_HEADER: &str = "stat,runs,accuracy,precision,recall,f1,auc";
pub const ROC_HEADER: &str = "fpr,tpr,threshold";

pub fn metrics_csv(runs: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (id, r) in runs {
        let v = r.values();
        let _ = writeln!(out, "{id},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4]);
    }
    out
}

/// `mean` and `sd` rows; the sd fields stay empty for a single run.
pub fn summary_csv(agg: &RunAggregate) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    let join = |vals: &[Real; 5]| vals.map(|v| v.to_string()).join(",");
    let _ = writeln!(out, "mean,{},{}", agg.runs, join(&agg.mean));
    match &agg.sd {
        Some(sd) => {
            let _ = writeln!(out, "sd,{},{}", agg.runs, join(sd));
        }
        None => {
            let _ = writeln!(out, "sd,{},,,,,", agg.runs);
        }
    }
    out
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = format!("{ROC_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    out
}

/// Mean ± SD table with percentages, one line per metric.
pub fn format_summary(agg: &RunAggregate) -> String {
    let mut out = format!("{:<10} {:>9} {:>7}\n", "metric", "mean(%)", "sd(%)");
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        let sd = agg.sd.map_or("-".to_string(), |s| format!("{:.2}", s[i] * 100.0));
        let _ = writeln!(out, "{name:<10} {:>9.2} {sd:>7}", agg.mean[i] * 100.0);
    }
    out
}
