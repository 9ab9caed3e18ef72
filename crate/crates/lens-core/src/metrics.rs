//! Calibration, proper-scoring and OOD-ranking metrics over ensemble
//! predictions, plus temperature scaling.
//!
//! All operations are pure functions. Probability aggregation across members
//! happens on softmax outputs, never on logits, and accumulates in `f64`.

use serde::Serialize;
use thiserror::Error;

/// Probabilities are clipped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Per-member class probabilities for a labeled dataset, the input to every
/// metric and diversity statistic. Member logits are kept alongside so
/// temperature can be fitted after prediction.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    members: usize,
    samples: usize,
    classes: usize,
    probs: Vec<f32>,
    logits: Option<Vec<f32>>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(
        members: usize,
        samples: usize,
        classes: usize,
        probs: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let invalid = |msg: String| MetricsError::Invalid { op: "prediction_set", msg };
        if members == 0 || samples == 0 || classes < 2 {
            return Err(invalid(format!(
                "need members >= 1, samples >= 1, classes >= 2; got {members}, {samples}, {classes}"
            )));
        }
        if probs.len() != members * samples * classes {
            return Err(invalid(format!(
                "{} probabilities for [{members}, {samples}, {classes}]",
                probs.len()
            )));
        }
        if labels.len() != samples {
            return Err(invalid(format!("{} labels for {samples} samples", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(invalid(format!("label {bad} out of range for {classes} classes")));
        }
        for (i, row) in probs.chunks_exact(classes).enumerate() {
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            if !row.iter().all(|p| p.is_finite() && *p >= 0.0) || (sum - 1.0).abs() > 1e-4 {
                return Err(invalid(format!("row {i} is not a probability simplex point")));
            }
        }
        Ok(PredictionSet { members, samples, classes, probs, logits: None, labels })
    }

    pub fn with_logits(mut self, logits: Vec<f32>) -> Result<Self> {
        if logits.len() != self.probs.len() {
            return Err(MetricsError::Invalid {
                op: "prediction_set",
                msg: format!("{} logits for {} probabilities", logits.len(), self.probs.len()),
            });
        }
        self.logits = Some(logits);
        Ok(self)
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Probability matrix `[samples, classes]` of one member.
    pub fn member(&self, m: usize) -> &[f32] {
        let stride = self.samples * self.classes;
        &self.probs[m * stride..(m + 1) * stride]
    }

    pub fn member_logits(&self, m: usize) -> Option<&[f32]> {
        let stride = self.samples * self.classes;
        self.logits.as_ref().map(|l| &l[m * stride..(m + 1) * stride])
    }

    /// Ensemble mean and variance over members.
    pub fn aggregate(&self) -> Aggregate {
        ensemble_aggregate(&self.probs, self.members, self.samples, self.classes)
    }
}

/// Ensemble mean and population variance per (sample, class).
#[derive(Clone, Debug)]
pub struct Aggregate {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub samples: usize,
    pub classes: usize,
}

/// Mean and population variance of member probabilities: the single
/// aggregated predictive distribution of the ensemble and its spread.
pub fn ensemble_aggregate(
    probs: &[f32],
    members: usize,
    samples: usize,
    classes: usize,
) -> Aggregate {
    let stride = samples * classes;
    assert_eq!(probs.len(), members * stride, "probability buffer does not match dimensions");
    let mut mean = vec![0.0f32; stride];
    let mut var = vec![0.0f32; stride];
    for i in 0..stride {
        let mut acc = 0.0f64;
        for m in 0..members {
            acc += probs[m * stride + i] as f64;
        }
        let mu = acc / members as f64;
        let mut sq = 0.0f64;
        for m in 0..members {
            let d = probs[m * stride + i] as f64 - mu;
            sq += d * d;
        }
        mean[i] = mu as f32;
        var[i] = (sq / members as f64) as f32;
    }
    Aggregate { mean, var, samples, classes }
}

/// Index of the row maximum; ties resolve to the smallest index.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_rows(probs: &[f32], classes: usize) -> Vec<usize> {
    probs.chunks_exact(classes).map(argmax_row).collect()
}

/// Per-row confidence: the maximum of the (aggregated) probability row.
pub fn confidences(probs: &[f32], classes: usize) -> Vec<f64> {
    probs
        .chunks_exact(classes)
        .map(|row| row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64)
        .collect()
}

/// One reliability-diagram bin over the confidence axis.
#[derive(Clone, Debug, Serialize)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub conf: f64,
    pub acc: f64,
}

/// Equal-width confidence bins. A confidence exactly on an interior edge
/// belongs to the upper bin; 1.0 stays in the last bin.
pub fn reliability_bins(conf: &[f64], correct: &[bool], bins: usize) -> Result<Vec<BinStat>> {
    if conf.is_empty() {
        return Err(MetricsError::Empty { op: "reliability_bins" });
    }
    if conf.len() != correct.len() {
        return Err(MetricsError::Invalid {
            op: "reliability_bins",
            msg: format!("{} confidences, {} flags", conf.len(), correct.len()),
        });
    }
    if bins == 0 {
        return Err(MetricsError::Invalid { op: "reliability_bins", msg: "need bins >= 1".into() });
    }
    if let Some(&bad) = conf.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(MetricsError::Invalid {
            op: "reliability_bins",
            msg: format!("confidence {bad} outside [0,1]"),
        });
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut acc_sum = vec![0.0f64; bins];
    for (&c, &ok) in conf.iter().zip(correct) {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        acc_sum[b] += if ok { 1.0 } else { 0.0 };
    }
    Ok((0..bins)
        .map(|b| BinStat {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count: count[b],
            conf: if count[b] > 0 { conf_sum[b] / count[b] as f64 } else { 0.0 },
            acc: if count[b] > 0 { acc_sum[b] / count[b] as f64 } else { 0.0 },
        })
        .collect())
}

/// Expected calibration error: bin-weighted mean absolute gap between
/// accuracy and confidence.
pub fn ece(conf: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    let stats = reliability_bins(conf, correct, bins)?;
    let n = conf.len() as f64;
    Ok(stats
        .iter()
        .map(|b| (b.count as f64 / n) * (b.acc - b.conf).abs())
        .sum())
}

/// Mean negative log probability of the true class, with probabilities
/// floored at 1e-12.
pub fn nll(probs: &[f32], classes: usize, labels: &[usize]) -> Result<f64> {
    check_rows("nll", probs, classes, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -(probs[i * classes + y] as f64).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean squared distance between the probability row and the one-hot label.
pub fn brier(probs: &[f32], classes: usize, labels: &[usize]) -> Result<f64> {
    check_rows("brier", probs, classes, labels)?;
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..classes {
            let target = if j == y { 1.0 } else { 0.0 };
            let d = probs[i * classes + j] as f64 - target;
            total += d * d;
        }
    }
    Ok(total / labels.len() as f64)
}

fn check_rows(op: &'static str, probs: &[f32], classes: usize, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(MetricsError::Empty { op });
    }
    if probs.len() != labels.len() * classes {
        return Err(MetricsError::Invalid {
            op,
            msg: format!("{} probabilities for {} rows of {classes}", probs.len(), labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(MetricsError::Invalid { op, msg: format!("label {bad} out of range") });
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(MetricsError::Invalid {
            op: "accuracy",
            msg: format!("{} predictions for {} labels", preds.len(), labels.len()),
        });
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean over classes of 2pr/(p+r); a class with p+r = 0
/// contributes zero.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(MetricsError::Invalid { op: "macro_f1", msg: "need at least 2 classes".into() });
    }
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(MetricsError::Invalid {
            op: "macro_f1",
            msg: format!("{} predictions for {} labels", preds.len(), labels.len()),
        });
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fnc = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(MetricsError::Invalid {
                op: "macro_f1",
                msg: format!("class index out of range: pred {p}, label {y}"),
            });
        }
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnc[y] += 1;
        }
    }
    let mut total = 0.0f64;
    for c in 0..classes {
        let p_den = tp[c] + fp[c];
        let r_den = tp[c] + fnc[c];
        if p_den == 0 && r_den == 0 {
            continue;
        }
        let precision = if p_den > 0 { tp[c] as f64 / p_den as f64 } else { 0.0 };
        let recall = if r_den > 0 { tp[c] as f64 / r_den as f64 } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / classes as f64)
}

fn check_scores(op: &'static str, pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricsError::Empty { op });
    }
    if pos.iter().chain(neg).any(|s| !s.is_finite()) {
        return Err(MetricsError::Invalid { op, msg: "non-finite score".into() });
    }
    Ok(())
}

/// Area under the ROC curve via the Mann-Whitney rank statistic. Tied
/// positive/negative scores count one half.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores("auroc", pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share the average rank of the tie group.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

/// Average precision by step integration of the precision-recall curve,
/// descending over distinct score thresholds. Positives are in-distribution.
pub fn auprc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores("auprc", pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let np = pos.len() as f64;
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let recall = tp / np;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// False-positive rate at the most selective threshold that still admits at
/// least 95% of in-distribution samples (score >= threshold counts as in).
pub fn fpr_at_95_tpr(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores("fpr_at_95_tpr", pos, neg)?;
    let mut sorted: Vec<f64> = pos.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((0.95 * pos.len() as f64).ceil() as usize).clamp(1, pos.len());
    let threshold = sorted[k - 1];
    let fp = neg.iter().filter(|&&s| s >= threshold).count();
    Ok(fp as f64 / neg.len() as f64)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct OodScores {
    pub auroc: f64,
    pub auprc: f64,
    pub fpr95: f64,
}

/// Maximum-softmax-probability OOD detection over aggregated probabilities.
pub fn ood_scores(
    in_mean_probs: &[f32],
    out_mean_probs: &[f32],
    classes: usize,
) -> Result<OodScores> {
    let pos = confidences(in_mean_probs, classes);
    let neg = confidences(out_mean_probs, classes);
    Ok(OodScores {
        auroc: auroc(&pos, &neg)?,
        auprc: auprc(&pos, &neg)?,
        fpr95: fpr_at_95_tpr(&pos, &neg)?,
    })
}

/// Row-wise softmax of `logits / t`.
pub fn temperature_scale(logits: &[f32], classes: usize, t: f64) -> Result<Vec<f32>> {
    if t <= 0.0 || !t.is_finite() {
        return Err(MetricsError::Invalid {
            op: "temperature_scale",
            msg: format!("temperature must be positive, got {t}"),
        });
    }
    if classes == 0 || logits.len() % classes != 0 {
        return Err(MetricsError::Invalid {
            op: "temperature_scale",
            msg: format!("{} logits do not tile rows of {classes}", logits.len()),
        });
    }
    let mut out = vec![0.0f32; logits.len()];
    for (zr, pr) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = zr.iter().map(|&z| z as f64 / t).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        let mut row = vec![0.0f64; classes];
        for (j, &z) in zr.iter().enumerate() {
            row[j] = (z as f64 / t - max).exp();
            sum += row[j];
        }
        for (p, e) in pr.iter_mut().zip(row) {
            *p = (e / sum) as f32;
        }
    }
    Ok(out)
}

/// The published sweep: temperatures 0.1 to 5.0 in steps of 0.05.
pub fn default_temperature_grid() -> Vec<f64> {
    (0..=98).map(|i| 0.1 + i as f64 * 0.05).collect()
}

/// Grid-searched temperature minimizing NLL; ties resolve to the smallest
/// temperature (the grid is scanned in ascending order).
pub fn fit_temperature(
    logits: &[f32],
    classes: usize,
    labels: &[usize],
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(MetricsError::Empty { op: "fit_temperature" });
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best_t = grid[0];
    let mut best_nll = f64::INFINITY;
    for &t in &grid {
        let probs = temperature_scale(logits, classes, t)?;
        let loss = nll(&probs, classes, labels)?;
        if loss < best_nll {
            best_nll = loss;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Full evaluation summary, serialized with fixed keys. OOD fields appear
/// only when an OOD set was scored.
#[derive(Clone, Debug, Serialize)]
pub struct CalibrationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auprc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr95: Option<f64>,
    pub temperature: f64,
    pub bins: Vec<BinStat>,
}

impl CalibrationReport {
    pub fn with_ood(mut self, scores: OodScores) -> Self {
        self.auroc = Some(scores.auroc);
        self.auprc = Some(scores.auprc);
        self.fpr95 = Some(scores.fpr95);
        self
    }
}

/// Builds the report from aggregated mean probabilities. `temperature`
/// records the scaling already applied upstream.
pub fn calibration_report(
    mean_probs: &[f32],
    classes: usize,
    labels: &[usize],
    temperature: f64,
) -> Result<CalibrationReport> {
    check_rows("calibration_report", mean_probs, classes, labels)?;
    let preds = argmax_rows(mean_probs, classes);
    let conf = confidences(mean_probs, classes);
    let correct: Vec<bool> = preds.iter().zip(labels).map(|(p, y)| p == y).collect();
    let report = CalibrationReport {
        accuracy: accuracy(&preds, labels)?,
        macro_f1: macro_f1(&preds, labels, classes)?,
        ece: ece(&conf, &correct, DEFAULT_ECE_BINS)?,
        nll: nll(mean_probs, classes, labels)?,
        brier: brier(mean_probs, classes, labels)?,
        auroc: None,
        auprc: None,
        fpr95: None,
        temperature,
        bins: reliability_bins(&conf, &correct, DEFAULT_ECE_BINS)?,
    };
    let finite = [report.accuracy, report.macro_f1, report.ece, report.nll, report.brier]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(MetricsError::Invalid {
            op: "calibration_report",
            msg: "non-finite metric".into(),
        });
    }
    Ok(report)
}
