//! Pixel-level detection and calibration metrics.
//!
//! Positives are the pixels to detect (anomalies, errors, attacked pixels);
//! a higher score means "more likely positive". Threshold metrics treat all
//! pixels sharing a score as one operating point, so every metric here is
//! invariant to input order and to strictly increasing score transforms.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synthdata::{IGNORE_ID, VOID_ID};

pub const MIN_POSITIVES_FOR_FPR: usize = 20;
pub const ACE_RANGES: usize = 15;

fn counts(positive: &[bool]) -> (usize, usize) {
    let pos = positive.iter().filter(|&&p| p).count();
    (pos, positive.len() - pos)
}

fn check_pair(scores: &[f32], positive: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positive.len() {
        return Err(Error::ShapeMismatch {
            node: "metrics".into(),
            detail: format!("{} scores for {} labels", scores.len(), positive.len()),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            node: format!("score {i}"),
            batch: 0,
        });
    }
    let (pos, neg) = counts(positive);
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClassScores);
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, ties by ascending index.
fn descending(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Cumulative `(tp, fp)` at each distinct threshold, highest first.
fn operating_points(scores: &[f32], positive: &[bool]) -> Vec<(usize, usize)> {
    let order = descending(scores);
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if positive[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((tp, fp));
        }
    }
    out
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting 1/2.
pub fn auroc(scores: &[f32], positive: &[bool]) -> Result<f64> {
    let (pos, neg) = check_pair(scores, positive)?;
    // Sweep groups in descending order: each negative in a group beats
    // nothing yet seen; positives in the group win against all negatives
    // below and tie with negatives in the group.
    let mut wins = 0.0f64;
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    for (tp, fp) in operating_points(scores, positive) {
        let (gp, gn) = (tp - prev_tp, fp - prev_fp);
        wins += gp as f64 * (neg - fp) as f64 + 0.5 * gp as f64 * gn as f64;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: the precision-recall step integral over distinct
/// thresholds, `sum (R_k - R_{k-1}) * P_k`.
pub fn aupr(scores: &[f32], positive: &[bool]) -> Result<f64> {
    let (pos, _) = check_pair(scores, positive)?;
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in operating_points(scores, positive) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

/// False-positive rate at the highest threshold whose true-positive rate
/// reaches 95%, without interpolation.
pub fn fpr_at_95_tpr(scores: &[f32], positive: &[bool]) -> Result<f64> {
    let (pos, neg) = check_pair(scores, positive)?;
    if pos < MIN_POSITIVES_FOR_FPR {
        return Err(Error::InsufficientPositives {
            needed: MIN_POSITIVES_FOR_FPR,
            got: pos,
        });
    }
    let (_, fp) = operating_points(scores, positive)
        .into_iter()
        .find(|&(tp, _)| tp * 100 >= 95 * pos)
        .expect("the lowest threshold has full recall");
    Ok(fp as f64 / neg as f64)
}

/// Adaptive calibration error: sort by confidence, split into `ranges`
/// equal-count ranges (the first `n % ranges` get one extra sample), and
/// average `|accuracy - confidence|` over ranges.
pub fn ace(confidence: &[f32], correct: &[bool], ranges: usize) -> Result<f64> {
    if confidence.len() != correct.len() {
        return Err(Error::ShapeMismatch {
            node: "ace".into(),
            detail: format!("{} confidences for {} outcomes", confidence.len(), correct.len()),
        });
    }
    let n = confidence.len();
    if ranges == 0 || n < ranges {
        return Err(Error::TooFewSamples {
            needed: ranges.max(1),
            got: n,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // ties broken by outcome so that bins do not depend on input order
    idx.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(correct[a].cmp(&correct[b])));
    let (base, extra) = (n / ranges, n % ranges);
    let mut start = 0;
    let mut total = 0.0;
    for r in 0..ranges {
        let len = base + usize::from(r < extra);
        let bin = &idx[start..start + len];
        let conf: f64 = bin.iter().map(|&i| confidence[i] as f64).sum::<f64>() / len as f64;
        let acc = bin.iter().filter(|&&i| correct[i]).count() as f64 / len as f64;
        total += (acc - conf).abs();
        start += len;
    }
    Ok(total / ranges as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Positives are ground-truth anomaly pixels.
    Ood,
    /// Positives are pixels the segmenter gets wrong.
    Error,
    /// Positives are pixels inside the test-time attack mask.
    Attack,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Ood => "ood",
            EvalMode::Error => "error",
            EvalMode::Attack => "attack",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ood" => Ok(EvalMode::Ood),
            "error" => Ok(EvalMode::Error),
            "attack" => Ok(EvalMode::Attack),
            _ => Err(Error::Config(format!("unknown eval mode `{s}` (ood|error|attack)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub mode: EvalMode,
    pub fpr95tpr: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub ace: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "method,mode,fpr95tpr,auroc,aupr,ace,n_pos,n_neg,seed";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.method, self.mode, self.fpr95tpr, self.auroc, self.aupr, self.ace, self.n_pos, self.n_neg, self.seed
        )
    }
}

/// One test image's contribution to an evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalImage<'a> {
    pub scores: &'a [f32],
    pub labels: &'a [u8],
    /// Detection target for the chosen mode.
    pub positive: &'a [bool],
    /// Whether the segmenter's prediction is right, for calibration.
    pub correct: &'a [bool],
}

/// Pools every non-void pixel of every image and computes all four
/// metrics. Calibration uses `1 - score` as the confidence that the
/// segmenter is right.
pub fn evaluate(method: &str, mode: EvalMode, seed: u64, images: &[EvalImage]) -> Result<MetricsReport> {
    let mut scores = Vec::new();
    let mut positive = Vec::new();
    let mut correct = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let n = im.labels.len();
        if im.scores.len() != n || im.positive.len() != n || im.correct.len() != n {
            return Err(Error::ShapeMismatch {
                node: format!("image {i}"),
                detail: format!(
                    "{} labels, {} scores, {} targets, {} outcomes",
                    n,
                    im.scores.len(),
                    im.positive.len(),
                    im.correct.len()
                ),
            });
        }
        for p in 0..n {
            if im.labels[p] == VOID_ID || im.labels[p] == IGNORE_ID {
                continue;
            }
            let s = im.scores[p];
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    node: format!("score map pixel {p}"),
                    batch: i,
                });
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Invariant(format!("score {s} outside [0, 1] in image {i}")));
            }
            scores.push(s);
            positive.push(im.positive[p]);
            correct.push(im.correct[p]);
        }
    }
    let (n_pos, n_neg) = counts(&positive);
    let confidence: Vec<f32> = scores.iter().map(|s| 1.0 - s).collect();
    Ok(MetricsReport {
        method: method.to_string(),
        mode,
        fpr95tpr: fpr_at_95_tpr(&scores, &positive)?,
        auroc: auroc(&scores, &positive)?,
        aupr: aupr(&scores, &positive)?,
        ace: ace(&confidence, &correct, ACE_RANGES)?,
        n_pos,
        n_neg,
        seed,
    })
}
