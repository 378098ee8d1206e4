//! Calibration and discrimination metrics on `(probability, label)` records.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// One evaluated sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub prob: f64,
    pub soft_label: f64,
    pub hard_label: u8,
}

impl EvalRecord {
    /// Hard label is the soft label thresholded at 0.5, ties positive.
    pub fn new(prob: f64, soft_label: f64) -> Self {
        Self {
            prob,
            soft_label,
            hard_label: u8::from(soft_label >= 0.5),
        }
    }

    fn positive(&self) -> bool {
        self.hard_label == 1
    }
}

fn nonempty(records: &[EvalRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input(format!("{what} of an empty record set")));
    }
    Ok(())
}

/// Index of the right-closed bin `(b/B, (b+1)/B]` holding `p`; zero goes
/// in the first bin.
pub fn bin_index(p: f64, num_bins: usize) -> usize {
    let b = num_bins as f64;
    let mut i = ((p * b).ceil() as isize - 1).clamp(0, num_bins as isize - 1) as usize;
    // nudge across edges where p·B rounds differently from the edge value
    while i > 0 && p <= i as f64 / b {
        i -= 1;
    }
    while i + 1 < num_bins && p > (i + 1) as f64 / b {
        i += 1;
    }
    i
}

#[derive(Clone, Copy, Default)]
struct Bin {
    count: usize,
    prob_sum: f64,
    pos: usize,
}

fn bins(records: &[EvalRecord], num_bins: usize) -> Result<Vec<Bin>> {
    if num_bins == 0 {
        return Err(Error::Config("num_bins must be >= 1".into()));
    }
    let mut out = vec![Bin::default(); num_bins];
    for r in records {
        let b = &mut out[bin_index(r.prob, num_bins)];
        b.count += 1;
        b.prob_sum += r.prob;
        b.pos += usize::from(r.positive());
    }
    Ok(out)
}

/// Expected calibration error over equal-width bins.
pub fn ece(records: &[EvalRecord], num_bins: usize) -> Result<f64> {
    nonempty(records, "ECE")?;
    let n = records.len() as f64;
    Ok(bins(records, num_bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| {
            let c = b.count as f64;
            (c / n) * (b.prob_sum / c - b.pos as f64 / c).abs()
        })
        .sum())
}

pub fn brier(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records, "Brier score")?;
    let sum: f64 = records
        .iter()
        .map(|r| (r.prob - f64::from(r.hard_label)).powi(2))
        .sum();
    Ok(sum / records.len() as f64)
}

fn class_counts(records: &[EvalRecord], what: &str) -> Result<(usize, usize)> {
    let pos = records.iter().filter(|r| r.positive()).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{what} needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Records sorted by descending probability.
fn sorted_desc(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| b.prob.total_cmp(&a.prob));
    v
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let (pos, neg) = class_counts(records, "AUROC")?;
    // twice the Mann-Whitney U, kept integral until the final division
    let mut u2: u64 = 0;
    let mut neg_below = neg as u64;
    let sorted = sorted_desc(records);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].prob == sorted[i].prob {
            if sorted[j].positive() {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        neg_below -= q;
        u2 += p * (2 * neg_below + q);
        i = j;
    }
    Ok(u2 as f64 / (2 * pos as u64 * neg as u64) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Set when recall or F1 had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

/// Recall, F1 and accuracy for `prob >= threshold` predictions.
pub fn classification_metrics(records: &[EvalRecord], threshold: f64) -> Result<ClassificationMetrics> {
    nonempty(records, "classification metrics")?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        match (r.prob >= threshold, r.positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let recall = ratio(tp, tp + fneg);
    let f1 = ratio(2 * tp, 2 * tp + fp + fneg);
    let accuracy = (tp + tn) as f64 / records.len() as f64;
    Ok(ClassificationMetrics {
        recall,
        f1,
        accuracy,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReliabilityPoint {
    pub bin_center: f64,
    pub mean_prob: f64,
    pub empirical_freq: f64,
    pub count: usize,
}

/// Per-bin mean probability against observed positive rate; empty bins are
/// left out.
pub fn reliability_curve(records: &[EvalRecord], num_bins: usize) -> Result<Vec<ReliabilityPoint>> {
    nonempty(records, "reliability curve")?;
    let w = 1.0 / num_bins as f64;
    Ok(bins(records, num_bins)?
        .iter()
        .enumerate()
        .filter(|(_, b)| b.count > 0)
        .map(|(i, b)| ReliabilityPoint {
            bin_center: (i as f64 + 0.5) * w,
            mean_prob: b.prob_sum / b.count as f64,
            empirical_freq: b.pos as f64 / b.count as f64,
            count: b.count,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Predictions `>= threshold` are positive; the `(0, 0)` anchor uses
    /// `+inf`.
    pub threshold: f64,
}

/// ROC points at every distinct score, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(records: &[EvalRecord]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(records, "ROC curve")?;
    let sorted = sorted_desc(records);
    let mut out = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].prob;
        while i < sorted.len() && sorted[i].prob == t {
            if sorted[i].positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(out)
}

/// Trapezoidal area under a sequence of ROC points.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Every metric for one record set, plus curve data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub num_bins: usize,
    pub threshold: f64,
    pub ece: f64,
    pub brier: f64,
    pub auroc: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub degenerate: bool,
    #[serde(skip)]
    pub reliability_points: Vec<ReliabilityPoint>,
    #[serde(skip)]
    pub roc_points: Vec<RocPoint>,
}

impl CalibrationReport {
    pub fn evaluate(records: &[EvalRecord], num_bins: usize, threshold: f64) -> Result<Self> {
        let cls = classification_metrics(records, threshold)?;
        Ok(Self {
            n: records.len(),
            num_bins,
            threshold,
            ece: ece(records, num_bins)?,
            brier: brier(records)?,
            auroc: auroc(records)?,
            recall: cls.recall,
            f1: cls.f1,
            accuracy: cls.accuracy,
            degenerate: cls.degenerate,
            reliability_points: reliability_curve(records, num_bins)?,
            roc_points: roc_curve(records)?,
        })
    }

    /// Scalar metrics as pretty JSON.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct");
        s.push('\n');
        s
    }

    pub fn reliability_csv(&self) -> String {
        let mut s = String::from("bin_center,mean_prob,empirical_freq,count\n");
        for p in &self.reliability_points {
            writeln!(s, "{},{},{},{}", p.bin_center, p.mean_prob, p.empirical_freq, p.count).unwrap();
        }
        s
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.roc_points {
            writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold).unwrap();
        }
        s
    }

    /// Writes `metrics.json`, `reliability.csv` and `roc.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("metrics.json", self.to_json()),
            ("reliability.csv", self.reliability_csv()),
            ("roc.csv", self.roc_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
