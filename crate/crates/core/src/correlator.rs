//! Pearson flow correlator: a zero-hyperparameter statistical attacker
//! that thresholds the correlation of two IFD arrays.

use std::io::{self, Write};

use serde::Serialize;

use crate::dataset::FlowPairRecord;
use crate::error::{Error, Result};
use crate::probe::IfdArray;

/// Pearson correlation of the first `min(valid_a, valid_b)` delays.
/// Zero when fewer than two delays overlap or either side is constant.
pub fn similarity(a: &IfdArray, b: &IfdArray) -> f64 {
    let n = a.valid_len.min(b.valid_len);
    if n < 2 {
        return 0.0;
    }
    pearson(&a.values[..n], &b.values[..n])
}

fn pearson(a: &[u64], b: &[u64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

pub fn score(rec: &FlowPairRecord) -> f64 {
    similarity(&rec.ifd_out(), &rec.ifd_in())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelatorModel {
    pub threshold: f64,
    pub trained: bool,
}

impl CorrelatorModel {
    pub fn classify(&self, score: f64) -> u8 {
        u8::from(score >= self.threshold)
    }
}

/// Pick the threshold with the best training accuracy among the observed
/// scores (plus "reject everything"). Ties go to the lowest threshold.
pub fn fit_threshold(train: &[FlowPairRecord]) -> Result<CorrelatorModel> {
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut scored: Vec<(f64, u8)> = train.iter().map(|r| (score(r), r.label)).collect();
    Ok(fit_scores(&mut scored))
}

pub(crate) fn fit_scores(scored: &mut [(f64, u8)]) -> CorrelatorModel {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = scored.iter().filter(|s| s.1 == 1).count();
    // threshold above every score: all predicted negative
    let mut best = (scored.len() - positives, f64::INFINITY);
    // walking down the sorted scores, predicted positives are the suffix
    let mut tp = 0;
    let mut fp = 0;
    let mut i = scored.len();
    while i > 0 {
        let t = scored[i - 1].0;
        while i > 0 && scored[i - 1].0 == t {
            if scored[i - 1].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i -= 1;
        }
        let tn = scored.len() - positives - fp;
        let correct = tp + tn;
        if correct >= best.0 {
            best = (correct, t);
        }
    }
    CorrelatorModel {
        threshold: best.1,
        trained: true,
    }
}

pub fn classify(model: &CorrelatorModel, rec: &FlowPairRecord) -> u8 {
    model.classify(score(rec))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        MetricsReport {
            tp,
            tn,
            fp,
            fn_,
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            recall,
            precision,
            f1: f1(precision, recall),
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Harmonic mean, zero when both inputs are zero.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn evaluate(model: &CorrelatorModel, test: &[FlowPairRecord]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test split".into()));
    }
    let preds: Vec<(u8, u8)> = test.iter().map(|r| (classify(model, r), r.label)).collect();
    Ok(count(&preds))
}

/// Metrics from `(predicted, actual)` pairs.
pub fn count(preds: &[(u8, u8)]) -> MetricsReport {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for &(p, y) in preds {
        match (p, y) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fn_ += 1,
        }
    }
    MetricsReport::from_counts(tp, tn, fp, fn_)
}

pub const METRICS_HEADER: &str = "dataset,detector,accuracy,recall,precision,f1,tp,tn,fp,fn";

pub fn write_metrics_csv<W: Write + ?Sized>(w: &mut W, rows: &[(String, String, MetricsReport)]) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for (dataset, detector, m) in rows {
        writeln!(
            w,
            "{dataset},{detector},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            m.accuracy, m.recall, m.precision, m.f1, m.tp, m.tn, m.fp, m.fn_
        )?;
    }
    Ok(())
}
