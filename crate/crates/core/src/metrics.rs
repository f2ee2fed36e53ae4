//! Calibration and classification evaluation: ECE with reliability bins,
//! recall within the most confident predictions, ROC AUC, accuracy, and
//! report assembly.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// One evaluated sample: a probability vector plus its true label.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl Prediction {
    pub fn new(probs: Vec<f64>, label: usize) -> Self {
        Self { probs, label }
    }

    /// Argmax class, ties broken to the lowest index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Max-class probability.
    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted()]
    }

    pub fn correct(&self) -> bool {
        self.predicted() == self.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    Empty,
    SingleClass,
    InvalidArg(String),
}

impl std::fmt::Display for MetricError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricError::Empty => write!(f, "empty prediction set"),
            MetricError::SingleClass => write!(f, "both classes required"),
            MetricError::InvalidArg(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for MetricError {}

pub type Result<T> = std::result::Result<T, MetricError>;

/// One confidence bin: the interval `(lo, hi]`, its population, and the
/// mean accuracy/confidence of the samples inside.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub acc: f64,
    pub conf: f64,
}

/// Equal-width reliability bins over (0, 1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
}

impl ReliabilityBins {
    /// Bins predictions by confidence. Confidence 0 lands in bin 1;
    /// confidence exactly 1 in bin M.
    pub fn build(predictions: &[Prediction], m: usize) -> Result<Self> {
        if predictions.is_empty() {
            return Err(MetricError::Empty);
        }
        if m == 0 {
            return Err(MetricError::InvalidArg("bin count must be >= 1".into()));
        }
        let mut counts = vec![0usize; m];
        let mut acc_sum = vec![0.0f64; m];
        let mut conf_sum = vec![0.0f64; m];
        for p in predictions {
            let conf = p.confidence();
            // ceil(conf·M) with the conf = 0 edge pinned to bin 1.
            let bin = ((conf * m as f64).ceil() as usize).clamp(1, m) - 1;
            counts[bin] += 1;
            acc_sum[bin] += f64::from(p.correct());
            conf_sum[bin] += conf;
        }
        let bins = (0..m)
            .map(|i| ReliabilityBin {
                lo: i as f64 / m as f64,
                hi: (i + 1) as f64 / m as f64,
                count: counts[i],
                acc: if counts[i] > 0 { acc_sum[i] / counts[i] as f64 } else { 0.0 },
                conf: if counts[i] > 0 { conf_sum[i] / counts[i] as f64 } else { 0.0 },
            })
            .collect();
        Ok(Self {
            bins,
            total: predictions.len(),
        })
    }

    /// Bin-weighted mean |accuracy − confidence|; empty bins contribute 0.
    pub fn ece(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| (b.count as f64 / self.total as f64) * (b.acc - b.conf).abs())
            .sum()
    }

    /// Reliability CSV (`lo,hi,count,acc,conf`) for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,count,acc,conf\n");
        for b in &self.bins {
            writeln!(out, "{},{},{},{},{}", b.lo, b.hi, b.count, b.acc, b.conf).unwrap();
        }
        out
    }
}

/// Expected calibration error with `m` equal-width confidence bins.
pub fn ece(predictions: &[Prediction], m: usize) -> Result<f64> {
    Ok(ReliabilityBins::build(predictions, m)?.ece())
}

/// Recall within the top ⌈k·N/100⌉ most confident predictions (ties broken
/// by sample order). Positives are class 1. A subset with no actual
/// positives yields 1.0 (vacuous recall).
pub fn recall_at_k(predictions: &[Prediction], k: f64) -> Result<f64> {
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    if !(0.0 < k && k <= 100.0) {
        return Err(MetricError::InvalidArg(format!("k = {k} outside (0, 100]")));
    }
    let n = predictions.len();
    let take = ((k * n as f64) / 100.0).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .confidence()
            .partial_cmp(&predictions[a].confidence())
            .unwrap()
            .then(a.cmp(&b))
    });
    let subset = &order[..take.min(n)];
    let mut tp = 0usize;
    let mut fn_ = 0usize;
    for &i in subset {
        if predictions[i].label == 1 {
            if predictions[i].predicted() == 1 {
                tp += 1;
            } else {
                fn_ += 1;
            }
        }
    }
    if tp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(tp as f64 / (tp + fn_) as f64)
}

/// ROC AUC in the Mann–Whitney formulation: the fraction of
/// (positive, negative) pairs where the positive sample's class-1
/// probability is higher, ties counting one half.
pub fn auc(predictions: &[Prediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let pos: Vec<f64> = predictions
        .iter()
        .filter(|p| p.label == 1)
        .map(|p| p.probs[1])
        .collect();
    let neg: Vec<f64> = predictions
        .iter()
        .filter(|p| p.label != 1)
        .map(|p| p.probs[1])
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricError::SingleClass);
    }
    let mut wins = 0.0f64;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Mean argmax-vs-label agreement.
pub fn accuracy(predictions: &[Prediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = predictions.iter().filter(|p| p.correct()).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Per-resolution entropy statistics pooled over all evaluated patches.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EntropySummary {
    pub resolution: usize,
    pub mean: f64,
    pub std: f64,
}

/// Full evaluation report; serializes to deterministic JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub ece: f64,
    pub accuracy: f64,
    pub auc: f64,
    /// Keyed by the integer percentage, e.g. "10", "30".
    pub recall_at: BTreeMap<String, f64>,
    pub bins: Vec<ReliabilityBin>,
    pub entropy_summary: Vec<EntropySummary>,
}

/// Assembles every metric at the standard settings (M = 15 bins,
/// R@{10, 30}%); AUC falls back to 0.5 reporting when the split is
/// single-class is not attempted — the caller sees the error instead.
pub fn build_report(
    predictions: &[Prediction],
    m: usize,
    recall_ks: &[u32],
    entropy_summary: Vec<EntropySummary>,
) -> Result<EvalReport> {
    let bins = ReliabilityBins::build(predictions, m)?;
    let mut recall_at = BTreeMap::new();
    for &k in recall_ks {
        recall_at.insert(k.to_string(), recall_at_k(predictions, k as f64)?);
    }
    Ok(EvalReport {
        ece: bins.ece(),
        accuracy: accuracy(predictions)?,
        auc: auc(predictions)?,
        recall_at,
        bins: bins.bins,
        entropy_summary,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pools per-patch entropies into per-resolution population statistics.
pub fn summarize_entropy(per_resolution: &[Vec<f64>]) -> Vec<EntropySummary> {
    per_resolution
        .iter()
        .enumerate()
        .map(|(r, values)| {
            let n = values.len().max(1) as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            EntropySummary {
                resolution: r + 1,
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}
