//! Calibration: sample- and resolution-wise label smoothing (SRLS) plus the
//! temperature-scaling and uniform label-smoothing baselines.
//!
//! SRLS records, once, the mean and standard deviation of every training
//! sample's per-patch entropy at each resolution, min-max scales both
//! statistics per resolution across the dataset, and converts them into a
//! per-(sample, resolution) smoothing factor
//! `ε = ½(M̃ + S̃)·α ∈ [0, α]`. The final training phase then optimizes
//! cross-entropy alone against the softened labels.

use std::fmt::Write as _;

use crate::metrics::MetricError;

/// Entropy statistics for one (sample, resolution) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyStatRow {
    pub sample_id: String,
    /// 1-based resolution index (r = 1 is coarsest).
    pub resolution: usize,
    pub mean: f64,
    pub std: f64,
    pub scaled_mean: f64,
    pub scaled_std: f64,
    pub epsilon: f64,
}

/// Per-sample, per-resolution entropy statistics with their scaled forms
/// and smoothing factors. Rows are ordered sample-major.
#[derive(Debug, Clone, Default)]
pub struct EntropyStatsTable {
    pub rows: Vec<EntropyStatRow>,
    pub resolutions: usize,
}

impl EntropyStatsTable {
    /// Builds the table from raw per-sample, per-resolution entropy vectors
    /// (one entry per patch), then scales and attaches ε at the given α.
    pub fn build(
        samples: &[(String, Vec<Vec<f64>>)],
        alpha: f64,
    ) -> Result<Self, MetricError> {
        if samples.is_empty() {
            return Err(MetricError::Empty);
        }
        let resolutions = samples[0].1.len();
        if resolutions == 0 || samples.iter().any(|(_, per_r)| per_r.len() != resolutions) {
            return Err(MetricError::InvalidArg(
                "every sample needs the same nonzero resolution count".into(),
            ));
        }
        let mut rows = Vec::with_capacity(samples.len() * resolutions);
        for (sample_id, per_r) in samples {
            for (r, entropies) in per_r.iter().enumerate() {
                let (mean, std) = population_stats(entropies)?;
                rows.push(EntropyStatRow {
                    sample_id: sample_id.clone(),
                    resolution: r + 1,
                    mean,
                    std,
                    scaled_mean: 0.0,
                    scaled_std: 0.0,
                    epsilon: 0.0,
                });
            }
        }
        let mut table = Self { rows, resolutions };
        table.scale_and_smooth(alpha);
        Ok(table)
    }

    /// Min-max scales means and stds within each resolution, then sets
    /// `ε = ½(M̃ + S̃)·α`.
    fn scale_and_smooth(&mut self, alpha: f64) {
        for r in 1..=self.resolutions {
            let means: Vec<f64> = self
                .rows
                .iter()
                .filter(|row| row.resolution == r)
                .map(|row| row.mean)
                .collect();
            let stds: Vec<f64> = self
                .rows
                .iter()
                .filter(|row| row.resolution == r)
                .map(|row| row.std)
                .collect();
            let scaled_means = minmax_scale(&means);
            let scaled_stds = minmax_scale(&stds);
            let mut i = 0;
            for row in self.rows.iter_mut().filter(|row| row.resolution == r) {
                row.scaled_mean = scaled_means[i];
                row.scaled_std = scaled_stds[i];
                row.epsilon = smoothing_factor(row.scaled_mean, row.scaled_std, alpha);
                i += 1;
            }
        }
    }

    /// Smoothing factors for one sample, indexed by 0-based resolution.
    pub fn epsilons_for(&self, sample_id: &str) -> Vec<f64> {
        let mut out: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|row| row.sample_id == sample_id)
            .map(|row| (row.resolution, row.epsilon))
            .collect();
        out.sort_by_key(|&(r, _)| r);
        out.into_iter().map(|(_, e)| e).collect()
    }

    /// CSV export: `sample_id,resolution,mean,std,scaled_mean,scaled_std,epsilon`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,resolution,mean,std,scaled_mean,scaled_std,epsilon\n");
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.sample_id,
                row.resolution,
                row.mean,
                row.std,
                row.scaled_mean,
                row.scaled_std,
                row.epsilon
            )
            .unwrap();
        }
        out
    }
}

/// Population mean and standard deviation (divide by n, not n−1), so a
/// single-patch level is well defined with S = 0.
fn population_stats(values: &[f64]) -> Result<(f64, f64), MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Min-max scaling into [0, 1]; a constant set maps to all zeros (minimal
/// smoothing).
pub fn minmax_scale(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// `ε = ½(M̃ + S̃)·α`, so ε ∈ [0, α] for scaled inputs.
pub fn smoothing_factor(scaled_mean: f64, scaled_std: f64, alpha: f64) -> f64 {
    0.5 * (scaled_mean + scaled_std) * alpha
}

/// Softens a hard binary label: the true class keeps `(1−ε) + ε/C`, the
/// other class receives `ε/C`.
pub fn smoothed_label(label: u8, epsilon: f64, classes: usize) -> Vec<f64> {
    let share = epsilon / classes as f64;
    (0..classes)
        .map(|c| {
            if c == label as usize {
                (1.0 - epsilon) + share
            } else {
                share
            }
        })
        .collect()
}

/// Uniform label smoothing: [`smoothed_label`] with one dataset-wide ε.
pub fn uniform_smooth(label: u8, epsilon: f64, classes: usize) -> Vec<f64> {
    smoothed_label(label, epsilon, classes)
}

/// Divides logits by `t` and renormalizes through softmax.
pub fn apply_temperature(logits: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let scaled: Vec<f64> = row.iter().map(|&v| v / t).collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect()
}

fn nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let probs = apply_temperature(logits, t);
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        total -= p[y].max(1e-12).ln();
    }
    total / labels.len() as f64
}

/// Fits the temperature by golden-section search on the validation
/// negative log-likelihood over `t ∈ [0.05, 20]`, to 1e-4 in `t`.
pub fn temperature_fit(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricError> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(MetricError::Empty);
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(MetricError::SingleClass);
    }
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.05f64, 20.0f64);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = nll(logits, labels, x1);
    let mut f2 = nll(logits, labels, x2);
    while hi - lo > 1e-4 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = nll(logits, labels, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = nll(logits, labels, x2);
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_for_uniform_and_one_hot_rows() {
        let samples = vec![
            ("a".to_string(), vec![vec![1.0, 1.0, 1.0]]),
            ("b".to_string(), vec![vec![0.0, 0.0]]),
        ];
        let table = EntropyStatsTable::build(&samples, 0.1).unwrap();
        assert_eq!(table.rows[0].mean, 1.0);
        assert_eq!(table.rows[0].std, 0.0);
        assert_eq!(table.rows[1].mean, 0.0);
        assert_eq!(table.rows[1].std, 0.0);
    }

    #[test]
    fn two_point_population_stats() {
        // Oracle: H = [1, 0] → M = 0.5, S = 0.5 (population).
        let samples = vec![("a".to_string(), vec![vec![1.0, 0.0]])];
        let table = EntropyStatsTable::build(&samples, 0.1).unwrap();
        assert_eq!(table.rows[0].mean, 0.5);
        assert_eq!(table.rows[0].std, 0.5);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(EntropyStatsTable::build(&[], 0.1).is_err());
    }

    #[test]
    fn minmax_affine_and_degenerate() {
        assert_eq!(minmax_scale(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_scale(&[3.0, 3.0]), vec![0.0, 0.0]);
        let scaled = minmax_scale(&[0.1, 0.7, 0.4]);
        for (s, e) in scaled.iter().zip([0.0, 1.0, 0.5]) {
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn minmax_is_idempotent_on_full_range() {
        let spanned = vec![0.0, 0.25, 1.0];
        assert_eq!(minmax_scale(&spanned), spanned);
    }

    #[test]
    fn smoothing_factor_endpoints() {
        assert_eq!(smoothing_factor(0.0, 0.0, 0.1), 0.0);
        assert!((smoothing_factor(1.0, 1.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((smoothing_factor(0.5, 0.5, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn smoothed_labels_are_distributions() {
        assert_eq!(smoothed_label(1, 0.0, 2), vec![0.0, 1.0]);
        let soft = smoothed_label(1, 0.1, 2);
        assert!((soft[0] - 0.05).abs() < 1e-15);
        assert!((soft[1] - 0.95).abs() < 1e-15);
        let mirror = smoothed_label(0, 0.1, 2);
        assert!((mirror[0] - 0.95).abs() < 1e-15);
        assert!((mirror[1] - 0.05).abs() < 1e-15);
        for eps in [0.0, 0.03, 0.1, 0.5] {
            let s: f64 = uniform_smooth(0, eps, 2).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_stays_within_alpha() {
        let samples = vec![
            ("a".to_string(), vec![vec![0.9, 0.1], vec![0.2, 0.2]]),
            ("b".to_string(), vec![vec![0.5, 0.5], vec![0.9, 0.3]]),
            ("c".to_string(), vec![vec![0.1, 0.3], vec![0.6, 0.9]]),
        ];
        let alpha = 0.1;
        let table = EntropyStatsTable::build(&samples, alpha).unwrap();
        for row in &table.rows {
            assert!(row.epsilon >= 0.0 && row.epsilon <= alpha + 1e-15, "{row:?}");
            assert!((0.0..=1.0).contains(&row.scaled_mean));
            assert!((0.0..=1.0).contains(&row.scaled_std));
        }
        let eps = table.epsilons_for("b");
        assert_eq!(eps.len(), 2);
    }

    #[test]
    fn csv_has_header_and_all_rows() {
        let samples = vec![("a".to_string(), vec![vec![0.4], vec![0.6]])];
        let table = EntropyStatsTable::build(&samples, 0.1).unwrap();
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "sample_id,resolution,mean,std,scaled_mean,scaled_std,epsilon"
        );
        assert!(lines[1].starts_with("a,1,"));
        assert!(lines[2].starts_with("a,2,"));
    }

    #[test]
    fn identity_temperature_preserves_softmax() {
        let logits = vec![vec![2.0, -1.0], vec![0.0, 0.5]];
        let probs = apply_temperature(&logits, 1.0);
        for (row, logit) in probs.iter().zip(&logits) {
            let max = logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logit.iter().map(|&v| (v - max).exp()).collect();
            let s: f64 = exps.iter().sum();
            for (p, e) in row.iter().zip(exps) {
                assert!((p - e / s).abs() < 1e-12);
            }
        }
    }

    /// Logit gap ln(4) with an 80/20 label split: the NLL optimum sits at
    /// exactly t = 1; scaling the logits by 5 moves it to t = 5.
    fn calibrated_set() -> (Vec<Vec<f64>>, Vec<usize>) {
        let gap = 4.0f64.ln();
        let logits: Vec<Vec<f64>> = (0..10).map(|_| vec![gap, 0.0]).collect();
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i >= 8)).collect();
        (logits, labels)
    }

    #[test]
    fn calibrated_logits_fit_near_unit_temperature() {
        let (logits, labels) = calibrated_set();
        let t = temperature_fit(&logits, &labels).unwrap();
        assert!((0.9..=1.1).contains(&t), "t = {t}");
    }

    #[test]
    fn overconfident_logits_fit_high_temperature() {
        let (logits, labels) = calibrated_set();
        let scaled: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| row.iter().map(|&v| v * 5.0).collect())
            .collect();
        let t = temperature_fit(&scaled, &labels).unwrap();
        assert!(t > 1.0, "t = {t}");
        assert!((t - 5.0).abs() < 0.05, "optimum should sit near 5, got {t}");
    }

    #[test]
    fn single_class_validation_is_rejected() {
        let logits = vec![vec![1.0, 0.0], vec![0.5, 0.2]];
        let labels = vec![0, 0];
        assert!(matches!(
            temperature_fit(&logits, &labels),
            Err(MetricError::SingleClass)
        ));
    }
}
