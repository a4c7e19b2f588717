//! Calibration metrics over (confidence, TP) samples. All values are
//! fractions; percent conversion is left to presentation code.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::eval::{Label, MatchResult};
use crate::model::CategoryId;

pub const NLL_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibSample {
    pub confidence: f64,
    pub tp: bool,
    pub category: CategoryId,
}

impl CalibSample {
    pub fn new(confidence: f64, tp: bool) -> Self {
        Self { confidence, tp, category: 0 }
    }
}

/// Samples from a match result, leaving out crowd-ignored detections.
pub fn samples_from_matches(matches: &MatchResult) -> Vec<CalibSample> {
    matches
        .detections
        .iter()
        .filter(|d| d.label != Label::Ignored)
        .map(|d| CalibSample { confidence: d.confidence, tp: d.label == Label::Tp, category: d.category_id })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningScheme {
    EqualWidth,
    AdaptiveEqualCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub scheme: BinningScheme,
    pub bin_count: usize,
    pub per_class: bool,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self { scheme: BinningScheme::EqualWidth, bin_count: 10, per_class: false }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("bin count must be at least 1")]
    ZeroBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub low: f64,
    pub high: f64,
    pub mean_confidence: f64,
    pub precision: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
    /// Count-weighted mean gap over bins (ECE or ACE depending on scheme).
    pub error: f64,
}

impl ReliabilityTable {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,mean_conf,precision,count\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{},{}", b.low, b.high, b.mean_confidence, b.precision, b.count);
        }
        out
    }
}

/// Index of the equal-width bin `(k/B, (k+1)/B]` holding `c`; 0 goes to bin 0.
pub fn equal_width_bin(c: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut k = ((c * b).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while k > 0 && c <= k as f64 / b {
        k -= 1;
    }
    while k + 1 < bins && c > (k + 1) as f64 / b {
        k += 1;
    }
    k
}

fn summarize(members: &[&CalibSample], low: f64, high: f64) -> ReliabilityBin {
    let count = members.len();
    if count == 0 {
        return ReliabilityBin { low, high, mean_confidence: 0.0, precision: 0.0, count };
    }
    let n = count as f64;
    ReliabilityBin {
        low,
        high,
        mean_confidence: members.iter().map(|s| s.confidence).sum::<f64>() / n,
        precision: members.iter().filter(|s| s.tp).count() as f64 / n,
        count,
    }
}

fn weighted_gap(bins: &[ReliabilityBin], total: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / total as f64 * (b.precision - b.mean_confidence).abs())
        .sum()
}

fn check(samples: &[CalibSample], bins: usize) -> Result<(), MetricError> {
    if samples.is_empty() {
        Err(MetricError::Empty)
    } else if bins == 0 {
        Err(MetricError::ZeroBins)
    } else {
        Ok(())
    }
}

fn equal_width_table(samples: &[CalibSample], bins: usize) -> ReliabilityTable {
    let mut members: Vec<Vec<&CalibSample>> = vec![Vec::new(); bins];
    for s in samples {
        members[equal_width_bin(s.confidence, bins)].push(s);
    }
    let b = bins as f64;
    let bins: Vec<ReliabilityBin> =
        members.iter().enumerate().map(|(k, m)| summarize(m, k as f64 / b, (k + 1) as f64 / b)).collect();
    let error = weighted_gap(&bins, samples.len());
    ReliabilityTable { bins, error }
}

fn equal_count_table(samples: &[CalibSample], bins: usize) -> ReliabilityTable {
    let mut sorted: Vec<&CalibSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    let n = sorted.len();
    let bins = bins.min(n);
    let table: Vec<ReliabilityBin> = (0..bins)
        .map(|k| {
            let chunk = &sorted[k * n / bins..(k + 1) * n / bins];
            let low = chunk.first().map_or(0.0, |s| s.confidence);
            let high = chunk.last().map_or(0.0, |s| s.confidence);
            summarize(chunk, low, high)
        })
        .collect();
    let error = weighted_gap(&table, n);
    ReliabilityTable { bins: table, error }
}

/// Reliability data under the given binning (ignores `per_class`).
pub fn reliability_table(samples: &[CalibSample], spec: &BinningSpec) -> Result<ReliabilityTable, MetricError> {
    check(samples, spec.bin_count)?;
    Ok(match spec.scheme {
        BinningScheme::EqualWidth => equal_width_table(samples, spec.bin_count),
        BinningScheme::AdaptiveEqualCount => equal_count_table(samples, spec.bin_count),
    })
}

/// Binned calibration error under `spec`; with `per_class` set it is the
/// unweighted mean over categories present in the samples.
pub fn calibration_error(samples: &[CalibSample], spec: &BinningSpec) -> Result<f64, MetricError> {
    check(samples, spec.bin_count)?;
    if !spec.per_class {
        return Ok(reliability_table(samples, spec)?.error);
    }
    let mut by_class: BTreeMap<CategoryId, Vec<CalibSample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.category).or_default().push(*s);
    }
    let flat = BinningSpec { per_class: false, ..*spec };
    let mut total = 0.0;
    for group in by_class.values() {
        total += reliability_table(group, &flat)?.error;
    }
    Ok(total / by_class.len() as f64)
}

pub fn ece(samples: &[CalibSample], bins: usize) -> Result<f64, MetricError> {
    calibration_error(samples, &BinningSpec { scheme: BinningScheme::EqualWidth, bin_count: bins, per_class: false })
}

pub fn ace(samples: &[CalibSample], bins: usize) -> Result<f64, MetricError> {
    calibration_error(
        samples,
        &BinningSpec { scheme: BinningScheme::AdaptiveEqualCount, bin_count: bins, per_class: false },
    )
}

pub fn sce(samples: &[CalibSample], bins: usize) -> Result<f64, MetricError> {
    calibration_error(samples, &BinningSpec { scheme: BinningScheme::EqualWidth, bin_count: bins, per_class: true })
}

pub fn nll(samples: &[CalibSample]) -> Result<f64, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let p = s.confidence.clamp(NLL_CLIP, 1.0 - NLL_CLIP);
            if s.tp {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / samples.len() as f64)
}

pub fn brier(samples: &[CalibSample]) -> Result<f64, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let y = if s.tp { 1.0 } else { 0.0 };
            (y - s.confidence).powi(2)
        })
        .sum();
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    pub ece: f64,
    pub ace: f64,
    pub sce: f64,
    pub nll: f64,
    pub brier: f64,
}

pub fn calibration_metrics(samples: &[CalibSample], bins: usize) -> Result<CalibrationMetrics, MetricError> {
    Ok(CalibrationMetrics {
        ece: ece(samples, bins)?,
        ace: ace(samples, bins)?,
        sce: sce(samples, bins)?,
        nll: nll(samples)?,
        brier: brier(samples)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn repeat(conf: f64, tp: usize, fp: usize) -> Vec<CalibSample> {
        let mut v = vec![CalibSample::new(conf, true); tp];
        v.extend(vec![CalibSample::new(conf, false); fp]);
        v
    }

    #[test]
    fn bin_edges() {
        assert_eq!(equal_width_bin(0.0, 10), 0);
        assert_eq!(equal_width_bin(0.1, 10), 0);
        assert_eq!(equal_width_bin(0.3, 10), 2);
        assert_eq!(equal_width_bin(0.30000001, 10), 3);
        assert_eq!(equal_width_bin(1.0, 10), 9);
        assert_eq!(equal_width_bin(0.7, 1), 0);
    }

    #[test]
    fn two_bin_fixture() {
        let mut s = repeat(0.8, 42, 18);
        s.extend(repeat(0.3, 16, 24));
        assert_abs_diff_eq!(ece(&s, 10).unwrap(), 0.10, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_sets() {
        assert_eq!(ece(&repeat(1.0, 5, 0), 10).unwrap(), 0.0);
        assert_eq!(ece(&repeat(1.0, 0, 5), 10).unwrap(), 1.0);
        assert_eq!(ece(&[], 10), Err(MetricError::Empty));
    }

    #[test]
    fn ace_small_and_single_bin() {
        let s = vec![CalibSample::new(0.2, true), CalibSample::new(0.9, false), CalibSample::new(0.6, true)];
        assert_abs_diff_eq!(ace(&s, 10).unwrap(), (0.8 + 0.9 + 0.4) / 3.0, epsilon = 1e-12);
        let mean_conf: f64 = (0.2 + 0.9 + 0.6) / 3.0;
        assert_abs_diff_eq!(ace(&s, 1).unwrap(), (2.0 / 3.0 - mean_conf).abs(), epsilon = 1e-12);
    }

    #[test]
    fn sce_unweighted() {
        let mut s: Vec<CalibSample> = repeat(0.5, 6, 4).into_iter().map(|x| CalibSample { category: 1, ..x }).collect();
        s.extend(repeat(0.5, 80, 20).into_iter().map(|x| CalibSample { category: 2, ..x }));
        assert_abs_diff_eq!(sce(&s, 10).unwrap(), 0.2, epsilon = 1e-12);
        let one: Vec<_> = s.iter().filter(|x| x.category == 2).copied().collect();
        assert_eq!(sce(&one, 10).unwrap(), ece(&one, 10).unwrap());
    }

    #[test]
    fn nll_and_brier_fixtures() {
        assert_abs_diff_eq!(nll(&[CalibSample::new(0.5, true)]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        let s = repeat(0.9, 9, 1);
        assert_abs_diff_eq!(nll(&s).unwrap(), -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()), epsilon = 1e-12);
        assert!(nll(&[CalibSample::new(1.0, true), CalibSample::new(0.0, false)]).unwrap() < 1e-11);
        assert_abs_diff_eq!(brier(&repeat(0.5, 3, 5)).unwrap(), 0.25, epsilon = 1e-12);
        let mixed = [CalibSample::new(0.2, false), CalibSample::new(0.8, true)];
        assert_abs_diff_eq!(brier(&mixed).unwrap(), 0.04, epsilon = 1e-12);
    }

    #[test]
    fn reliability_csv() {
        let t = reliability_table(&repeat(1.0, 1, 0), &BinningSpec { bin_count: 2, ..Default::default() }).unwrap();
        assert_eq!(t.total(), 1);
        assert_eq!(t.to_csv(), "bin_low,bin_high,mean_conf,precision,count\n0,0.5,0,0,0\n0.5,1,1,1,1\n");
    }
}
