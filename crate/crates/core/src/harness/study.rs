use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::{calibration_at, fit_chain, Pipeline, PipelineParams, SplitData};
use super::report::SplitFailure;
use super::{mean, HarnessError, Inputs, Protocol, SplitPlan};
use crate::calibration::CalibrationError;
use crate::metrics::CalibrationMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiouCell {
    pub t_fit: f64,
    pub t_eval: f64,
    pub ece: f64,
    pub ace: f64,
    pub sce: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiouFit {
    pub t_fit: f64,
    /// Mean TP count of the fit partitions at this threshold.
    pub mean_positives: f64,
    pub mean_samples: f64,
    /// Positives fell below max(100, half the count at the lowest threshold).
    pub low_sample: bool,
    pub failures: Vec<SplitFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiouStudy {
    pub t_fit: Vec<f64>,
    pub t_eval: Vec<f64>,
    /// Row-major over (t_fit, t_eval); means over successful splits.
    pub cells: Vec<TiouCell>,
    pub fits: Vec<TiouFit>,
}

impl TiouStudy {
    pub fn cell(&self, fit_index: usize, eval_index: usize) -> &TiouCell {
        &self.cells[fit_index * self.t_eval.len() + eval_index]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_fit,t_eval,ece,ace,sce,nll,low_sample\n");
        for c in &self.cells {
            let low = self.fits.iter().find(|f| f.t_fit == c.t_fit).is_some_and(|f| f.low_sample);
            let _ = writeln!(out, "{},{},{},{},{},{},{}", c.t_fit, c.t_eval, c.ece, c.ace, c.sce, c.nll, low);
        }
        out
    }

    pub fn render_text(&self) -> String {
        let mut out = String::from("ECE (%) by fit threshold (rows) and metric threshold (columns)\n");
        let _ = write!(out, "{:>8}", "");
        for t in &self.t_eval {
            let _ = write!(out, " {t:>7.2}");
        }
        out.push('\n');
        for (i, f) in self.fits.iter().enumerate() {
            let _ = write!(out, "{:>8.2}", f.t_fit);
            for j in 0..self.t_eval.len() {
                let _ = write!(out, " {:>7.2}", self.cell(i, j).ece * 100.0);
            }
            if f.low_sample {
                let _ = write!(out, "  low-sample fit ({:.0} TP)", f.mean_positives);
            }
            out.push('\n');
        }
        out
    }
}

struct SplitStudy {
    positives: usize,
    samples: usize,
    per_eval: Vec<CalibrationMetrics>,
}

/// Fits IoU-aware calibration with labels at each `t_fit` and measures
/// calibration with labels at each `t_eval`.
pub fn tiou_study(
    inputs: &Inputs,
    params: &PipelineParams,
    plan: &SplitPlan,
    protocol: &Protocol,
    t_fit: &[f64],
    t_eval: &[f64],
) -> Result<TiouStudy, HarnessError> {
    protocol.validate()?;
    if t_fit.is_empty() || t_eval.is_empty() {
        return Err(HarnessError::Config("threshold lists must be non-empty".into()));
    }
    if let Some(t) = t_fit.iter().chain(t_eval).find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(HarnessError::Config(format!("threshold {t} outside (0, 1]")));
    }
    let splits = plan.splits(&inputs.gt.image_ids())?;
    let data: Vec<SplitData> = splits.iter().map(|s| SplitData::new(inputs, s)).collect();

    let mut cells = Vec::with_capacity(t_fit.len() * t_eval.len());
    let mut fits: Vec<TiouFit> = Vec::with_capacity(t_fit.len());
    for &tf in t_fit {
        let outcomes: Vec<Result<SplitStudy, HarnessError>> = data
            .par_iter()
            .map(|d| {
                let chain = fit_chain(Pipeline::IouAware, params, protocol, &d.fit_gt, &d.fit_dets, tf)?;
                let meta = chain.model.as_ref().and_then(|m| m.fit_meta.clone()).expect("fitted");
                let processed = chain.apply(&d.eval_dets)?;
                let per_eval = t_eval
                    .iter()
                    .map(|&te| calibration_at(&processed, &d.eval_gt, protocol, te))
                    .collect::<Result<_, _>>()?;
                Ok(SplitStudy { positives: meta.positive_count, samples: meta.sample_count, per_eval })
            })
            .collect();
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for (split, outcome) in splits.iter().zip(outcomes) {
            match outcome {
                Ok(s) => ok.push(s),
                Err(HarnessError::Fit(e)) if !matches!(e, CalibrationError::Io(_)) => {
                    failures.push(SplitFailure { split: split.index, error: e.to_string() })
                }
                Err(e) => return Err(e),
            }
        }
        let nan_if_empty = |v: Vec<f64>| if v.is_empty() { f64::NAN } else { mean(&v) };
        for (j, &te) in t_eval.iter().enumerate() {
            let pick = |f: fn(&CalibrationMetrics) -> f64| nan_if_empty(ok.iter().map(|s| f(&s.per_eval[j])).collect());
            cells.push(TiouCell {
                t_fit: tf,
                t_eval: te,
                ece: pick(|m| m.ece),
                ace: pick(|m| m.ace),
                sce: pick(|m| m.sce),
                nll: pick(|m| m.nll),
            });
        }
        fits.push(TiouFit {
            t_fit: tf,
            mean_positives: nan_if_empty(ok.iter().map(|s| s.positives as f64).collect()),
            mean_samples: nan_if_empty(ok.iter().map(|s| s.samples as f64).collect()),
            low_sample: false,
            failures,
        });
    }

    let lowest = fits.iter().min_by(|a, b| a.t_fit.total_cmp(&b.t_fit)).map(|f| f.mean_positives).unwrap_or(f64::NAN);
    let floor = (0.5 * lowest).max(100.0);
    for f in &mut fits {
        f.low_sample = !f.failures.is_empty() || f.mean_positives.is_nan() || f.mean_positives < floor;
    }
    Ok(TiouStudy { t_fit: t_fit.to_vec(), t_eval: t_eval.to_vec(), cells, fits })
}
