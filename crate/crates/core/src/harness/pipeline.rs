use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{FitSummary, ReportEntry, SplitFailure, SplitRow};
use super::sweep::{sweep, SelectBy, SweepGrid, SweepTable};
use super::{HarnessError, Inputs, Protocol, Split, SplitPlan};
use crate::calibration::{
    fit, iou_aware_calibrate, labeled_samples, CalibrationError, CalibrationModel, Family, FeatureRecipe, FitOptions,
};
use crate::eval::{map_metrics, match_detections};
use crate::metrics::{calibration_metrics, samples_from_matches, CalibrationMetrics};
use crate::model::{Dataset, DetectionSet};
use crate::suppression::{suppress_set, SuppressionConfig, DEFAULT_SOFT_SCORE_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    None,
    Nms,
    SoftNms,
    BetaUnivariate,
    IouAware,
    NmsPlusBeta,
    SoftPlusBeta,
}

impl Pipeline {
    pub const ALL: [Pipeline; 7] = [
        Pipeline::None,
        Pipeline::Nms,
        Pipeline::SoftNms,
        Pipeline::BetaUnivariate,
        Pipeline::NmsPlusBeta,
        Pipeline::SoftPlusBeta,
        Pipeline::IouAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::None => "none",
            Pipeline::Nms => "nms",
            Pipeline::SoftNms => "soft_nms",
            Pipeline::BetaUnivariate => "beta_univariate",
            Pipeline::IouAware => "iou_aware",
            Pipeline::NmsPlusBeta => "nms_plus_beta",
            Pipeline::SoftPlusBeta => "soft_plus_beta",
        }
    }

    pub fn suppression(self, params: &PipelineParams) -> Option<SuppressionConfig> {
        match self {
            Pipeline::Nms | Pipeline::NmsPlusBeta => Some(SuppressionConfig::hard(params.t_nms)),
            Pipeline::SoftNms | Pipeline::SoftPlusBeta => {
                Some(SuppressionConfig::soft(params.sigma).with_floor(params.soft_floor))
            }
            _ => None,
        }
    }

    pub fn recipe(self, params: &PipelineParams) -> Option<FeatureRecipe> {
        match self {
            Pipeline::BetaUnivariate | Pipeline::NmsPlusBeta | Pipeline::SoftPlusBeta => {
                Some(FeatureRecipe::univariate(Family::Beta))
            }
            Pipeline::IouAware => Some(params.recipe.clone()),
            Pipeline::None | Pipeline::Nms | Pipeline::SoftNms => None,
        }
    }

    pub fn needs_fit(self) -> bool {
        self.recipe(&PipelineParams::default()).is_some()
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pipeline::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| format!("unknown pipeline `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub t_nms: f64,
    pub sigma: f64,
    pub soft_floor: f64,
    pub recipe: FeatureRecipe,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self { t_nms: 0.5, sigma: 0.5, soft_floor: DEFAULT_SOFT_SCORE_FLOOR, recipe: FeatureRecipe::default() }
    }
}

/// A pipeline's post-processing with any calibration already fitted.
#[derive(Debug, Clone)]
pub struct FittedChain {
    pub suppression: Option<SuppressionConfig>,
    pub model: Option<CalibrationModel>,
}

impl FittedChain {
    pub fn apply(&self, dets: &DetectionSet) -> Result<DetectionSet, HarnessError> {
        let suppressed = match &self.suppression {
            Some(cfg) => suppress_set(dets, cfg)?,
            None => dets.clone(),
        };
        Ok(match &self.model {
            Some(model) => iou_aware_calibrate(&suppressed, model)?,
            None => suppressed,
        })
    }
}

/// Fits whatever calibration the pipeline needs on the given (fit) data.
/// Calibration after suppression is fitted on suppressed detections.
pub fn fit_chain(
    pipeline: Pipeline,
    params: &PipelineParams,
    protocol: &Protocol,
    gt: &Dataset,
    dets: &DetectionSet,
    t_fit: f64,
) -> Result<FittedChain, HarnessError> {
    let suppression = pipeline.suppression(params);
    let model = match pipeline.recipe(params) {
        None => None,
        Some(recipe) => {
            let processed = match &suppression {
                Some(cfg) => suppress_set(dets, cfg)?,
                None => dets.clone(),
            };
            let matches = match_detections(&processed, gt, t_fit);
            let samples = labeled_samples(&processed, &matches, &recipe)?;
            let opts = FitOptions {
                objective: protocol.objective,
                max_iterations: protocol.max_iterations,
                t_iou: t_fit,
                ..Default::default()
            };
            Some(fit(&samples, &recipe, &opts)?)
        }
    };
    Ok(FittedChain { suppression, model })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub map: f64,
    pub map50: f64,
    pub calibration: CalibrationMetrics,
    pub detections: usize,
}

pub(crate) fn calibration_at(
    processed: &DetectionSet,
    gt: &Dataset,
    protocol: &Protocol,
    t_metric: f64,
) -> Result<CalibrationMetrics, HarnessError> {
    let scored = if protocol.calib_on_capped { processed.apply_cap(protocol.cap_eval) } else { processed.clone() };
    let samples = samples_from_matches(&match_detections(&scored, gt, t_metric));
    Ok(calibration_metrics(&samples, protocol.bins)?)
}

pub(crate) fn score(processed: &DetectionSet, gt: &Dataset, protocol: &Protocol) -> Result<SplitMetrics, HarnessError> {
    let m = map_metrics(processed, gt, protocol.cap_eval);
    Ok(SplitMetrics {
        map: m.map,
        map50: m.map50,
        calibration: calibration_at(processed, gt, protocol, protocol.t_iou_metric)?,
        detections: processed.apply_cap(protocol.cap_eval).len(),
    })
}

pub(crate) fn fit_summary(chain: &FittedChain) -> Option<FitSummary> {
    chain.model.as_ref().and_then(|m| {
        m.fit_meta.as_ref().map(|meta| FitSummary {
            samples: meta.sample_count,
            positives: meta.positive_count,
            iterations: meta.iterations,
            converged: meta.converged,
            theta: m.theta.clone(),
        })
    })
}

pub(crate) struct SplitData {
    pub fit_gt: Dataset,
    pub fit_dets: DetectionSet,
    pub eval_gt: Dataset,
    pub eval_dets: DetectionSet,
}

impl SplitData {
    pub fn new(inputs: &Inputs, split: &Split) -> Self {
        Self {
            fit_gt: inputs.gt.restrict(&split.fit),
            fit_dets: inputs.dets.restrict(&split.fit),
            eval_gt: inputs.gt.restrict(&split.eval),
            eval_dets: inputs.dets.restrict(&split.eval),
        }
    }
}

fn run_split(
    inputs: &Inputs,
    split: &Split,
    pipeline: Pipeline,
    params: &PipelineParams,
    protocol: &Protocol,
) -> Result<SplitRow, HarnessError> {
    let data = SplitData::new(inputs, split);
    let chain = fit_chain(pipeline, params, protocol, &data.fit_gt, &data.fit_dets, protocol.t_iou_fit)?;
    let processed = chain.apply(&data.eval_dets)?;
    let m = score(&processed, &data.eval_gt, protocol)?;
    Ok(SplitRow::from_metrics(split.index, &m, fit_summary(&chain)))
}

/// Fits on every split's fit partition, evaluates on its eval partition and
/// aggregates. Splits whose calibration cannot be fitted are recorded as
/// failures and left out of the aggregate.
pub fn run_pipeline(
    inputs: &Inputs,
    pipeline: Pipeline,
    params: &PipelineParams,
    plan: &SplitPlan,
    protocol: &Protocol,
) -> Result<ReportEntry, HarnessError> {
    protocol.validate()?;
    let splits = plan.splits(&inputs.gt.image_ids())?;
    let outcomes: Vec<Result<SplitRow, HarnessError>> =
        splits.par_iter().map(|s| run_split(inputs, s, pipeline, params, protocol)).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (split, outcome) in splits.iter().zip(outcomes) {
        match outcome {
            Ok(row) => rows.push(row),
            Err(HarnessError::Fit(e)) if !matches!(e, CalibrationError::Io(_)) => {
                log::warn!("split {}: {e}", split.index);
                failures.push(SplitFailure { split: split.index, error: e.to_string() });
            }
            Err(e) => return Err(e),
        }
    }
    let label = match pipeline {
        Pipeline::IouAware => format!("{}:{}", pipeline.name(), params.recipe.label()),
        _ => pipeline.name().to_string(),
    };
    Ok(ReportEntry::new(label, pipeline, params.clone(), rows, failures))
}

/// Applies a fit-free pipeline to the full set.
pub fn evaluate_full(
    inputs: &Inputs,
    pipeline: Pipeline,
    params: &PipelineParams,
    protocol: &Protocol,
) -> Result<SplitMetrics, HarnessError> {
    if pipeline.needs_fit() {
        return Err(HarnessError::Config(format!("pipeline `{pipeline}` needs a fit partition")));
    }
    let chain = FittedChain { suppression: pipeline.suppression(params), model: None };
    score(&chain.apply(&inputs.dets)?, &inputs.gt, protocol)
}

/// Every pipeline side by side, with NMS parameters oracle-tuned on the
/// full set by the given grids.
pub fn compare(
    inputs: &Inputs,
    params: &PipelineParams,
    plan: &SplitPlan,
    protocol: &Protocol,
    hard: &SweepGrid,
    soft: &SweepGrid,
    select: SelectBy,
) -> Result<(Vec<ReportEntry>, Vec<SweepTable>), HarnessError> {
    let hard_table = sweep(inputs, hard, protocol)?;
    let soft_table = sweep(inputs, soft, protocol)?;
    let tuned =
        PipelineParams { t_nms: hard_table.best(select).param, sigma: soft_table.best(select).param, ..params.clone() };
    let mut entries = Vec::with_capacity(Pipeline::ALL.len());
    for pipeline in Pipeline::ALL {
        let mut entry = run_pipeline(inputs, pipeline, &tuned, plan, protocol)?;
        entry.oracle_tuned = pipeline.suppression(&tuned).is_some();
        entries.push(entry);
    }
    Ok((entries, vec![hard_table, soft_table]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in Pipeline::ALL {
            assert_eq!(p.name().parse::<Pipeline>().unwrap(), p);
        }
        assert!("nms2".parse::<Pipeline>().is_err());
    }

    #[test]
    fn fit_requirements() {
        assert!(!Pipeline::Nms.needs_fit());
        assert!(Pipeline::SoftPlusBeta.needs_fit());
        assert!(Pipeline::IouAware.suppression(&PipelineParams::default()).is_none());
    }
}
