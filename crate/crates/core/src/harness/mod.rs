//! Experiment orchestration: repeated image-wise splits, post-processing
//! pipelines, NMS sweeps, the t_IoU study, recipe ablations and reports.

mod ablation;
mod pipeline;
mod report;
mod split;
mod study;
mod sweep;

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_recipes, ablation_suite};
pub use pipeline::{
    compare, evaluate_full, fit_chain, run_pipeline, FittedChain, Pipeline, PipelineParams, SplitMetrics,
};
pub use report::{
    Aggregate, EvalReport, FitSummary, ReportEntry, ReportHeader, SplitFailure, SplitRow, Stat, REPORT_FORMAT,
    REPORT_VERSION,
};
pub use split::{Split, SplitPlan};
pub use study::{tiou_study, TiouCell, TiouFit, TiouStudy};
pub use sweep::{sweep, SelectBy, Spacing, SweepGrid, SweepMethod, SweepRow, SweepTable};

use crate::calibration::{CalibrationError, FitObjective};
use crate::coco::{check_detection_images, CocoError};
use crate::metrics::MetricError;
use crate::model::{Dataset, DetectionSet, ValidationError};
use crate::suppression::SuppressionError;
use crate::synth::SynthError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Input(#[from] CocoError),
    #[error("calibration fit failed: {0}")]
    Fit(#[from] CalibrationError),
    #[error(transparent)]
    Suppression(#[from] SuppressionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 validation, 3 fit, 4 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Validation(_) | HarnessError::Synth(SynthError::Config(_)) => 2,
            HarnessError::Input(e) if e.is_validation() => 2,
            HarnessError::Input(_) | HarnessError::Io(_) => 4,
            HarnessError::Fit(e) => calibration_exit_code(e),
            _ => 1,
        }
    }
}

/// Exit code for a calibration error: 4 for I/O, 2 for malformed models or
/// recipes, 3 for fit failures.
pub fn calibration_exit_code(e: &CalibrationError) -> i32 {
    match e {
        CalibrationError::Io(_) => 4,
        CalibrationError::Format(_) | CalibrationError::Recipe(_) | CalibrationError::ThetaLength { .. } => 2,
        _ => 3,
    }
}

/// Evaluation protocol shared by every pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    /// Detections kept per image on ingestion.
    pub cap_pre: usize,
    /// Detections kept per image for evaluation.
    pub cap_eval: usize,
    /// Apply `cap_pre` per (image, category) instead of per image.
    pub per_class_cap: bool,
    /// IoU threshold for calibration training labels.
    pub t_iou_fit: f64,
    /// IoU threshold for calibration metric labels.
    pub t_iou_metric: f64,
    pub bins: usize,
    /// Compute calibration metrics after the evaluation cap.
    pub calib_on_capped: bool,
    pub objective: FitObjective,
    pub max_iterations: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            cap_pre: 400,
            cap_eval: 100,
            per_class_cap: false,
            t_iou_fit: 0.5,
            t_iou_metric: 0.5,
            bins: 10,
            calib_on_capped: true,
            objective: FitObjective::Nll,
            max_iterations: 500,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<(), HarnessError> {
        for (name, t) in [("t_iou_fit", self.t_iou_fit), ("t_iou_metric", self.t_iou_metric)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(HarnessError::Config(format!("{name} {t} outside (0, 1]")));
            }
        }
        if self.cap_pre == 0 || self.cap_eval == 0 {
            return Err(HarnessError::Config("detection caps must be positive".into()));
        }
        if self.bins == 0 {
            return Err(HarnessError::Config("bin count must be positive".into()));
        }
        Ok(())
    }
}

/// Validated ground truth with its pre-capped detections.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub gt: Dataset,
    pub dets: DetectionSet,
}

impl Inputs {
    pub fn new(gt: Dataset, dets: DetectionSet, protocol: &Protocol) -> Result<Self, HarnessError> {
        protocol.validate()?;
        check_detection_images(&dets, &gt)?;
        let dets = if protocol.per_class_cap {
            dets.apply_cap_per_class(protocol.cap_pre)
        } else {
            dets.apply_cap(protocol.cap_pre)
        };
        Ok(Self { gt, dets })
    }

    pub fn load(gt: &std::path::Path, dets: &std::path::Path, protocol: &Protocol) -> Result<Self, HarnessError> {
        let gt = crate::coco::load_dataset(gt)?;
        let dets = crate::coco::load_detections(dets)?;
        Self::new(gt, dets, protocol)
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
