//! Parametric confidence calibration (logistic and Beta families, uni- and
//! multivariate) and the IoU-aware pipeline that conditions confidence on
//! overlap statistics instead of suppressing duplicates.
//!
//! Every map has the form `sigmoid(bias + w . features(values))`, where
//! the features are `logit(v)` (logistic) or `(ln v, -ln(1 - v))` (Beta)
//! per variate, plus pairwise products for dependent recipes. With Beta
//! features on confidence alone and `(a, b, c)` as weights and bias this is
//! `1 / (1 + 1 / (e^c * s^a / (1 - s)^b))`.

mod apply;
mod fit;
mod recipe;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use apply::{image_variates, iou_aware_calibrate, labeled_samples};
pub use fit::{fit, Design, FitObjective, FitOptions};
pub use recipe::{featurize, Family, FeatureRecipe, Variate, VariateValues, DEFAULT_EPSILON_CLIP};

use crate::geometry::GeometryError;

pub const MODEL_FORMAT: &str = "ioucal-calibration-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("invalid recipe: {0}")]
    Recipe(String),
    #[error("variate `{0}` missing from detection features")]
    MissingVariate(Variate),
    #[error("variate `{0}` has value {1} outside [0, 1]")]
    VariateRange(Variate, f64),
    #[error("parameter vector has length {got}, recipe needs {expected}")]
    ThetaLength { expected: usize, got: usize },
    #[error("need at least {needed} samples to fit, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("all {0} samples carry the same label; cannot fit")]
    SingleClass(usize),
    #[error("sample {index} has {got} values, recipe has {expected} variates")]
    SampleShape { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model document: {0}")]
    Format(String),
}

/// One supervision example: raw variate values in recipe order and the
/// TP label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub values: Vec<f64>,
    pub tp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub iterations: usize,
    pub objective: FitObjective,
    pub objective_value: f64,
    pub gradient_inf_norm: f64,
    pub converged: bool,
    pub sample_count: usize,
    pub positive_count: usize,
    pub t_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub recipe: FeatureRecipe,
    pub theta: Vec<f64>,
    pub fit_meta: Option<FitMeta>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl CalibrationModel {
    pub fn new(recipe: FeatureRecipe, theta: Vec<f64>) -> Result<Self, CalibrationError> {
        recipe.validate()?;
        if theta.len() != recipe.theta_len() {
            return Err(CalibrationError::ThetaLength { expected: recipe.theta_len(), got: theta.len() });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(CalibrationError::Format("non-finite parameter".into()));
        }
        Ok(Self { recipe, theta, fit_meta: None })
    }

    pub fn identity(recipe: FeatureRecipe) -> Result<Self, CalibrationError> {
        recipe.validate()?;
        let theta = recipe.identity_theta();
        Self::new(recipe, theta)
    }

    /// Score from an already computed feature vector (no bias entry).
    pub fn score_features(&self, features: &[f64]) -> f64 {
        let z = self.theta[0] + self.theta[1..].iter().zip(features).map(|(w, f)| w * f).sum::<f64>();
        sigmoid(z)
    }

    /// Whether the last fit stopped before meeting the gradient tolerance.
    pub fn fit_warning(&self) -> bool {
        self.fit_meta.as_ref().is_some_and(|m| !m.converged)
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDocument {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            recipe: self.recipe.clone(),
            theta: self.theta.clone(),
            fit_meta: self.fit_meta.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CalibrationError::Format(e.to_string()))?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(MODEL_FORMAT) => {}
            other => return Err(CalibrationError::Format(format!("unexpected format tag {other:?}"))),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            Some(v) => return Err(CalibrationError::Format(format!("unsupported model version {v}"))),
            None => return Err(CalibrationError::Format("missing model version".into())),
        }
        let doc: ModelDocument = serde_json::from_value(value).map_err(|e| CalibrationError::Format(e.to_string()))?;
        let mut model = Self::new(doc.recipe, doc.theta)?;
        model.fit_meta = doc.fit_meta;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    version: u32,
    recipe: FeatureRecipe,
    theta: Vec<f64>,
    fit_meta: Option<FitMeta>,
}

/// Calibrated confidence for one detection's variate values.
pub fn calibrate_score(model: &CalibrationModel, values: &VariateValues) -> Result<f64, CalibrationError> {
    let features = featurize(values, &model.recipe)?;
    Ok(model.score_features(&features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn conf(v: f64) -> VariateValues {
        VariateValues::new().with(Variate::Confidence, v)
    }

    #[test]
    fn beta_identity() {
        let m = CalibrationModel::identity(FeatureRecipe::univariate(Family::Beta)).unwrap();
        assert_eq!(m.theta, vec![0.0, 1.0, 1.0]);
        assert_abs_diff_eq!(calibrate_score(&m, &conf(0.37)).unwrap(), 0.37, epsilon = 1e-12);
    }

    #[test]
    fn beta_closed_form() {
        let m = CalibrationModel::new(FeatureRecipe::univariate(Family::Beta), vec![0.0, 2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(calibrate_score(&m, &conf(0.5)).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        // e^c s^a / (1-s)^b at c=0.3, a=1.7, b=0.6, s=0.2
        let m = CalibrationModel::new(FeatureRecipe::univariate(Family::Beta), vec![0.3, 1.7, 0.6]).unwrap();
        let odds = 0.3f64.exp() * 0.2f64.powf(1.7) / 0.8f64.powf(0.6);
        let expect = 1.0 / (1.0 + 1.0 / odds);
        assert_abs_diff_eq!(calibrate_score(&m, &conf(0.2)).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn logistic_identity() {
        let m = CalibrationModel::identity(FeatureRecipe::univariate(Family::Logistic)).unwrap();
        assert_abs_diff_eq!(calibrate_score(&m, &conf(0.8)).unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn bivariate_identity_ignores_overlap() {
        let m = CalibrationModel::identity(FeatureRecipe::default()).unwrap();
        for j in [0.0, 0.3, 1.0] {
            let v = conf(0.61).with(Variate::JMinSuppressing, j);
            assert_abs_diff_eq!(calibrate_score(&m, &v).unwrap(), 0.61, epsilon = 1e-12);
        }
    }

    #[test]
    fn wrong_theta_length_rejected() {
        assert!(matches!(
            CalibrationModel::new(FeatureRecipe::default(), vec![0.0; 3]),
            Err(CalibrationError::ThetaLength { expected: 9, got: 3 })
        ));
    }

    #[test]
    fn document_round_trip_and_version_check() {
        let m = CalibrationModel::new(FeatureRecipe::univariate(Family::Beta), vec![0.1, 0.2, 0.3]).unwrap();
        let text = m.to_json();
        assert_eq!(CalibrationModel::from_json(&text).unwrap(), m);
        let bumped = text.replace("\"version\": 1", "\"version\": 99");
        let err = CalibrationModel::from_json(&bumped).unwrap_err();
        assert!(err.to_string().contains("unsupported model version 99"));
    }
}
