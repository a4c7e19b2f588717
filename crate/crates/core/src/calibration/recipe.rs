use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::JaccardSummary;

use super::CalibrationError;

pub const DEFAULT_EPSILON_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    Beta,
}

/// A conditioning variable of the calibration map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variate {
    Confidence,
    JMinSuppressing,
    JProdSuppressing,
    JMinSuppressed,
    JProdSuppressed,
}

impl Variate {
    pub const ALL: [Variate; 5] = [
        Variate::Confidence,
        Variate::JMinSuppressing,
        Variate::JProdSuppressing,
        Variate::JMinSuppressed,
        Variate::JProdSuppressed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variate::Confidence => "confidence",
            Variate::JMinSuppressing => "j_min_suppressing",
            Variate::JProdSuppressing => "j_prod_suppressing",
            Variate::JMinSuppressed => "j_min_suppressed",
            Variate::JProdSuppressed => "j_prod_suppressed",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Variate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variate::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| format!("unknown variate `{s}`"))
    }
}

/// Raw per-detection variate values, each in [0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VariateValues([Option<f64>; 5]);

impl VariateValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, v: Variate, value: f64) -> Self {
        self.0[v.index()] = Some(value);
        self
    }

    pub fn get(&self, v: Variate) -> Option<f64> {
        self.0[v.index()]
    }

    pub fn from_detection(confidence: f64, s: &JaccardSummary) -> Self {
        Self::new()
            .with(Variate::Confidence, confidence)
            .with(Variate::JMinSuppressing, s.j_min_suppressing)
            .with(Variate::JProdSuppressing, s.j_prod_suppressing)
            .with(Variate::JMinSuppressed, s.j_min_suppressed)
            .with(Variate::JProdSuppressed, s.j_prod_suppressed)
    }
}

/// Which variates feed the map, through which family, and whether
/// pairwise interaction terms are included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecipe {
    pub family: Family,
    pub variates: Vec<Variate>,
    pub dependent: bool,
    pub epsilon_clip: f64,
    /// Compute overlap statistics across categories.
    #[serde(default)]
    pub class_agnostic: bool,
}

impl Default for FeatureRecipe {
    fn default() -> Self {
        Self::new(Family::Beta, vec![Variate::Confidence, Variate::JMinSuppressing], true)
    }
}

impl FeatureRecipe {
    pub fn new(family: Family, variates: Vec<Variate>, dependent: bool) -> Self {
        Self { family, variates, dependent, epsilon_clip: DEFAULT_EPSILON_CLIP, class_agnostic: false }
    }

    pub fn univariate(family: Family) -> Self {
        Self::new(family, vec![Variate::Confidence], false)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !self.variates.contains(&Variate::Confidence) {
            return Err(CalibrationError::Recipe("confidence must be one of the variates".into()));
        }
        let mut sorted = self.variates.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.variates.len() {
            return Err(CalibrationError::Recipe("variates repeat".into()));
        }
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip <= 0.01) {
            return Err(CalibrationError::Recipe(format!("epsilon_clip {} outside (0, 0.01]", self.epsilon_clip)));
        }
        Ok(())
    }

    /// Whether the recipe needs overlap statistics at all.
    pub fn uses_geometry(&self) -> bool {
        self.variates.iter().any(|v| *v != Variate::Confidence)
    }

    fn per_variate(&self) -> usize {
        match self.family {
            Family::Logistic => 1,
            Family::Beta => 2,
        }
    }

    fn per_pair(&self) -> usize {
        match self.family {
            Family::Logistic => 1,
            Family::Beta => 4,
        }
    }

    pub fn pair_count(&self) -> usize {
        if self.dependent {
            let n = self.variates.len();
            n * (n - 1) / 2
        } else {
            0
        }
    }

    /// Length of the feature vector, excluding the bias.
    pub fn feature_len(&self) -> usize {
        self.variates.len() * self.per_variate() + self.pair_count() * self.per_pair()
    }

    /// Length of the parameter vector: bias first, then one weight per feature.
    pub fn theta_len(&self) -> usize {
        1 + self.feature_len()
    }

    /// Parameters that make the map the identity in confidence and ignore
    /// every other variate.
    pub fn identity_theta(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.theta_len()];
        let pos = self.variates.iter().position(|v| *v == Variate::Confidence).expect("validated");
        let k = self.per_variate();
        for w in &mut theta[1 + pos * k..1 + (pos + 1) * k] {
            *w = 1.0;
        }
        theta
    }

    /// Short human label, e.g. `beta-dep[confidence,j_min_suppressing]`.
    pub fn label(&self) -> String {
        let fam = match self.family {
            Family::Logistic => "logistic",
            Family::Beta => "beta",
        };
        let dep = if self.dependent && self.variates.len() > 1 { "dep" } else { "ind" };
        let names: Vec<&str> = self.variates.iter().map(|v| v.name()).collect();
        format!("{fam}-{dep}[{}]", names.join(","))
    }

    /// Extracts the raw values in recipe order, checking range.
    pub fn raw_values(&self, values: &VariateValues) -> Result<Vec<f64>, CalibrationError> {
        self.variates
            .iter()
            .map(|&v| match values.get(v) {
                None => Err(CalibrationError::MissingVariate(v)),
                Some(x) if !(0.0..=1.0).contains(&x) => Err(CalibrationError::VariateRange(v, x)),
                Some(x) => Ok(x),
            })
            .collect()
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.epsilon_clip, 1.0 - self.epsilon_clip)
    }

    /// Maps clipped raw values (recipe order) to the feature vector.
    pub fn features_from_clipped(&self, clipped: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let base_start = out.len();
        for &v in clipped {
            match self.family {
                Family::Logistic => out.push((v / (1.0 - v)).ln()),
                Family::Beta => {
                    out.push(v.ln());
                    out.push(-(1.0 - v).ln());
                }
            }
        }
        if self.dependent {
            let k = self.per_variate();
            let n = clipped.len();
            for a in 0..n {
                for b in (a + 1)..n {
                    let fa = base_start + a * k;
                    let fb = base_start + b * k;
                    for i in 0..k {
                        for j in 0..k {
                            let p = out[fa + i] * out[fb + j];
                            out.push(p);
                        }
                    }
                }
            }
        }
    }
}

/// Clips each raw variate value and maps it to the family's features,
/// appending pairwise interaction terms for dependent recipes.
pub fn featurize(values: &VariateValues, recipe: &FeatureRecipe) -> Result<Vec<f64>, CalibrationError> {
    recipe.validate()?;
    let clipped: Vec<f64> = recipe.raw_values(values)?.into_iter().map(|v| recipe.clip(v)).collect();
    let mut out = Vec::with_capacity(recipe.feature_len());
    recipe.features_from_clipped(&clipped, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn conf(v: f64) -> VariateValues {
        VariateValues::new().with(Variate::Confidence, v)
    }

    #[test]
    fn beta_features_at_half() {
        let f = featurize(&conf(0.5), &FeatureRecipe::univariate(Family::Beta)).unwrap();
        assert_abs_diff_eq!(f[0], -std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn logistic_feature_at_half_is_zero() {
        let f = featurize(&conf(0.5), &FeatureRecipe::univariate(Family::Logistic)).unwrap();
        assert_eq!(f, vec![0.0]);
    }

    #[test]
    fn one_is_clipped() {
        let recipe = FeatureRecipe::univariate(Family::Beta);
        let f = featurize(&conf(1.0), &recipe).unwrap();
        let v: f64 = 1.0 - 1e-6;
        assert_eq!(f, vec![v.ln(), -(1.0 - v).ln()]);
    }

    #[test]
    fn missing_and_out_of_range_variates() {
        let recipe = FeatureRecipe::default();
        assert!(matches!(
            featurize(&conf(0.5), &recipe),
            Err(CalibrationError::MissingVariate(Variate::JMinSuppressing))
        ));
        assert!(matches!(
            featurize(&conf(1.5), &FeatureRecipe::univariate(Family::Beta)),
            Err(CalibrationError::VariateRange(..))
        ));
    }

    #[test]
    fn dependent_beta_layout() {
        let recipe = FeatureRecipe::default();
        assert_eq!(recipe.theta_len(), 1 + 4 + 4);
        let values = conf(0.3).with(Variate::JMinSuppressing, 0.6);
        let f = featurize(&values, &recipe).unwrap();
        let (a1, a2) = (0.3f64.ln(), -(0.7f64).ln());
        let (b1, b2) = (0.6f64.ln(), -(0.4f64).ln());
        let expect = [a1, a2, b1, b2, a1 * b1, a1 * b2, a2 * b1, a2 * b2];
        for (x, y) in f.iter().zip(expect) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn theta_lengths() {
        let all = Variate::ALL.to_vec();
        assert_eq!(FeatureRecipe::new(Family::Beta, all.clone(), true).theta_len(), 1 + 10 + 40);
        assert_eq!(FeatureRecipe::new(Family::Beta, all.clone(), false).theta_len(), 11);
        assert_eq!(FeatureRecipe::new(Family::Logistic, all.clone(), true).theta_len(), 1 + 5 + 10);
        assert_eq!(FeatureRecipe::new(Family::Logistic, all, false).theta_len(), 6);
    }

    #[test]
    fn recipe_validation() {
        assert!(FeatureRecipe::new(Family::Beta, vec![Variate::JMinSuppressing], false).validate().is_err());
        let r = FeatureRecipe { epsilon_clip: 0.5, ..FeatureRecipe::default() };
        assert!(r.validate().is_err());
        let r = FeatureRecipe::new(Family::Beta, vec![Variate::Confidence, Variate::Confidence], false);
        assert!(r.validate().is_err());
    }
}
