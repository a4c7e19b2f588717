//! Maximum-likelihood fitting of calibration parameters.
//!
//! The map is a logistic regression on fixed features, so the NLL is convex
//! in the parameters. We minimize it with damped Newton steps and an Armijo
//! backtracking line search; every reduction runs sequentially in sample
//! order so identical inputs give bitwise identical parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{sigmoid, CalibrationError, CalibrationModel, FeatureRecipe, FitMeta, LabeledSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitObjective {
    #[default]
    Nll,
    Brier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub objective: FitObjective,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub min_samples: usize,
    /// Starting parameters; the recipe's identity parameters when `None`.
    pub init: Option<Vec<f64>>,
    /// Recorded in the fit metadata; the IoU threshold the labels came from.
    pub t_iou: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            objective: FitObjective::Nll,
            max_iterations: 500,
            gradient_tolerance: 1e-7,
            min_samples: 100,
            init: None,
            t_iou: 0.5,
        }
    }
}

/// Design matrix with a leading bias column, plus 0/1 targets.
#[derive(Debug, Clone)]
pub struct Design {
    dim: usize,
    rows: Vec<f64>,
    targets: Vec<f64>,
    objective: FitObjective,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Design {
    pub fn new(
        samples: &[LabeledSample],
        recipe: &FeatureRecipe,
        objective: FitObjective,
    ) -> Result<Self, CalibrationError> {
        recipe.validate()?;
        let dim = recipe.theta_len();
        let mut rows = Vec::with_capacity(samples.len() * dim);
        let mut targets = Vec::with_capacity(samples.len());
        let mut clipped = Vec::with_capacity(recipe.variates.len());
        let mut features = Vec::with_capacity(dim);
        for (index, s) in samples.iter().enumerate() {
            if s.values.len() != recipe.variates.len() {
                return Err(CalibrationError::SampleShape {
                    index,
                    expected: recipe.variates.len(),
                    got: s.values.len(),
                });
            }
            clipped.clear();
            for (&v, &variate) in s.values.iter().zip(&recipe.variates) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(CalibrationError::VariateRange(variate, v));
                }
                clipped.push(recipe.clip(v));
            }
            recipe.features_from_clipped(&clipped, &mut features);
            rows.push(1.0);
            rows.extend_from_slice(&features);
            targets.push(if s.tp { 1.0 } else { 0.0 });
        }
        Ok(Self { dim, rows, targets, objective })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    fn linear(&self, theta: &[f64], i: usize) -> f64 {
        self.row(i).iter().zip(theta).map(|(x, t)| x * t).sum()
    }

    /// Mean loss at `theta`.
    pub fn value(&self, theta: &[f64]) -> f64 {
        let n = self.len() as f64;
        let mut total = 0.0;
        for i in 0..self.len() {
            let z = self.linear(theta, i);
            let y = self.targets[i];
            total += match self.objective {
                FitObjective::Nll => y * softplus(-z) + (1.0 - y) * softplus(z),
                FitObjective::Brier => {
                    let d = y - sigmoid(z);
                    d * d
                }
            };
        }
        total / n
    }

    /// Analytic gradient of [`value`](Self::value).
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.derivatives(theta, false).0
    }

    /// Gradient and curvature matrix: the exact Hessian for NLL, the
    /// Gauss-Newton matrix for Brier.
    fn derivatives(&self, theta: &[f64], with_curvature: bool) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let n = self.len() as f64;
        let mut grad = vec![0.0; d];
        let mut curv = if with_curvature { vec![0.0; d * d] } else { Vec::new() };
        for i in 0..self.len() {
            let x = self.row(i);
            let p = sigmoid(self.linear(theta, i));
            let y = self.targets[i];
            let (r, w) = match self.objective {
                FitObjective::Nll => (p - y, p * (1.0 - p)),
                FitObjective::Brier => {
                    let s = p * (1.0 - p);
                    (2.0 * (p - y) * s, 2.0 * s * s)
                }
            };
            for (g, xk) in grad.iter_mut().zip(x) {
                *g += r * xk;
            }
            if with_curvature {
                for a in 0..d {
                    let wa = w * x[a];
                    let row = &mut curv[a * d..];
                    for b in a..d {
                        row[b] += wa * x[b];
                    }
                }
            }
        }
        for g in &mut grad {
            *g /= n;
        }
        if with_curvature {
            for a in 0..d {
                for b in a..d {
                    let v = curv[a * d + b] / n;
                    curv[a * d + b] = v;
                    curv[b * d + a] = v;
                }
            }
        }
        (grad, curv)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `(H + damping I) step = -g`; `None` if not positive definite.
fn newton_step(curv: &[f64], grad: &[f64], damping: f64) -> Option<Vec<f64>> {
    let d = grad.len();
    let mut h = DMatrix::from_row_slice(d, d, curv);
    for i in 0..d {
        h[(i, i)] += damping;
    }
    let chol = h.cholesky()?;
    let step = chol.solve(&DVector::from_iterator(d, grad.iter().map(|g| -g)));
    step.iter().all(|v| v.is_finite()).then(|| step.iter().copied().collect())
}

/// Minimizes the mean objective over the design from `init`.
pub(crate) fn minimize(design: &Design, init: Vec<f64>, opts: &FitOptions) -> (Vec<f64>, usize, bool) {
    let mut theta = init;
    let mut value = design.value(&theta);
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let (grad, curv) = design.derivatives(&theta, true);
        if inf_norm(&grad) < opts.gradient_tolerance {
            return (theta, iterations, true);
        }
        iterations += 1;
        let scale = (0..design.dim()).map(|i| curv[i * design.dim() + i]).sum::<f64>() / design.dim() as f64;
        let mut damping = 0.0;
        let mut advanced = false;
        for _ in 0..30 {
            let Some(step) = newton_step(&curv, &grad, damping) else {
                damping = if damping == 0.0 { 1e-10 * scale.max(1e-12) } else { damping * 10.0 };
                continue;
            };
            let slope: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
            if slope >= 0.0 {
                damping = if damping == 0.0 { 1e-10 * scale.max(1e-12) } else { damping * 10.0 };
                continue;
            }
            let mut t = 1.0;
            while t > 1e-10 {
                let trial: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a + t * s).collect();
                let trial_value = design.value(&trial);
                if trial_value <= value + 1e-4 * t * slope {
                    theta = trial;
                    value = trial_value;
                    advanced = true;
                    break;
                }
                t *= 0.5;
            }
            if advanced {
                break;
            }
            damping = if damping == 0.0 { 1e-10 * scale.max(1e-12) } else { damping * 10.0 };
        }
        if !advanced {
            // no descent direction makes progress at machine precision
            let converged = inf_norm(&design.gradient(&theta)) < opts.gradient_tolerance;
            return (theta, iterations, converged);
        }
    }
    let converged = inf_norm(&design.gradient(&theta)) < opts.gradient_tolerance;
    (theta, iterations, converged)
}

/// Fits the recipe's parameters to labeled samples.
///
/// Fails when there are fewer than `opts.min_samples` samples or only one
/// label value. A fit that stops at the iteration cap is returned with
/// `converged = false` in its metadata.
pub fn fit(
    samples: &[LabeledSample],
    recipe: &FeatureRecipe,
    opts: &FitOptions,
) -> Result<CalibrationModel, CalibrationError> {
    recipe.validate()?;
    if samples.len() < opts.min_samples {
        return Err(CalibrationError::TooFewSamples { needed: opts.min_samples, got: samples.len() });
    }
    let positives = samples.iter().filter(|s| s.tp).count();
    if positives == 0 || positives == samples.len() {
        return Err(CalibrationError::SingleClass(samples.len()));
    }
    let design = Design::new(samples, recipe, opts.objective)?;
    let init = match &opts.init {
        Some(t) if t.len() != recipe.theta_len() => {
            return Err(CalibrationError::ThetaLength { expected: recipe.theta_len(), got: t.len() })
        }
        Some(t) => t.clone(),
        None => recipe.identity_theta(),
    };
    let (theta, iterations, converged) = minimize(&design, init, opts);
    let gradient_inf_norm = inf_norm(&design.gradient(&theta));
    if !converged {
        log::warn!(
            "calibration fit for {} stopped after {iterations} iterations (gradient {gradient_inf_norm:.3e})",
            recipe.label()
        );
    }
    let mut model = CalibrationModel::new(recipe.clone(), theta)?;
    model.fit_meta = Some(FitMeta {
        iterations,
        objective: opts.objective,
        objective_value: design.value(&model.theta),
        gradient_inf_norm,
        converged,
        sample_count: samples.len(),
        positive_count: positives,
        t_iou: opts.t_iou,
    });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{Family, Variate};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bernoulli_samples(n: usize, seed: u64, law: impl Fn(f64) -> f64) -> Vec<LabeledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s: f64 = rng.gen();
                let tp = rng.gen::<f64>() < law(s);
                LabeledSample { values: vec![s], tp }
            })
            .collect()
    }

    #[test]
    fn recovers_identity_on_calibrated_data() {
        let samples = bernoulli_samples(100_000, 11, |s| s);
        let m = fit(&samples, &FeatureRecipe::univariate(Family::Beta), &FitOptions::default()).unwrap();
        let [c, a, b] = [m.theta[0], m.theta[1], m.theta[2]];
        assert!((a - 1.0).abs() < 0.05 && (b - 1.0).abs() < 0.05 && c.abs() < 0.05, "{:?}", m.theta);
        assert!(m.fit_meta.unwrap().converged);
    }

    #[test]
    fn tracks_squared_law() {
        let samples = bernoulli_samples(100_000, 12, |s| s * s);
        let m = fit(&samples, &FeatureRecipe::univariate(Family::Beta), &FitOptions::default()).unwrap();
        for k in 1..10 {
            let s = k as f64 / 10.0;
            let v = crate::calibration::VariateValues::new().with(Variate::Confidence, s);
            let g = crate::calibration::calibrate_score(&m, &v).unwrap();
            assert!((g - s * s).abs() < 0.02, "s={s} g={g}");
        }
    }

    #[test]
    fn single_class_is_an_error() {
        let samples: Vec<_> = (0..200).map(|i| LabeledSample { values: vec![i as f64 / 200.0], tp: true }).collect();
        assert!(matches!(
            fit(&samples, &FeatureRecipe::univariate(Family::Beta), &FitOptions::default()),
            Err(CalibrationError::SingleClass(200))
        ));
    }

    #[test]
    fn too_few_samples() {
        let samples = bernoulli_samples(50, 1, |s| s);
        assert!(matches!(
            fit(&samples, &FeatureRecipe::univariate(Family::Beta), &FitOptions::default()),
            Err(CalibrationError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn deterministic_bits() {
        let samples = bernoulli_samples(5_000, 3, |s| s.powf(1.5));
        let recipe = FeatureRecipe::univariate(Family::Beta);
        let a = fit(&samples, &recipe, &FitOptions::default()).unwrap();
        let b = fit(&samples, &recipe, &FitOptions::default()).unwrap();
        let bits = |m: &CalibrationModel| m.theta.iter().map(|t| t.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn brier_objective_also_fits() {
        let samples = bernoulli_samples(20_000, 5, |s| s * s);
        let opts = FitOptions { objective: FitObjective::Brier, ..FitOptions::default() };
        let m = fit(&samples, &FeatureRecipe::univariate(Family::Beta), &opts).unwrap();
        let v = crate::calibration::VariateValues::new().with(Variate::Confidence, 0.5);
        let g = crate::calibration::calibrate_score(&m, &v).unwrap();
        assert_abs_diff_eq!(g, 0.25, epsilon = 0.03);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<_> =
            (0..300).map(|_| LabeledSample { values: vec![rng.gen(), rng.gen()], tp: rng.gen_bool(0.4) }).collect();
        let recipe = FeatureRecipe::default();
        for objective in [FitObjective::Nll, FitObjective::Brier] {
            let design = Design::new(&samples, &recipe, objective).unwrap();
            let theta: Vec<f64> = (0..design.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let g = design.gradient(&theta);
            for k in 0..theta.len() {
                let h = 1e-5;
                let mut up = theta.clone();
                up[k] += h;
                let mut down = theta.clone();
                down[k] -= h;
                let fd = (design.value(&up) - design.value(&down)) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(g[k].abs()).max(1e-6), "{objective:?} k={k}");
            }
        }
    }
}
