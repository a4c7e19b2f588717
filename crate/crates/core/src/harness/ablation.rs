use super::pipeline::{run_pipeline, Pipeline, PipelineParams};
use super::report::ReportEntry;
use super::{HarnessError, Inputs, Protocol, SplitPlan};
use crate::calibration::{Family, FeatureRecipe, Variate};

/// Recipes compared by the ablation: the four family/dependence variants on
/// (confidence, j_min_suppressing), confidence alone per family, each
/// overlap statistic alone with confidence, and j_min_suppressing combined
/// with every subset of the remaining statistics.
pub fn ablation_recipes() -> Vec<FeatureRecipe> {
    use Variate::*;
    let mut out: Vec<FeatureRecipe> = Vec::new();
    let mut add = |family: Family, variates: Vec<Variate>, dependent: bool| {
        let dependent = dependent && variates.len() > 1;
        let r = FeatureRecipe::new(family, variates, dependent);
        if !out.contains(&r) {
            out.push(r);
        }
    };
    for family in [Family::Logistic, Family::Beta] {
        add(family, vec![Confidence], false);
        for dependent in [false, true] {
            add(family, vec![Confidence, JMinSuppressing], dependent);
        }
    }
    for v in [JProdSuppressing, JMinSuppressed, JProdSuppressed] {
        add(Family::Beta, vec![Confidence, v], true);
    }
    let others = [JProdSuppressing, JMinSuppressed, JProdSuppressed];
    for mask in 1u32..(1 << others.len()) {
        let mut vs = vec![Confidence, JMinSuppressing];
        vs.extend(others.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, v)| *v));
        add(Family::Beta, vs, true);
    }
    out
}

/// Runs the IoU-aware pipeline once per recipe.
pub fn ablation_suite(
    inputs: &Inputs,
    recipes: &[FeatureRecipe],
    base: &PipelineParams,
    plan: &SplitPlan,
    protocol: &Protocol,
) -> Result<Vec<ReportEntry>, HarnessError> {
    recipes
        .iter()
        .map(|recipe| {
            let params = PipelineParams { recipe: recipe.clone(), ..base.clone() };
            run_pipeline(inputs, Pipeline::IouAware, &params, plan, protocol)
        })
        .collect()
}
