use std::collections::HashMap;

use crate::eval::{Label, MatchResult};
use crate::geometry::{jaccard_summaries, JaccardSummary};
use crate::model::{Detection, DetectionSet};

use super::{calibrate_score, CalibrationError, CalibrationModel, FeatureRecipe, LabeledSample, VariateValues};

/// Variate values for the rank-sorted detections of one image.
pub fn image_variates(dets: &[Detection], recipe: &FeatureRecipe) -> Result<Vec<VariateValues>, CalibrationError> {
    let summaries = if recipe.uses_geometry() {
        jaccard_summaries(dets, recipe.class_agnostic)?
    } else {
        vec![JaccardSummary::ISOLATED; dets.len()]
    };
    Ok(dets.iter().zip(&summaries).map(|(d, s)| VariateValues::from_detection(d.score, s)).collect())
}

/// Replaces every confidence with the calibrated, overlap-conditioned one.
/// Nothing is removed; boxes, categories and ids are kept.
pub fn iou_aware_calibrate(ds: &DetectionSet, model: &CalibrationModel) -> Result<DetectionSet, CalibrationError> {
    model.recipe.validate()?;
    ds.try_map_images(|_, dets| {
        let values = image_variates(dets, &model.recipe)?;
        dets.iter()
            .zip(&values)
            .map(|(d, v)| Ok(Detection { score: calibrate_score(model, v)?, ..d.clone() }))
            .collect()
    })
}

/// Training samples from matched detections; crowd-ignored ones are left out.
pub fn labeled_samples(
    ds: &DetectionSet,
    matches: &MatchResult,
    recipe: &FeatureRecipe,
) -> Result<Vec<LabeledSample>, CalibrationError> {
    let labels: HashMap<_, _> = matches.label_index();
    let mut out = Vec::with_capacity(ds.len());
    for (_, dets) in ds.groups() {
        let values = image_variates(dets, recipe)?;
        for (d, v) in dets.iter().zip(&values) {
            let tp = match labels.get(&d.id) {
                Some(Label::Tp) => true,
                Some(Label::Fp) | None => false,
                Some(Label::Ignored) => continue,
            };
            out.push(LabeledSample { values: recipe.raw_values(v)?, tp });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{Family, Variate};
    use crate::model::BBox;

    fn det(id: u64, cat: u64, bbox: [f64; 4], score: f64) -> Detection {
        Detection {
            id,
            image_id: 1,
            category_id: cat,
            bbox: BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).unwrap(),
            score,
        }
    }

    #[test]
    fn identity_model_leaves_isolated_scores() {
        let ds = DetectionSet::new(vec![det(1, 1, [0.0, 0.0, 5.0, 5.0], 0.7), det(2, 2, [0.0, 0.0, 5.0, 5.0], 0.4)])
            .unwrap();
        let model = CalibrationModel::identity(FeatureRecipe::default()).unwrap();
        let out = iou_aware_calibrate(&ds, &model).unwrap();
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        assert!((scores[0] - 0.7).abs() < 1e-12 && (scores[1] - 0.4).abs() < 1e-12);
        assert!(iou_aware_calibrate(&DetectionSet::default(), &model).unwrap().is_empty());
    }

    #[test]
    fn overlap_weight_lowers_duplicate() {
        let ds = DetectionSet::new(vec![det(1, 1, [0.0, 0.0, 10.0, 10.0], 0.9), det(2, 1, [0.0, 0.0, 10.0, 9.0], 0.8)])
            .unwrap();
        let recipe = FeatureRecipe::new(Family::Beta, vec![Variate::Confidence, Variate::JMinSuppressing], false);
        // weight on ln(j_min) pulls overlapped detections down
        let model = CalibrationModel::new(recipe, vec![0.0, 1.0, 1.0, 3.0, 0.0]).unwrap();
        let out = iou_aware_calibrate(&ds, &model).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out.iter().find(|d| d.id == 1).unwrap().score - 0.9).abs() < 1e-5);
        assert!(out.iter().find(|d| d.id == 2).unwrap().score < 0.1);
    }
}
