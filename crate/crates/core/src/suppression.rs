//! Greedy and Gaussian soft non-maximum suppression baselines.
//!
//! [`suppress`] is the literal iterative procedure; [`suppress_matrix`]
//! is a separately written batch path over a precomputed IoU matrix and
//! score vector. The two are checked against each other in tests.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, pairwise_iou_matrix};
use crate::model::{rank_order, Detection, DetectionSet};

pub const DEFAULT_SOFT_SCORE_FLOOR: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuppressionKind {
    Hard { t_nms: f64 },
    SoftGaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressionConfig {
    #[serde(flatten)]
    pub kind: SuppressionKind,
    pub score_floor: f64,
    pub class_agnostic: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SuppressionError {
    #[error("invalid suppression config: {0}")]
    Config(String),
    #[error("detections span more than one image")]
    MixedImages,
}

impl SuppressionConfig {
    pub fn hard(t_nms: f64) -> Self {
        Self { kind: SuppressionKind::Hard { t_nms }, score_floor: 0.0, class_agnostic: false }
    }

    pub fn soft(sigma: f64) -> Self {
        Self {
            kind: SuppressionKind::SoftGaussian { sigma },
            score_floor: DEFAULT_SOFT_SCORE_FLOOR,
            class_agnostic: false,
        }
    }

    pub fn with_floor(mut self, score_floor: f64) -> Self {
        self.score_floor = score_floor;
        self
    }

    pub fn validate(&self) -> Result<(), SuppressionError> {
        match self.kind {
            SuppressionKind::Hard { t_nms } if !(0.0..=1.0).contains(&t_nms) => {
                return Err(SuppressionError::Config(format!("t_nms {t_nms} outside [0, 1]")))
            }
            SuppressionKind::SoftGaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                return Err(SuppressionError::Config(format!("sigma {sigma} must be positive")))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(SuppressionError::Config(format!("score_floor {} outside [0, 1)", self.score_floor)));
        }
        Ok(())
    }

    /// Multiplicative discount applied to a detection overlapping a kept one.
    pub fn discount(&self, overlap: f64) -> f64 {
        match self.kind {
            SuppressionKind::Hard { t_nms } => {
                if overlap >= t_nms {
                    0.0
                } else {
                    1.0
                }
            }
            SuppressionKind::SoftGaussian { sigma } => (-(overlap * overlap) / sigma).exp(),
        }
    }
}

fn check_single_image(dets: &[Detection]) -> Result<(), SuppressionError> {
    if dets.windows(2).any(|w| w[0].image_id != w[1].image_id) {
        Err(SuppressionError::MixedImages)
    } else {
        Ok(())
    }
}

/// Runs suppression on the detections of one image.
///
/// Repeatedly takes the highest running confidence, keeps it, and
/// discounts every remaining same-class detection by the configured rule.
/// Detections whose running confidence is at or below the floor drop out.
/// Output is in rank order of the final confidences.
pub fn suppress(dets: &[Detection], cfg: &SuppressionConfig) -> Result<Vec<Detection>, SuppressionError> {
    cfg.validate()?;
    check_single_image(dets)?;
    let mut remaining: Vec<Detection> = dets.iter().filter(|d| d.score > cfg.score_floor).cloned().collect();
    let mut kept = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let best = (0..remaining.len()).min_by(|&a, &b| rank_order(&remaining[a], &remaining[b])).expect("non-empty");
        let top = remaining.swap_remove(best);
        for d in remaining.iter_mut() {
            if cfg.class_agnostic || d.category_id == top.category_id {
                d.score *= cfg.discount(iou(&top.bbox, &d.bbox));
            }
        }
        remaining.retain(|d| d.score > cfg.score_floor);
        kept.push(top);
    }
    kept.sort_by(rank_order);
    Ok(kept)
}

/// Batch variant of [`suppress`]: one IoU matrix, a score vector and an
/// alive mask; each step multiplies the selected row's discount into the
/// score vector.
pub fn suppress_matrix(dets: &[Detection], cfg: &SuppressionConfig) -> Result<Vec<Detection>, SuppressionError> {
    cfg.validate()?;
    check_single_image(dets)?;
    let n = dets.len();
    let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
    let overlaps = pairwise_iou_matrix(&boxes);
    let mut scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut alive: Vec<bool> = scores.iter().map(|&s| s > cfg.score_floor).collect();
    let mut final_scores = vec![None; n];

    let pick = |scores: &[f64], alive: &[bool]| -> Option<usize> {
        (0..n).filter(|&i| alive[i]).min_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(dets[a].id.cmp(&dets[b].id)))
    };
    while let Some(i) = pick(&scores, &alive) {
        alive[i] = false;
        final_scores[i] = Some(scores[i]);
        let row = overlaps.row(i);
        for k in 0..n {
            if alive[k] && (cfg.class_agnostic || dets[k].category_id == dets[i].category_id) {
                scores[k] *= cfg.discount(row[k]);
                if scores[k] <= cfg.score_floor {
                    alive[k] = false;
                }
            }
        }
    }
    let mut out: Vec<Detection> =
        dets.iter().zip(final_scores).filter_map(|(d, s)| s.map(|score| Detection { score, ..d.clone() })).collect();
    out.sort_by(rank_order);
    Ok(out)
}

/// Applies [`suppress`] to every image of a set.
pub fn suppress_set(ds: &DetectionSet, cfg: &SuppressionConfig) -> Result<DetectionSet, SuppressionError> {
    cfg.validate()?;
    ds.try_map_images(|_, dets| suppress(dets, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BBox;
    use approx::assert_abs_diff_eq;

    fn det(id: u64, bbox: [f64; 4], score: f64) -> Detection {
        Detection {
            id,
            image_id: 1,
            category_id: 1,
            bbox: BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]).unwrap(),
            score,
        }
    }

    // 1-pixel strips: IoU(1,2) = 6/10, IoU(1,3) = 8/40, IoU(2,3) = 4/40
    fn traced_fixture() -> Vec<Detection> {
        vec![det(1, [0.0, 0.0, 10.0, 1.0], 0.9), det(2, [0.0, 0.0, 6.0, 1.0], 0.8), det(3, [2.0, 0.0, 40.0, 1.0], 0.7)]
    }

    #[test]
    fn hard_nms_hand_trace() {
        let dets = traced_fixture();
        assert_abs_diff_eq!(iou(&dets[0].bbox, &dets[1].bbox), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(iou(&dets[0].bbox, &dets[2].bbox), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(iou(&dets[1].bbox, &dets[2].bbox), 0.1, epsilon = 1e-12);
        let out = suppress(&dets, &SuppressionConfig::hard(0.5)).unwrap();
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7]);
    }

    #[test]
    fn boundary_iou_suppresses() {
        let dets = traced_fixture();
        let out = suppress(&dets, &SuppressionConfig::hard(0.6)).unwrap();
        assert!(out.iter().all(|d| d.id != 2));
    }

    #[test]
    fn single_detection_unchanged() {
        let d = vec![det(4, [1.0, 2.0, 3.0, 4.0], 0.42)];
        for cfg in [SuppressionConfig::hard(0.3), SuppressionConfig::soft(0.01)] {
            assert_eq!(suppress(&d, &cfg).unwrap(), d);
        }
    }

    #[test]
    fn soft_gaussian_discount() {
        // [0,0,10,10] and [0,0,10,5]: IoU 0.5
        let dets = vec![det(1, [0.0, 0.0, 10.0, 10.0], 0.95), det(2, [0.0, 0.0, 10.0, 5.0], 0.9)];
        let out = suppress(&dets, &SuppressionConfig::soft(0.2)).unwrap();
        assert_abs_diff_eq!(out[1].score, 0.9 * (-0.25f64 / 0.2).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(out[1].score, 0.257854, epsilon = 1e-6);
    }

    #[test]
    fn soft_discounts_compound() {
        let dets = vec![
            det(1, [0.0, 0.0, 10.0, 10.0], 0.95),
            det(2, [0.0, 0.0, 10.0, 5.0], 0.94),
            det(3, [0.0, 0.0, 10.0, 5.0], 0.9),
        ];
        let cfg = SuppressionConfig::soft(0.5).with_floor(0.0);
        let out = suppress(&dets, &cfg).unwrap();
        let d3 = out.iter().find(|d| d.id == 3).unwrap();
        let f = (-0.25f64 / 0.5).exp();
        // kept 1 discounts 2 and 3 at IoU 0.5; 2 still outranks 3 and discounts it at IoU 1
        assert_abs_diff_eq!(d3.score, 0.9 * f * (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn other_classes_untouched() {
        let mut dets = traced_fixture();
        dets[1].category_id = 9;
        let out = suppress(&dets, &SuppressionConfig::hard(0.5)).unwrap();
        assert_eq!(out.len(), 3);
        let mut agnostic = SuppressionConfig::hard(0.5);
        agnostic.class_agnostic = true;
        assert_eq!(suppress(&dets, &agnostic).unwrap().len(), 2);
    }

    #[test]
    fn mixed_images_rejected() {
        let mut dets = traced_fixture();
        dets[2].image_id = 2;
        assert_eq!(suppress(&dets, &SuppressionConfig::hard(0.5)), Err(SuppressionError::MixedImages));
    }

    #[test]
    fn config_validation() {
        assert!(SuppressionConfig::hard(1.5).validate().is_err());
        assert!(SuppressionConfig::soft(0.0).validate().is_err());
        assert!(SuppressionConfig::soft(0.1).with_floor(1.0).validate().is_err());
        assert!(SuppressionConfig::hard(1.0).validate().is_ok());
    }

    #[test]
    fn matrix_path_matches_on_fixture() {
        let dets = traced_fixture();
        for cfg in [SuppressionConfig::hard(0.5), SuppressionConfig::soft(0.2)] {
            assert_eq!(suppress(&dets, &cfg).unwrap(), suppress_matrix(&dets, &cfg).unwrap());
        }
    }
}
