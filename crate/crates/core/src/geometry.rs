//! IoU and Jaccard-distance kernels.
//!
//! The per-detection summaries are computed from the full pairwise
//! distance matrix with entries outside the aggregation set replaced by
//! 1.0 (the neutral element of both min and product), so an empty set
//! yields 1.0 for both statistics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::{is_rank_sorted, BBox, Detection};

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection over the area of `det`; COCO's overlap measure for crowd regions.
pub fn intersection_over_first(det: &BBox, region: &BBox) -> f64 {
    let iw = det.x2.min(region.x2) - det.x1.max(region.x1);
    let ih = det.y2.min(region.y2) - det.y1.max(region.y1);
    let area = det.area();
    if iw <= 0.0 || ih <= 0.0 || area <= 0.0 {
        0.0
    } else {
        (iw * ih / area).clamp(0.0, 1.0)
    }
}

pub fn pairwise_iou_matrix(boxes: &[BBox]) -> Array2<f64> {
    let n = boxes.len();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        m[[i, i]] = iou(&boxes[i], &boxes[i]);
        for k in (i + 1)..n {
            let v = iou(&boxes[i], &boxes[k]);
            m[[i, k]] = v;
            m[[k, i]] = v;
        }
    }
    m
}

/// Entry `(i, k)` is `1 - iou(box_i, box_k)`.
pub fn pairwise_jaccard_matrix(boxes: &[BBox]) -> Array2<f64> {
    pairwise_iou_matrix(boxes).mapv(|v| 1.0 - v)
}

/// Overlap statistics of one detection against the more confident
/// (suppressing) and less confident (suppressed) detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JaccardSummary {
    pub j_min_suppressing: f64,
    pub j_prod_suppressing: f64,
    pub j_min_suppressed: f64,
    pub j_prod_suppressed: f64,
}

impl JaccardSummary {
    pub const ISOLATED: JaccardSummary = JaccardSummary {
        j_min_suppressing: 1.0,
        j_prod_suppressing: 1.0,
        j_min_suppressed: 1.0,
        j_prod_suppressed: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    #[error("detections are not in rank order (descending confidence, ascending id)")]
    Unsorted,
    #[error("detections span more than one image")]
    MixedImages,
}

/// Summary statistics for every detection of one image.
///
/// `dets` must be in rank order. Unless `class_agnostic`, only detections
/// of the same category take part.
pub fn jaccard_summaries(dets: &[Detection], class_agnostic: bool) -> Result<Vec<JaccardSummary>, GeometryError> {
    if !is_rank_sorted(dets) {
        return Err(GeometryError::Unsorted);
    }
    if dets.windows(2).any(|w| w[0].image_id != w[1].image_id) {
        return Err(GeometryError::MixedImages);
    }
    let n = dets.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let jaccard = pairwise_jaccard_matrix(&boxes);
    let related = Array2::from_shape_fn((n, n), |(i, k)| class_agnostic || dets[i].category_id == dets[k].category_id);
    // Rank order makes "more confident" the strict lower triangle.
    let suppressing =
        Array2::from_shape_fn((n, n), |(i, k)| if k < i && related[[i, k]] { jaccard[[i, k]] } else { 1.0 });
    let suppressed =
        Array2::from_shape_fn((n, n), |(i, k)| if k > i && related[[i, k]] { jaccard[[i, k]] } else { 1.0 });
    let row_min = |m: &Array2<f64>, i: usize| m.row(i).iter().copied().fold(1.0, f64::min);
    let row_prod = |m: &Array2<f64>, i: usize| m.row(i).iter().product::<f64>();
    Ok((0..n)
        .map(|i| JaccardSummary {
            j_min_suppressing: row_min(&suppressing, i),
            j_prod_suppressing: row_prod(&suppressing, i),
            j_min_suppressed: row_min(&suppressed, i),
            j_prod_suppressed: row_prod(&suppressed, i),
        })
        .collect())
}
