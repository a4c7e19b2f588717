//! Synthetic detection worlds with controlled duplication and
//! miscalibration.
//!
//! Each ground-truth object yields one primary detection with raw
//! confidence `s = u^(1/skew)`, `u ~ U(0.001, 1)`. With probability `law(s)` the primary is
//! placed at an IoU in [0.52, 0.95] with its object, otherwise in
//! [0.10, 0.45], so at t_IoU = 0.5 the law is the primary's true
//! precision. Duplicates are same-size shifts of the primary at an IoU
//! drawn from the configured range. Spurious detections never touch a
//! ground-truth box.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    AnnotationId, BBox, Category, Dataset, Detection, DetectionId, DetectionSet, GroundTruthObject, ImageInfo,
};
use crate::rng::substream;

const GOOD_IOU: (f64, f64) = (0.52, 0.95);
const BAD_IOU: (f64, f64) = (0.10, 0.45);
const DUPLICATE_SCORE_RATIO: (f64, f64) = (0.6, 0.99);
const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ConfidenceLaw {
    Calibrated,
    OverconfidentPow { gamma: f64 },
    LogisticSkew { k: f64 },
}

impl ConfidenceLaw {
    /// Probability that a primary with raw confidence `s` is a true positive.
    pub fn precision(&self, s: f64) -> f64 {
        match *self {
            ConfidenceLaw::Calibrated => s,
            ConfidenceLaw::OverconfidentPow { gamma } => s.powf(gamma),
            ConfidenceLaw::LogisticSkew { k } => 1.0 / (1.0 + ((1.0 - s) / s).powf(k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub image_size: [f64; 2],
    pub objects_per_image: [usize; 2],
    pub categories: usize,
    pub duplicate_count: [usize; 2],
    pub duplicate_iou: [f64; 2],
    pub confidence_law: ConfidenceLaw,
    pub fp_rate: f64,
    pub box_scale: [f64; 2],
    pub randomize_duplicate_rank: bool,
    /// Primary confidences are `u^(1/skew)` with `u ~ U(0.001, 1)`; 1 is uniform.
    pub confidence_skew: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            images: 2000,
            image_size: [640.0, 480.0],
            objects_per_image: [1, 8],
            categories: 3,
            duplicate_count: [2, 4],
            duplicate_iou: [0.6, 0.9],
            confidence_law: ConfidenceLaw::OverconfidentPow { gamma: 2.0 },
            fp_rate: 0.5,
            box_scale: [24.0, 128.0],
            randomize_duplicate_rank: false,
            confidence_skew: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("infeasible synth config: {0}")]
    Infeasible(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.images == 0 {
            return bad("images must be positive".into());
        }
        if self.categories == 0 {
            return bad("categories must be positive".into());
        }
        let [w, h] = self.image_size;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return bad(format!("image_size {w}x{h} must be positive"));
        }
        if self.objects_per_image[0] > self.objects_per_image[1] {
            return bad("objects_per_image range is empty".into());
        }
        if self.duplicate_count[0] > self.duplicate_count[1] {
            return bad("duplicate_count range is empty".into());
        }
        let [lo, hi] = self.duplicate_iou;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("duplicate_iou [{lo}, {hi}] must be a non-empty range in (0, 1]"));
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return bad(format!("fp_rate {} must be non-negative", self.fp_rate));
        }
        let [smin, smax] = self.box_scale;
        if !(smin > 0.0 && smin <= smax) {
            return bad(format!("box_scale [{smin}, {smax}] must be a non-empty positive range"));
        }
        if !(self.confidence_skew > 0.0 && self.confidence_skew.is_finite()) {
            return bad(format!("confidence_skew {} must be positive", self.confidence_skew));
        }
        match self.confidence_law {
            ConfidenceLaw::OverconfidentPow { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                return bad(format!("gamma {gamma} must be non-negative"));
            }
            ConfidenceLaw::LogisticSkew { k } if !(k > 0.0 && k.is_finite()) => {
                return bad(format!("k {k} must be positive"));
            }
            _ => {}
        }
        // A same-size shift by up to one box side must fit on some side.
        if smax > w.min(h) / 3.0 {
            return Err(SynthError::Infeasible(format!(
                "box_scale max {smax} exceeds a third of the shorter image side {}; jittered boxes cannot reach the requested IoU inside the image",
                w.min(h)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Primary { gt: AnnotationId, good: bool },
    Duplicate { primary: DetectionId },
    Spurious,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub dataset: Dataset,
    pub detections: DetectionSet,
    /// Origin of every detection, indexed by detection id.
    pub origins: Vec<Origin>,
}

/// Same-size shift of `b` whose IoU with `b` is exactly `t` (up to rounding),
/// moving toward the side with more room.
fn jitter(rng: &mut ChaCha8Rng, b: &BBox, t: f64, size: [f64; 2]) -> BBox {
    let q = 2.0 * t / (1.0 + t);
    let alpha: f64 = rng.gen();
    let (w, h) = (b.width(), b.height());
    let dx = w * (1.0 - q.powf(alpha));
    let dy = h * (1.0 - q.powf(1.0 - alpha));
    let sx = if b.x1 > size[0] - b.x2 { -1.0 } else { 1.0 };
    let sy = if b.y1 > size[1] - b.y2 { -1.0 } else { 1.0 };
    BBox { x1: b.x1 + sx * dx, y1: b.y1 + sy * dy, x2: b.x2 + sx * dx, y2: b.y2 + sy * dy }
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

fn random_box(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> BBox {
    let [smin, smax] = cfg.box_scale;
    let w = rng.gen_range(smin..=smax);
    let h = rng.gen_range(smin..=smax);
    let x1 = rng.gen_range(0.0..=cfg.image_size[0] - w);
    let y1 = rng.gen_range(0.0..=cfg.image_size[1] - h);
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

fn place_disjoint(rng: &mut ChaCha8Rng, cfg: &SynthConfig, occupied: &[BBox]) -> Option<BBox> {
    (0..PLACEMENT_ATTEMPTS).map(|_| random_box(rng, cfg)).find(|b| occupied.iter().all(|o| !overlaps(b, o)))
}

/// Generates ground truth and a detector-like dump; deterministic in the seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthWorld, SynthError> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, "synth");
    let size = cfg.image_size;
    let categories: Vec<Category> =
        (1..=cfg.categories as u64).map(|id| Category { id, name: format!("class_{id}") }).collect();
    let mut images = Vec::with_capacity(cfg.images);
    let mut ground_truth = Vec::new();
    let mut detections: Vec<Detection> = Vec::new();
    let mut origins = Vec::new();
    let mut push = |dets: &mut Vec<Detection>, origin: Origin, d: Detection| {
        origins.push(origin);
        dets.push(d);
    };

    for image_id in 1..=cfg.images as u64 {
        images.push(ImageInfo { id: image_id, width: size[0], height: size[1] });
        let n_obj = rng.gen_range(cfg.objects_per_image[0]..=cfg.objects_per_image[1]);
        let mut boxes: Vec<BBox> = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let b = place_disjoint(&mut rng, cfg, &boxes).ok_or_else(|| {
                SynthError::Infeasible(format!("could not place {n_obj} disjoint objects in image {image_id}"))
            })?;
            boxes.push(b);
        }
        for b in &boxes {
            let gt_id = ground_truth.len() as AnnotationId + 1;
            let category_id = rng.gen_range(1..=cfg.categories as u64);
            ground_truth.push(GroundTruthObject { id: gt_id, image_id, category_id, bbox: *b, is_crowd: false });

            let s = rng.gen_range(0.001f64..1.0).powf(1.0 / cfg.confidence_skew);
            let good = rng.gen::<f64>() < cfg.confidence_law.precision(s);
            let range = if good { GOOD_IOU } else { BAD_IOU };
            let t = rng.gen_range(range.0..=range.1);
            let primary_box = jitter(&mut rng, b, t, size);
            let primary_id = detections.len() as DetectionId;
            push(
                &mut detections,
                Origin::Primary { gt: gt_id, good },
                Detection { id: primary_id, image_id, category_id, bbox: primary_box, score: s },
            );

            let n_dup = rng.gen_range(cfg.duplicate_count[0]..=cfg.duplicate_count[1]);
            for _ in 0..n_dup {
                let t = rng.gen_range(cfg.duplicate_iou[0]..=cfg.duplicate_iou[1]);
                let bbox = jitter(&mut rng, &primary_box, t, size);
                let score = if cfg.randomize_duplicate_rank {
                    rng.gen_range(0.001..1.0)
                } else {
                    s * rng.gen_range(DUPLICATE_SCORE_RATIO.0..DUPLICATE_SCORE_RATIO.1)
                };
                let id = detections.len() as DetectionId;
                push(
                    &mut detections,
                    Origin::Duplicate { primary: primary_id },
                    Detection { id, image_id, category_id, bbox, score },
                );
            }
        }

        let frac = cfg.fp_rate.fract();
        let n_fp = cfg.fp_rate.floor() as usize + usize::from(rng.gen::<f64>() < frac);
        for _ in 0..n_fp {
            let bbox = place_disjoint(&mut rng, cfg, &boxes).ok_or_else(|| {
                SynthError::Infeasible(format!("no room for a spurious detection in image {image_id}"))
            })?;
            let category_id = rng.gen_range(1..=cfg.categories as u64);
            let score = rng.gen::<f64>();
            let id = detections.len() as DetectionId;
            push(&mut detections, Origin::Spurious, Detection { id, image_id, category_id, bbox, score });
        }
    }

    Ok(SynthWorld {
        dataset: Dataset { images, ground_truth, categories },
        detections: DetectionSet::from_trusted(detections),
        origins,
    })
}
