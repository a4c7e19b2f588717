//! Shared data model: boxes, detections, ground truth and detection sets.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub type ImageId = u64;
pub type CategoryId = u64;
pub type DetectionId = u64;
pub type AnnotationId = u64;

/// Axis-aligned box in absolute pixel coordinates, corner convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and negative extent.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if x2 < x1 || y2 < y1 {
            return Err(BoxError::Inverted);
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Converts a COCO `[x, y, w, h]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum BoxError {
    #[error("box has non-finite coordinates")]
    NonFinite,
    #[error("box has negative width or height")]
    Inverted,
}

/// A scored, categorized box on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: DetectionId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub score: f64,
}

/// The global deterministic ordering: descending confidence, ties by
/// ascending detection id.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

pub fn is_rank_sorted(dets: &[Detection]) -> bool {
    dets.windows(2).all(|w| rank_order(&w[0], &w[1]) != Ordering::Greater)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub is_crowd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// Ground-truth side of an evaluation: images, annotations and categories.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub ground_truth: Vec<GroundTruthObject>,
    pub categories: Vec<Category>,
}

/// One offending record found during validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub record: String,
    pub problem: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.record, self.problem)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ValidationError {
    pub issues: Vec<ValidationIssue>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} validation issue(s)", self.issues.len())?;
        for issue in &self.issues {
            write!(f, "\n  {issue}")?;
        }
        Ok(())
    }
}

fn check_box(b: &BBox) -> Result<(), BoxError> {
    BBox::new(b.x1, b.y1, b.x2, b.y2).map(|_| ())
}

/// Checks references and box validity, clamping ground-truth boxes to their
/// image bounds. All problems are collected before failing.
pub fn validate_dataset(raw: Dataset) -> Result<Dataset, ValidationError> {
    let mut issues = Vec::new();
    let mut images: BTreeMap<ImageId, (f64, f64)> = BTreeMap::new();
    for img in &raw.images {
        if !(img.width.is_finite() && img.height.is_finite()) || img.width < 0.0 || img.height < 0.0 {
            issues
                .push(ValidationIssue { record: format!("image {}", img.id), problem: "invalid width/height".into() });
        }
        if images.insert(img.id, (img.width, img.height)).is_some() {
            issues.push(ValidationIssue { record: format!("image {}", img.id), problem: "duplicate image id".into() });
        }
    }
    let mut categories = BTreeSet::new();
    for cat in &raw.categories {
        if !categories.insert(cat.id) {
            issues.push(ValidationIssue {
                record: format!("category {}", cat.id),
                problem: "duplicate category id".into(),
            });
        }
    }

    let mut seen_ann = BTreeSet::new();
    let mut ground_truth = Vec::with_capacity(raw.ground_truth.len());
    for gt in raw.ground_truth {
        let record = format!("annotation {}", gt.id);
        if !seen_ann.insert(gt.id) {
            issues.push(ValidationIssue { record: record.clone(), problem: "duplicate annotation id".into() });
        }
        if !categories.contains(&gt.category_id) {
            issues.push(ValidationIssue {
                record: record.clone(),
                problem: format!("unknown category id {}", gt.category_id),
            });
        }
        if let Err(e) = check_box(&gt.bbox) {
            issues.push(ValidationIssue { record: record.clone(), problem: e.to_string() });
            continue;
        }
        match images.get(&gt.image_id) {
            None => issues.push(ValidationIssue { record, problem: format!("unknown image id {}", gt.image_id) }),
            Some(&(w, h)) => {
                let bbox = gt.bbox.clamp_to(w, h);
                debug_assert!(bbox.is_within(w, h));
                ground_truth.push(GroundTruthObject { bbox, ..gt });
            }
        }
    }

    if issues.is_empty() {
        Ok(Dataset { images: raw.images, ground_truth, categories: raw.categories })
    } else {
        Err(ValidationError { issues })
    }
}

impl Dataset {
    pub fn image_ids(&self) -> Vec<ImageId> {
        let mut ids: Vec<_> = self.images.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        ids
    }

    /// The sub-dataset over the given images; categories are kept whole.
    pub fn restrict(&self, images: &BTreeSet<ImageId>) -> Dataset {
        Dataset {
            images: self.images.iter().filter(|i| images.contains(&i.id)).cloned().collect(),
            ground_truth: self.ground_truth.iter().filter(|g| images.contains(&g.image_id)).cloned().collect(),
            categories: self.categories.clone(),
        }
    }
}

/// Detections grouped by image, each group in rank order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    by_image: BTreeMap<ImageId, Vec<Detection>>,
    per_image_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectionSetError {
    #[error("detection id {0} appears more than once")]
    DuplicateId(DetectionId),
    #[error("detection {id} has confidence {score} outside [0, 1]")]
    Confidence { id: DetectionId, score: f64 },
    #[error("detection {id}: {source}")]
    Box { id: DetectionId, source: BoxError },
}

impl DetectionSet {
    pub fn new(dets: Vec<Detection>) -> Result<Self, DetectionSetError> {
        let mut ids = BTreeSet::new();
        for d in &dets {
            if !ids.insert(d.id) {
                return Err(DetectionSetError::DuplicateId(d.id));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(DetectionSetError::Confidence { id: d.id, score: d.score });
            }
            check_box(&d.bbox).map_err(|source| DetectionSetError::Box { id: d.id, source })?;
        }
        Ok(Self::from_trusted(dets))
    }

    /// Groups detections already known to satisfy the per-detection
    /// invariants (e.g. outputs of another set's transformation).
    pub(crate) fn from_trusted(dets: Vec<Detection>) -> Self {
        let mut by_image: BTreeMap<ImageId, Vec<Detection>> = BTreeMap::new();
        for d in dets {
            by_image.entry(d.image_id).or_default().push(d);
        }
        for group in by_image.values_mut() {
            group.sort_by(rank_order);
        }
        Self { by_image, per_image_cap: None }
    }

    pub(crate) fn from_groups(groups: impl IntoIterator<Item = (ImageId, Vec<Detection>)>) -> Self {
        let mut by_image = BTreeMap::new();
        for (image, mut group) in groups {
            if group.is_empty() {
                continue;
            }
            group.sort_by(rank_order);
            by_image.insert(image, group);
        }
        Self { by_image, per_image_cap: None }
    }

    pub fn per_image_cap(&self) -> Option<usize> {
        self.per_image_cap
    }

    pub fn len(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.by_image.keys().copied()
    }

    pub fn image(&self, id: ImageId) -> &[Detection] {
        self.by_image.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn groups(&self) -> impl Iterator<Item = (ImageId, &[Detection])> {
        self.by_image.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// All detections, by image id and then rank order.
    pub fn iter(&self) -> impl Iterator<Item = &Detection> {
        self.by_image.values().flatten()
    }

    pub fn to_vec(&self) -> Vec<Detection> {
        self.iter().cloned().collect()
    }

    pub fn restrict(&self, images: &BTreeSet<ImageId>) -> DetectionSet {
        Self {
            by_image: self.by_image.iter().filter(|(k, _)| images.contains(k)).map(|(k, v)| (*k, v.clone())).collect(),
            per_image_cap: self.per_image_cap,
        }
    }

    /// Keeps the `cap` top-ranked detections of every image.
    pub fn apply_cap(&self, cap: usize) -> DetectionSet {
        let by_image = self
            .by_image
            .iter()
            .filter(|_| cap > 0)
            .map(|(k, v)| (*k, v.iter().take(cap).cloned().collect()))
            .collect();
        Self { by_image, per_image_cap: Some(cap) }
    }

    /// Like [`apply_cap`](Self::apply_cap) but the budget applies to every
    /// (image, category) group separately.
    pub fn apply_cap_per_class(&self, cap: usize) -> DetectionSet {
        let mut by_image = BTreeMap::new();
        for (&image, group) in &self.by_image {
            let mut taken: BTreeMap<CategoryId, usize> = BTreeMap::new();
            let kept: Vec<Detection> = group
                .iter()
                .filter(|d| {
                    let n = taken.entry(d.category_id).or_default();
                    *n += 1;
                    *n <= cap
                })
                .cloned()
                .collect();
            if !kept.is_empty() {
                by_image.insert(image, kept);
            }
        }
        Self { by_image, per_image_cap: self.per_image_cap }
    }

    /// Applies a per-image transformation; output groups are re-sorted.
    pub fn map_images<F>(&self, f: F) -> DetectionSet
    where
        F: Fn(ImageId, &[Detection]) -> Vec<Detection> + Sync,
    {
        use rayon::prelude::*;
        let groups: Vec<(ImageId, Vec<Detection>)> = self.by_image.par_iter().map(|(k, v)| (*k, f(*k, v))).collect();
        Self::from_groups(groups)
    }

    pub fn try_map_images<F, E>(&self, f: F) -> Result<DetectionSet, E>
    where
        F: Fn(ImageId, &[Detection]) -> Result<Vec<Detection>, E> + Sync,
        E: Send,
    {
        use rayon::prelude::*;
        let groups: Vec<(ImageId, Vec<Detection>)> =
            self.by_image.par_iter().map(|(k, v)| f(*k, v).map(|out| (*k, out))).collect::<Result<_, E>>()?;
        Ok(Self::from_groups(groups))
    }
}
