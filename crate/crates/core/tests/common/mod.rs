#![allow(dead_code)]

use ioucal_core::model::{BBox, Category, Dataset, Detection, GroundTruthObject, ImageInfo};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn det(id: u64, image: u64, cat: u64, b: BBox, score: f64) -> Detection {
    Detection { id, image_id: image, category_id: cat, bbox: b, score }
}

pub fn gt(id: u64, image: u64, cat: u64, b: BBox) -> GroundTruthObject {
    GroundTruthObject { id, image_id: image, category_id: cat, bbox: b, is_crowd: false }
}

pub fn dataset(images: &[u64], objects: Vec<GroundTruthObject>, categories: &[u64]) -> Dataset {
    Dataset {
        images: images.iter().map(|&id| ImageInfo { id, width: 1000.0, height: 1000.0 }).collect(),
        ground_truth: objects,
        categories: categories.iter().map(|&id| Category { id, name: format!("c{id}") }).collect(),
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.gen_range(0.0..extent);
    let y1 = rng.gen_range(0.0..extent);
    let w = rng.gen_range(1.0..extent / 2.0);
    let h = rng.gen_range(1.0..extent / 2.0);
    bbox(x1, y1, x1 + w, y1 + h)
}

/// Random single-image detections in rank order.
pub fn random_image(rng: &mut ChaCha8Rng, n: usize, categories: u64) -> Vec<Detection> {
    let mut dets: Vec<Detection> = (0..n as u64)
        .map(|id| det(id, 0, rng.gen_range(1..=categories), random_box(rng, 100.0), rng.gen_range(0.0..1.0)))
        .collect();
    dets.sort_by(ioucal_core::model::rank_order);
    dets
}
