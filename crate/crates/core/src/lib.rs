//! IoU-aware confidence calibration for object detection, with hard and
//! soft NMS baselines, COCO-style evaluation and an experiment harness.

pub mod calibration;
pub mod coco;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod suppression;
pub mod synth;
