//! Optional TOML config mirroring the command-line flags. Flags win.
//!
//! ```toml
//! seed = 7
//! splits = 10
//! fit_frac = 0.6
//! t_iou = 0.5
//! cap_pre = 400
//! cap_eval = 100
//! gt = "data/gt.json"
//! dets = "data/dets.json"
//!
//! [protocol]
//! bins = 10
//! per_class_cap = false
//!
//! [pipeline]
//! t_nms = 0.5
//! sigma = 0.5
//! recipe = { family = "beta", variates = ["confidence", "j_min_suppressing"], dependent = true, epsilon_clip = 1e-6 }
//!
//! [synth]
//! images = 500
//! confidence_law = { law = "overconfident_pow", gamma = 2.0 }
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use ioucal_core::harness::{PipelineParams, Protocol};
use ioucal_core::synth::SynthConfig;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub gt: Option<PathBuf>,
    pub dets: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub splits: Option<usize>,
    pub fit_frac: Option<f64>,
    pub t_iou: Option<f64>,
    pub cap_pre: Option<usize>,
    pub cap_eval: Option<usize>,
    pub protocol: Option<Protocol>,
    pub pipeline: Option<PipelineParams>,
    pub synth: Option<SynthConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
