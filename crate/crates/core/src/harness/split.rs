use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::model::ImageId;
use crate::rng::substream;

/// Repeated random image-wise fit/eval partitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub repeats: usize,
    pub fit_fraction: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self { seed: 0, repeats: 10, fit_fraction: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub index: usize,
    pub fit: BTreeSet<ImageId>,
    pub eval: BTreeSet<ImageId>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.repeats == 0 {
            return Err(HarnessError::Config("split repeats must be at least 1".into()));
        }
        if !(self.fit_fraction > 0.0 && self.fit_fraction < 1.0) {
            return Err(HarnessError::Config(format!("fit fraction {} outside (0, 1)", self.fit_fraction)));
        }
        Ok(())
    }

    pub fn substream_name(index: usize) -> String {
        format!("split/{index}")
    }

    pub fn substream_names(&self) -> Vec<String> {
        (0..self.repeats).map(Self::substream_name).collect()
    }

    /// Partitions for every repeat. Each shuffles the sorted image ids with
    /// its own substream and gives the leading share to fitting.
    pub fn splits(&self, images: &[ImageId]) -> Result<Vec<Split>, HarnessError> {
        self.validate()?;
        let mut ids: Vec<ImageId> = images.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Err(HarnessError::Config(format!("need at least 2 images to split, got {}", ids.len())));
        }
        let n_fit = ((ids.len() as f64 * self.fit_fraction).round() as usize).clamp(1, ids.len() - 1);
        Ok((0..self.repeats)
            .map(|index| {
                let mut order = ids.clone();
                order.shuffle(&mut substream(self.seed, &Self::substream_name(index)));
                Split {
                    index,
                    fit: order[..n_fit].iter().copied().collect(),
                    eval: order[n_fit..].iter().copied().collect(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_are_disjoint_and_exhaustive() {
        let ids: Vec<ImageId> = (1..=50).collect();
        let plan = SplitPlan { seed: 9, repeats: 3, fit_fraction: 0.6 };
        let splits = plan.splits(&ids).unwrap();
        assert_eq!(splits, plan.splits(&ids).unwrap());
        for s in &splits {
            assert_eq!(s.fit.len(), 30);
            assert!(s.fit.is_disjoint(&s.eval));
            assert_eq!(s.fit.len() + s.eval.len(), 50);
        }
        assert_ne!(splits[0].fit, splits[1].fit);
    }

    #[test]
    fn bad_plans_rejected() {
        let ids: Vec<ImageId> = (1..=5).collect();
        assert!(SplitPlan { repeats: 0, ..Default::default() }.splits(&ids).is_err());
        assert!(SplitPlan { fit_fraction: 1.0, ..Default::default() }.splits(&ids).is_err());
        assert!(SplitPlan::default().splits(&[1]).is_err());
    }
}
