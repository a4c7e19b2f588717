use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::{evaluate_full, Pipeline, PipelineParams};
use super::{HarnessError, Inputs, Protocol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    Hard,
    Soft,
}

impl SweepMethod {
    pub fn param_name(self) -> &'static str {
        match self {
            SweepMethod::Hard => "t_nms",
            SweepMethod::Soft => "sigma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub method: SweepMethod,
    pub lo: f64,
    pub hi: f64,
    pub spacing: Spacing,
    pub steps: usize,
}

impl SweepGrid {
    pub fn hard_default() -> Self {
        Self { method: SweepMethod::Hard, lo: 0.40, hi: 0.90, spacing: Spacing::Linear, steps: 11 }
    }

    pub fn soft_default() -> Self {
        Self { method: SweepMethod::Soft, lo: 0.001, hi: 0.20, spacing: Spacing::Log, steps: 20 }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.steps == 0 {
            return Err(HarnessError::Config("sweep needs at least one step".into()));
        }
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(HarnessError::Config(format!("sweep interval [{}, {}] is empty", self.lo, self.hi)));
        }
        if self.spacing == Spacing::Log && self.lo <= 0.0 {
            return Err(HarnessError::Config("log spacing needs a positive interval".into()));
        }
        Ok(())
    }

    /// Grid points from `lo` to `hi` inclusive.
    pub fn points(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.lo];
        }
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| {
                if i == 0 {
                    return self.lo;
                }
                if i == self.steps - 1 {
                    return self.hi;
                }
                let f = i as f64 / last;
                match self.spacing {
                    Spacing::Linear => self.lo + (self.hi - self.lo) * f,
                    Spacing::Log => (self.lo.ln() + (self.hi.ln() - self.lo.ln()) * f).exp(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectBy {
    Map,
    Map50,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub map: f64,
    pub map50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub grid: SweepGrid,
    pub rows: Vec<SweepRow>,
    /// Row with the highest mAP; earliest on ties.
    pub best_map: usize,
    /// Row with the highest mAP50; earliest on ties.
    pub best_map50: usize,
    pub oracle_tuned: bool,
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl SweepTable {
    pub fn best(&self, by: SelectBy) -> &SweepRow {
        match by {
            SelectBy::Map => &self.rows[self.best_map],
            SelectBy::Map50 => &self.rows[self.best_map50],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},map,map50\n", self.grid.method.param_name());
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.param, r.map, r.map50);
        }
        out
    }

    pub fn render_text(&self) -> String {
        let name = self.grid.method.param_name();
        let mut out = format!("{name} sweep (oracle-tuned on the full set)\n{name:>10} {:>8} {:>8}\n", "mAP", "mAP50");
        for (i, r) in self.rows.iter().enumerate() {
            let mut mark = String::new();
            if i == self.best_map {
                mark.push_str(" <- best mAP");
            }
            if i == self.best_map50 {
                mark.push_str(" <- best mAP50");
            }
            let _ = writeln!(out, "{:>10.5} {:>8.2} {:>8.2}{mark}", r.param, r.map * 100.0, r.map50 * 100.0);
        }
        out
    }
}

/// Evaluates suppression at every grid point on the full detection set.
pub fn sweep(inputs: &Inputs, grid: &SweepGrid, protocol: &Protocol) -> Result<SweepTable, HarnessError> {
    grid.validate()?;
    let rows: Vec<SweepRow> = grid
        .points()
        .par_iter()
        .map(|&param| {
            let (pipeline, params) = match grid.method {
                SweepMethod::Hard => (Pipeline::Nms, PipelineParams { t_nms: param, ..Default::default() }),
                SweepMethod::Soft => (Pipeline::SoftNms, PipelineParams { sigma: param, ..Default::default() }),
            };
            let m = evaluate_full(inputs, pipeline, &params, protocol)?;
            Ok(SweepRow { param, map: m.map, map50: m.map50 })
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(SweepTable {
        grid: *grid,
        best_map: argmax(rows.iter().map(|r| r.map)),
        best_map50: argmax(rows.iter().map(|r| r.map50)),
        rows,
        oracle_tuned: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        let hard = SweepGrid::hard_default().points();
        assert_eq!(hard.len(), 11);
        assert!((hard[1] - 0.45).abs() < 1e-12);
        assert_eq!((hard[0], hard[10]), (0.4, 0.9));
        let soft = SweepGrid::soft_default().points();
        assert_eq!(soft.len(), 20);
        assert_eq!((soft[0], soft[19]), (0.001, 0.2));
        let ratio = soft[1] / soft[0];
        for w in soft.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-9);
        }
    }

    #[test]
    fn single_step_and_invalid_grids() {
        let g = SweepGrid { steps: 1, ..SweepGrid::hard_default() };
        assert_eq!(g.points(), vec![0.4]);
        assert!(SweepGrid { steps: 0, ..g }.validate().is_err());
        assert!(SweepGrid { lo: 0.0, ..SweepGrid::soft_default() }.validate().is_err());
    }
}
