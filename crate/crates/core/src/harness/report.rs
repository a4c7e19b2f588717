use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::pipeline::{Pipeline, PipelineParams, SplitMetrics};
use super::study::TiouStudy;
use super::sweep::SweepTable;
use super::{mean, HarnessError, Protocol, SplitPlan};

pub const REPORT_FORMAT: &str = "ioucal-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub samples: usize,
    pub positives: usize,
    pub iterations: usize,
    pub converged: bool,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: usize,
    pub map: f64,
    pub map50: f64,
    pub ece: f64,
    pub ace: f64,
    pub sce: f64,
    pub nll: f64,
    pub brier: f64,
    pub detections: usize,
    pub fit: Option<FitSummary>,
}

impl SplitRow {
    pub fn from_metrics(split: usize, m: &SplitMetrics, fit: Option<FitSummary>) -> Self {
        let c = &m.calibration;
        Self {
            split,
            map: m.map,
            map50: m.map50,
            ece: c.ece,
            ace: c.ace,
            sce: c.sce,
            nll: c.nll,
            brier: c.brier,
            detections: m.detections,
            fit,
        }
    }
}

/// Mean over splits with the largest deviations above and below it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub max_pos_dev: f64,
    pub max_neg_dev: f64,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Self {
        let m = mean(values);
        let devs = values.iter().map(|v| v - m);
        Self { mean: m, max_pos_dev: devs.clone().fold(0.0, f64::max), max_neg_dev: devs.fold(0.0, f64::min) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub splits: usize,
    pub map: Stat,
    pub map50: Stat,
    pub ece: Stat,
    pub ace: Stat,
    pub sce: Stat,
    pub nll: Stat,
    pub brier: Stat,
}

impl Aggregate {
    pub fn from_rows(rows: &[SplitRow]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let stat = |f: fn(&SplitRow) -> f64| Stat::from_values(&rows.iter().map(f).collect::<Vec<_>>());
        Some(Self {
            splits: rows.len(),
            map: stat(|r| r.map),
            map50: stat(|r| r.map50),
            ece: stat(|r| r.ece),
            ace: stat(|r| r.ace),
            sce: stat(|r| r.sce),
            nll: stat(|r| r.nll),
            brier: stat(|r| r.brier),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFailure {
    pub split: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub label: String,
    pub pipeline: Pipeline,
    pub params: PipelineParams,
    /// NMS parameters were chosen on the full set, evaluation data included.
    pub oracle_tuned: bool,
    pub rows: Vec<SplitRow>,
    pub failures: Vec<SplitFailure>,
    /// Splits whose fit stopped at the iteration cap.
    pub fit_warnings: usize,
    pub aggregate: Option<Aggregate>,
}

impl ReportEntry {
    pub fn new(
        label: String,
        pipeline: Pipeline,
        params: PipelineParams,
        rows: Vec<SplitRow>,
        failures: Vec<SplitFailure>,
    ) -> Self {
        let fit_warnings = rows.iter().filter(|r| r.fit.as_ref().is_some_and(|f| !f.converged)).count();
        let aggregate = Aggregate::from_rows(&rows);
        Self { label, pipeline, params, oracle_tuned: false, rows, failures, fit_warnings, aggregate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub rng: String,
    pub substreams: Vec<String>,
    pub split_plan: Option<SplitPlan>,
    pub protocol: Protocol,
    pub inputs: Vec<String>,
}

impl ReportHeader {
    pub fn new(command: &str, seed: u64, plan: Option<&SplitPlan>, protocol: &Protocol) -> Self {
        Self {
            tool: "ioucal".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            rng: crate::rng::RNG_SCHEME.into(),
            substreams: plan.map(SplitPlan::substream_names).unwrap_or_default(),
            split_plan: plan.copied(),
            protocol: protocol.clone(),
            inputs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub header: ReportHeader,
    pub entries: Vec<ReportEntry>,
    pub sweeps: Vec<SweepTable>,
    pub tiou: Option<TiouStudy>,
}

fn pct(s: &Stat) -> String {
    format!("{:.2} +{:.2}/{:.2}", s.mean * 100.0, s.max_pos_dev * 100.0, s.max_neg_dev * 100.0)
}

impl EvalReport {
    pub fn new(header: ReportHeader) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            header,
            entries: Vec::new(),
            sweeps: Vec::new(),
            tiou: None,
        }
    }

    pub fn entry(&self, label: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("report document: {e}")))?;
        if value.get("format").and_then(|v| v.as_str()) != Some(REPORT_FORMAT) {
            return Err(HarnessError::Config("not an ioucal report".into()));
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == REPORT_VERSION as u64 => {}
            v => return Err(HarnessError::Config(format!("unsupported report version {v:?}"))),
        }
        serde_json::from_value(value).map_err(|e| HarnessError::Config(format!("report document: {e}")))
    }

    /// Plain-text summary; metric values in percent, NLL as is.
    pub fn render_text(&self) -> String {
        let h = &self.header;
        let mut out = String::new();
        let _ = writeln!(out, "{} {} ({}), seed {}", h.tool, h.tool_version, h.command, h.seed);
        if let Some(p) = &h.split_plan {
            let _ = writeln!(out, "{} image-wise splits, fit fraction {:.2}", p.repeats, p.fit_fraction);
        }
        let _ = writeln!(
            out,
            "caps {}/{}, labels at t_iou {:.2}, metrics at t_iou {:.2}",
            h.protocol.cap_pre, h.protocol.cap_eval, h.protocol.t_iou_fit, h.protocol.t_iou_metric
        );
        if !self.entries.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<48} {:>22} {:>22} {:>22} {:>22} {:>22} {:>10}",
                "configuration", "mAP", "mAP50", "ECE", "ACE", "SCE", "NLL"
            );
        }
        for e in &self.entries {
            let mark = if e.oracle_tuned { "*" } else { "" };
            let label = format!("{}{mark}", e.label);
            match &e.aggregate {
                Some(a) => {
                    let _ = writeln!(
                        out,
                        "{:<48} {:>22} {:>22} {:>22} {:>22} {:>22} {:>10.4}",
                        label,
                        pct(&a.map),
                        pct(&a.map50),
                        pct(&a.ece),
                        pct(&a.ace),
                        pct(&a.sce),
                        a.nll.mean
                    );
                }
                None => {
                    let _ = writeln!(out, "{label:<48} no successful split");
                }
            }
            for f in &e.failures {
                let _ = writeln!(out, "    split {} failed: {}", f.split, f.error);
            }
            if e.fit_warnings > 0 {
                let _ = writeln!(out, "    {} split fit(s) hit the iteration cap", e.fit_warnings);
            }
        }
        if self.entries.iter().any(|e| e.oracle_tuned) {
            let _ = writeln!(out, "* parameters oracle-tuned on the full set");
        }
        for table in &self.sweeps {
            let _ = writeln!(out);
            out.push_str(&table.render_text());
        }
        if let Some(study) = &self.tiou {
            let _ = writeln!(out);
            out.push_str(&study.render_text());
        }
        out
    }
}
