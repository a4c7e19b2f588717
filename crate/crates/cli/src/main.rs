mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ioucal_core::calibration::{
    fit, iou_aware_calibrate, labeled_samples, CalibrationError, CalibrationModel, Family, FitOptions, Variate,
};
use ioucal_core::coco::{self, CocoError};
use ioucal_core::eval::match_detections;
use ioucal_core::harness::{
    ablation_recipes, ablation_suite, calibration_exit_code, compare, evaluate_full, fit_chain, run_pipeline, sweep,
    tiou_study, EvalReport, HarnessError, Inputs, Pipeline, PipelineParams, Protocol, ReportEntry, ReportHeader,
    SelectBy, Spacing, SplitPlan, SweepGrid,
};
use ioucal_core::metrics::{reliability_table, samples_from_matches, BinningSpec};
use ioucal_core::model::DetectionSet;
use ioucal_core::suppression::{suppress_set, SuppressionConfig, DEFAULT_SOFT_SCORE_FLOOR};
use ioucal_core::synth::{generate, ConfidenceLaw, SynthConfig};

use config::FileConfig;

#[derive(Parser)]
#[command(name = "ioucal", version, about = "IoU-aware calibration, NMS baselines and detection evaluation")]
struct Cli {
    /// TOML file mirroring the flags; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log progress (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Ground-truth annotations (COCO JSON)
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Detections (COCO results JSON)
    #[arg(long)]
    dets: Option<PathBuf>,
    /// Top-level RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Number of random fit/eval splits
    #[arg(long)]
    splits: Option<usize>,
    /// Share of images used for fitting
    #[arg(long)]
    fit_frac: Option<f64>,
    /// IoU threshold for calibration labels
    #[arg(long)]
    t_iou: Option<f64>,
    /// Detections kept per image on load
    #[arg(long)]
    cap_pre: Option<usize>,
    /// Detections kept per image for evaluation
    #[arg(long)]
    cap_eval: Option<usize>,
    /// Output file (or directory for `synth`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct RecipeArgs {
    /// Calibration family
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Comma-separated variates, e.g. confidence,j_min_suppressing
    #[arg(long, value_delimiter = ',')]
    variates: Option<Vec<Variate>>,
    /// Leave out pairwise interaction terms
    #[arg(long)]
    independent: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Logistic,
    Beta,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Hard,
    Soft,
}

#[derive(Subcommand)]
enum Command {
    /// Check annotation and detection files
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic ground truth and detection dump
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: Option<usize>,
        /// calibrated, pow:<gamma> or logistic:<k>
        #[arg(long)]
        law: Option<String>,
        /// Spurious detections per image
        #[arg(long)]
        fp_rate: Option<f64>,
        /// Duplicates per object as min-max, e.g. 2-4
        #[arg(long)]
        duplicates: Option<String>,
    },
    /// Fit a calibration model on a detection dump
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recipe: RecipeArgs,
    },
    /// Rescore detections with a fitted model
    Apply {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run hard or soft NMS on a detection dump
    Nms {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "hard")]
        method: MethodArg,
        /// Hard NMS IoU threshold
        #[arg(long)]
        t_nms: Option<f64>,
        /// Soft NMS Gaussian width
        #[arg(long)]
        sigma: Option<f64>,
        /// Scores at or below this are dropped
        #[arg(long)]
        floor: Option<f64>,
    },
    /// Evaluate a pipeline over repeated splits (or every pipeline with `all`)
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recipe: RecipeArgs,
        /// none, nms, soft_nms, beta_univariate, iou_aware, nms_plus_beta, soft_plus_beta or all
        #[arg(long, default_value = "iou_aware")]
        pipeline: String,
        /// Hard NMS IoU threshold
        #[arg(long)]
        t_nms: Option<f64>,
        /// Soft NMS Gaussian width
        #[arg(long)]
        sigma: Option<f64>,
        /// Evaluate on the full set without splitting (fit-free pipelines only)
        #[arg(long)]
        no_split: bool,
        /// With `all`, pick NMS parameters by mAP50 instead of mAP
        #[arg(long)]
        select_map50: bool,
        /// Write reliability-diagram CSV for split 0 (or the full set)
        #[arg(long)]
        reliability: Option<PathBuf>,
        /// Write per-detection match CSV for split 0 (or the full set)
        #[arg(long)]
        matches: Option<PathBuf>,
    },
    /// Grid-search an NMS parameter on the full set
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "hard")]
        method: MethodArg,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        log: bool,
    },
    /// Cross fit and metric IoU thresholds for IoU-aware calibration
    StudyTiou {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        recipe: RecipeArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
        t_fit: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
        t_eval: Vec<f64>,
    },
    /// Compare calibration recipes
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Re-render a saved report
    Report {
        /// Report JSON written by another command
        #[arg(long = "in")]
        input: PathBuf,
        /// Write the re-serialized JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags merged over the config file over defaults.
struct Settings {
    gt: Option<PathBuf>,
    dets: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: u64,
    plan: SplitPlan,
    protocol: Protocol,
    params: PipelineParams,
    synth: SynthConfig,
}

impl Settings {
    fn resolve(common: &Common, file: FileConfig) -> Self {
        let seed = common.seed.or(file.seed).unwrap_or(0);
        let mut protocol = file.protocol.unwrap_or_default();
        if let Some(v) = common.cap_pre.or(file.cap_pre) {
            protocol.cap_pre = v;
        }
        if let Some(v) = common.cap_eval.or(file.cap_eval) {
            protocol.cap_eval = v;
        }
        if let Some(v) = common.t_iou.or(file.t_iou) {
            protocol.t_iou_fit = v;
        }
        let mut plan = SplitPlan { seed, ..Default::default() };
        if let Some(v) = common.splits.or(file.splits) {
            plan.repeats = v;
        }
        if let Some(v) = common.fit_frac.or(file.fit_frac) {
            plan.fit_fraction = v;
        }
        let mut synth = file.synth.unwrap_or_default();
        synth.seed = seed;
        Self {
            gt: common.gt.clone().or(file.gt),
            dets: common.dets.clone().or(file.dets),
            out: common.out.clone().or(file.out),
            seed,
            plan,
            protocol,
            params: file.pipeline.unwrap_or_default(),
            synth,
        }
    }

    fn gt(&self) -> Result<&Path> {
        self.gt.as_deref().ok_or_else(|| HarnessError::Config("--gt is required".into()).into())
    }

    fn dets(&self) -> Result<&Path> {
        self.dets.as_deref().ok_or_else(|| HarnessError::Config("--dets is required".into()).into())
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| HarnessError::Config("--out is required".into()).into())
    }

    fn inputs(&self) -> Result<Inputs> {
        Ok(Inputs::load(self.gt()?, self.dets()?, &self.protocol)?)
    }

    fn header(&self, command: &str, split: bool) -> ReportHeader {
        let mut h = ReportHeader::new(command, self.seed, split.then_some(&self.plan), &self.protocol);
        h.inputs = [&self.gt, &self.dets].into_iter().flatten().map(|p| p.display().to_string()).collect();
        h
    }

    fn apply_recipe(&mut self, r: &RecipeArgs) {
        let recipe = &mut self.params.recipe;
        if let Some(f) = r.family {
            recipe.family = match f {
                FamilyArg::Logistic => Family::Logistic,
                FamilyArg::Beta => Family::Beta,
            };
        }
        if let Some(v) = &r.variates {
            recipe.variates = v.clone();
        }
        if r.independent {
            recipe.dependent = false;
        }
    }
}

fn parse_law(s: &str) -> Result<ConfidenceLaw> {
    let bad = || HarnessError::Config(format!("unknown confidence law `{s}`"));
    Ok(match s.split_once(':') {
        None if s == "calibrated" => ConfidenceLaw::Calibrated,
        Some(("pow", g)) => ConfidenceLaw::OverconfidentPow { gamma: g.parse().map_err(|_| bad())? },
        Some(("logistic", k)) => ConfidenceLaw::LogisticSkew { k: k.parse().map_err(|_| bad())? },
        _ => return Err(bad().into()),
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn emit_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            write(path, &report.to_json())?;
            print!("{}", report.render_text());
        }
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

fn load_dets_only(s: &Settings) -> Result<DetectionSet> {
    Ok(coco::load_detections(s.dets()?)?.apply_cap(s.protocol.cap_pre))
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Validate { common } => {
            let s = Settings::resolve(&common, file);
            if s.gt.is_none() && s.dets.is_none() {
                bail!(HarnessError::Config("give --gt, --dets or both".into()));
            }
            if let Some(gt) = &s.gt {
                let ds = coco::load_dataset(gt)?;
                println!(
                    "{}: {} images, {} annotations, {} categories",
                    gt.display(),
                    ds.images.len(),
                    ds.ground_truth.len(),
                    ds.categories.len()
                );
            }
            if let Some(d) = &s.dets {
                let dets = coco::load_detections(d)?;
                println!("{}: {} detections", d.display(), dets.len());
            }
            if s.gt.is_some() && s.dets.is_some() {
                s.inputs()?;
                println!("detections reference known images");
            }
        }
        Command::Synth { common, images, law, fp_rate, duplicates } => {
            let mut s = Settings::resolve(&common, file);
            if let Some(n) = images {
                s.synth.images = n;
            }
            if let Some(l) = law {
                s.synth.confidence_law = parse_law(&l)?;
            }
            if let Some(r) = fp_rate {
                s.synth.fp_rate = r;
            }
            if let Some(d) = duplicates {
                let (lo, hi) = d.split_once('-').unwrap_or((&d, &d));
                let parse = |v: &str| {
                    v.parse::<usize>().map_err(|_| HarnessError::Config(format!("bad duplicate range `{d}`")))
                };
                s.synth.duplicate_count = [parse(lo)?, parse(hi)?];
            }
            let dir = s.out()?;
            let world = generate(&s.synth).map_err(HarnessError::from)?;
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            coco::save_dataset(&dir.join("gt.json"), &world.dataset)?;
            coco::save_detections(&dir.join("dets.json"), &world.detections)?;
            let mut cfg = serde_json::to_string_pretty(&s.synth)?;
            cfg.push('\n');
            write(&dir.join("synth.json"), &cfg)?;
            println!(
                "{} images, {} objects, {} detections -> {}",
                world.dataset.images.len(),
                world.dataset.ground_truth.len(),
                world.detections.len(),
                dir.display()
            );
        }
        Command::Fit { common, recipe } => {
            let mut s = Settings::resolve(&common, file);
            s.apply_recipe(&recipe);
            let inputs = s.inputs()?;
            let t = s.protocol.t_iou_fit;
            let matches = match_detections(&inputs.dets, &inputs.gt, t);
            let samples = labeled_samples(&inputs.dets, &matches, &s.params.recipe)?;
            let opts = FitOptions {
                objective: s.protocol.objective,
                max_iterations: s.protocol.max_iterations,
                t_iou: t,
                ..Default::default()
            };
            let model = fit(&samples, &s.params.recipe, &opts).map_err(HarnessError::from)?;
            if model.fit_warning() {
                log::warn!("fit did not reach the gradient tolerance");
            }
            model.save(s.out()?).map_err(HarnessError::from)?;
            println!("{} fitted on {} samples -> {}", s.params.recipe.label(), samples.len(), s.out()?.display());
        }
        Command::Apply { common, model } => {
            let s = Settings::resolve(&common, file);
            let model = CalibrationModel::load(&model).map_err(HarnessError::from)?;
            let dets = load_dets_only(&s)?;
            let out = iou_aware_calibrate(&dets, &model).map_err(HarnessError::from)?;
            coco::save_detections(s.out()?, &out)?;
            println!("{} detections rescored -> {}", out.len(), s.out()?.display());
        }
        Command::Nms { common, method, t_nms, sigma, floor } => {
            let s = Settings::resolve(&common, file);
            let cfg = match method {
                MethodArg::Hard => SuppressionConfig::hard(t_nms.unwrap_or(s.params.t_nms)),
                MethodArg::Soft => SuppressionConfig::soft(sigma.unwrap_or(s.params.sigma))
                    .with_floor(floor.unwrap_or(DEFAULT_SOFT_SCORE_FLOOR)),
            };
            let cfg = match (method, floor) {
                (MethodArg::Hard, Some(f)) => cfg.with_floor(f),
                _ => cfg,
            };
            let dets = load_dets_only(&s)?;
            let out = suppress_set(&dets, &cfg).map_err(HarnessError::from)?;
            coco::save_detections(s.out()?, &out)?;
            println!("{} of {} detections kept -> {}", out.len(), dets.len(), s.out()?.display());
        }
        Command::Eval { common, recipe, pipeline, t_nms, sigma, no_split, select_map50, reliability, matches } => {
            let mut s = Settings::resolve(&common, file);
            s.apply_recipe(&recipe);
            if let Some(t) = t_nms {
                s.params.t_nms = t;
            }
            if let Some(v) = sigma {
                s.params.sigma = v;
            }
            let inputs = s.inputs()?;
            let mut report = EvalReport::new(s.header("eval", !no_split));
            if pipeline == "all" {
                if no_split {
                    bail!(HarnessError::Config("`all` needs splits".into()));
                }
                let select = if select_map50 { SelectBy::Map50 } else { SelectBy::Map };
                let (entries, sweeps) = compare(
                    &inputs,
                    &s.params,
                    &s.plan,
                    &s.protocol,
                    &SweepGrid::hard_default(),
                    &SweepGrid::soft_default(),
                    select,
                )?;
                report.entries = entries;
                report.sweeps = sweeps;
            } else {
                let p: Pipeline = pipeline.parse().map_err(HarnessError::Config)?;
                if no_split {
                    let m = evaluate_full(&inputs, p, &s.params, &s.protocol)?;
                    let row = ioucal_core::harness::SplitRow::from_metrics(0, &m, None);
                    report.entries.push(ReportEntry::new(p.name().into(), p, s.params.clone(), vec![row], vec![]));
                } else {
                    report.entries.push(run_pipeline(&inputs, p, &s.params, &s.plan, &s.protocol)?);
                }
                if reliability.is_some() || matches.is_some() {
                    let (gt, processed) = if no_split {
                        let chain =
                            fit_chain(p, &s.params, &s.protocol, &inputs.gt, &inputs.dets, s.protocol.t_iou_fit)?;
                        (inputs.gt.clone(), chain.apply(&inputs.dets)?)
                    } else {
                        let split = &s.plan.splits(&inputs.gt.image_ids())?[0];
                        let (fit_gt, fit_dets) = (inputs.gt.restrict(&split.fit), inputs.dets.restrict(&split.fit));
                        let chain = fit_chain(p, &s.params, &s.protocol, &fit_gt, &fit_dets, s.protocol.t_iou_fit)?;
                        (inputs.gt.restrict(&split.eval), chain.apply(&inputs.dets.restrict(&split.eval))?)
                    };
                    let capped = processed.apply_cap(s.protocol.cap_eval);
                    let m = match_detections(&capped, &gt, s.protocol.t_iou_metric);
                    if let Some(path) = &reliability {
                        let spec = BinningSpec { bin_count: s.protocol.bins, ..Default::default() };
                        let table = reliability_table(&samples_from_matches(&m), &spec).map_err(HarnessError::from)?;
                        write(path, &table.to_csv())?;
                    }
                    if let Some(path) = &matches {
                        write(path, &m.to_csv())?;
                    }
                }
            }
            emit_report(&report, s.out.as_deref())?;
        }
        Command::Sweep { common, method, lo, hi, steps, log } => {
            let s = Settings::resolve(&common, file);
            let mut grid = match method {
                MethodArg::Hard => SweepGrid::hard_default(),
                MethodArg::Soft => SweepGrid::soft_default(),
            };
            grid.lo = lo.unwrap_or(grid.lo);
            grid.hi = hi.unwrap_or(grid.hi);
            grid.steps = steps.unwrap_or(grid.steps);
            if log {
                grid.spacing = Spacing::Log;
            }
            let inputs = s.inputs()?;
            let table = sweep(&inputs, &grid, &s.protocol)?;
            if let Some(out) = &s.out {
                write(&sibling(out, ".csv"), &table.to_csv())?;
            }
            let mut report = EvalReport::new(s.header("sweep", false));
            report.sweeps.push(table);
            emit_report(&report, s.out.as_deref())?;
        }
        Command::StudyTiou { common, recipe, t_fit, t_eval } => {
            let mut s = Settings::resolve(&common, file);
            s.apply_recipe(&recipe);
            let inputs = s.inputs()?;
            let study = tiou_study(&inputs, &s.params, &s.plan, &s.protocol, &t_fit, &t_eval)?;
            if let Some(out) = &s.out {
                write(&sibling(out, ".csv"), &study.to_csv())?;
            }
            let mut report = EvalReport::new(s.header("study-tiou", true));
            report.tiou = Some(study);
            emit_report(&report, s.out.as_deref())?;
        }
        Command::Ablate { common } => {
            let s = Settings::resolve(&common, file);
            let inputs = s.inputs()?;
            let mut report = EvalReport::new(s.header("ablate", true));
            report.entries = ablation_suite(&inputs, &ablation_recipes(), &s.params, &s.plan, &s.protocol)?;
            emit_report(&report, s.out.as_deref())?;
        }
        Command::Report { input, out } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let report = EvalReport::from_json(&text)?;
            if let Some(path) = out {
                write(&path, &report.to_json())?;
            }
            print!("{}", report.render_text());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<HarnessError>() {
        return e.exit_code() as u8;
    }
    if let Some(e) = err.downcast_ref::<CocoError>() {
        return if e.is_validation() { 2 } else { 4 };
    }
    if let Some(e) = err.downcast_ref::<CalibrationError>() {
        return calibration_exit_code(e) as u8;
    }
    if err.downcast_ref::<toml::de::Error>().is_some() {
        return 2;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 4;
    }
    1
}

/// Error chain joined by ": ", skipping causes already spelled out.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text.push_str(": ");
            text.push_str(&c);
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
