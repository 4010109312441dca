//! Command-line surface of the `adpd` binary.
//!
//! Every command is a pure function of its input files and flags; outputs
//! are byte-identical across runs and thread counts.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, DEFAULT_IOU_THRESHOLDS, DEFAULT_LOCACC_IOU_THRESHOLDS};
use crate::experiment::{predict_dataset, run_seed, BenchConfig, BoxSource, BENCH_LR};
use crate::fusion::{FusionConfig, DEFAULT_FUSION_IOU};
use crate::gradcheck::{run_suite, DEFAULT_TOLERANCE};
use crate::head::{train, Checkpoint, TrainConfig, TrainMode, DESK_PATIENCE};
use crate::inference::InferenceConfig;
use crate::io;
use crate::synth::{generate_dataset, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "adpd", version, about = "Anatomy-driven pathology detection")]
pub struct Cli {
    /// Worker threads for parallel sections (results do not depend on it).
    #[arg(long, global = true, env = "ADPD_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the region heads.
    Train(TrainArgs),
    /// Predict pathology boxes.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Seeded synthetic benchmark: loc vs MIL, with and without box fusion.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n_images: usize,
    /// Index of the first image; ranges of one seed share the same world.
    #[arg(long, default_value_t = 0)]
    pub first_image: usize,
    #[arg(long, default_value_t = 8)]
    pub n_regions: usize,
    #[arg(long, default_value_t = 5)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.3)]
    pub prevalence: f64,
    #[arg(long, default_value_t = 0.02)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.6)]
    pub shrink_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub shrink_max: f64,
    #[arg(long, default_value_t = 0.03)]
    pub margin: f64,
    /// Every active pathology affects exactly one region.
    #[arg(long)]
    pub single_region: bool,
    #[arg(long, default_value_t = 0.0)]
    pub region_dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            n_regions: self.n_regions,
            n_classes: self.n_classes,
            feature_dim: self.feature_dim,
            n_images: self.n_images,
            first_image: self.first_image,
            prevalence: self.prevalence,
            jitter: self.jitter,
            noise_sigma: self.noise,
            shrink: (self.shrink_min, self.shrink_max),
            margin: self.margin,
            single_region: self.single_region,
            region_dropout: self.region_dropout,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = TrainMode::Loc)]
    pub mode: TrainMode,
    /// Defaults to 3e-5 (loc, loc_mil) or 1e-4 (mil).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Defaults to 1e-5 (loc, loc_mil) or 1e-4 (mil).
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = DESK_PATIENCE)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.01)]
    pub asl_weight: f64,
    #[arg(long, default_value_t = 0.0)]
    pub gamma_pos: f64,
    #[arg(long, default_value_t = 4.0)]
    pub gamma_neg: f64,
    #[arg(long, default_value_t = 0.05)]
    pub clip: f64,
    /// LSE pooling sharpness.
    #[arg(long, default_value_t = 10.0)]
    pub lse_r: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    #[arg(long)]
    pub history_out: Option<PathBuf>,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::for_mode(self.mode);
        if let Some(lr) = self.lr {
            cfg.optimizer.lr = lr;
        }
        if let Some(wd) = self.weight_decay {
            cfg.optimizer.weight_decay = wd;
        }
        cfg.batch_size = self.batch_size;
        cfg.max_steps = self.max_steps;
        cfg.patience = self.patience;
        cfg.seed = self.seed;
        cfg.loss.weights.asl_weight = self.asl_weight;
        cfg.loss.asl.gamma_pos = self.gamma_pos;
        cfg.loss.asl.gamma_neg = self.gamma_neg;
        cfg.loss.asl.clip = self.clip;
        cfg.loss.lse.r = self.lse_r;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(
        long,
        required_unless_present = "probs_from_file",
        conflicts_with = "probs_from_file"
    )]
    pub checkpoint: Option<PathBuf>,
    /// Use the `pathology_probs` recorded in the data file instead of a model.
    #[arg(long)]
    pub probs_from_file: bool,
    /// Evaluation-class mapping file.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Probability threshold; a region proposes a box when its probability exceeds it.
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    /// Fusion IoU threshold; 1.0 disables fusion.
    #[arg(long, default_value_t = DEFAULT_FUSION_IOU)]
    pub wbf_iou: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub top1: bool,
    #[arg(long, default_value_t = 0.5)]
    pub presence_threshold: f64,
    #[arg(long, value_enum, default_value_t = BoxSource::Predicted)]
    pub box_source: BoxSource,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset file carrying ground-truth boxes.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_IOU_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = 0.7)]
    pub locacc_score: f64,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LOCACC_IOU_THRESHOLDS)]
    pub locacc_thresholds: Vec<f64>,
    /// Only images containing the class count towards loc-acc.
    #[arg(long)]
    pub locacc_positives_only: bool,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = BENCH_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = BoxSource::Predicted)]
    pub box_source: BoxSource,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
}

/// Result of a command: lines for stdout and whether every check passed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub report: Vec<String>,
    pub ok: bool,
}

impl Outcome {
    fn ok(report: Vec<String>) -> Self {
        Self { report, ok: true }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::arg(e.to_string()))?;
    run(&cli)
}

fn synth(a: &SynthArgs) -> Result<Outcome> {
    let ds = generate_dataset(&a.config())?;
    io::save_dataset(&a.out, &ds)?;
    Ok(Outcome::ok(vec![format!(
        "wrote {} images to {}",
        ds.len(),
        a.out.display()
    )]))
}

fn train_cmd(a: &TrainArgs) -> Result<Outcome> {
    let ds = io::load_dataset(&a.data)?;
    let cfg = a.config();
    let outcome = train(&ds, &cfg)?;
    Checkpoint {
        classes: ds.classes.clone(),
        params: outcome.params,
    }
    .save(&a.checkpoint_out)?;
    if let Some(path) = &a.history_out {
        io::save_text(path, &io::history_csv(&outcome.history))?;
    }
    let last = outcome.history.last().map_or(f64::NAN, |h| h.loss.total);
    Ok(Outcome::ok(vec![format!(
        "mode {} steps {} final loss {}{}",
        cfg.loss.mode.as_str(),
        outcome.history.len(),
        io::format_f64(last),
        if outcome.stopped_early {
            " (early stop)"
        } else {
            ""
        }
    )]))
}

fn infer(a: &InferArgs) -> Result<Outcome> {
    let ds = io::load_dataset(&a.data)?;
    let checkpoint = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let training_classes = checkpoint.as_ref().map_or(&ds.classes, |c| &c.classes);
    let mapping = a
        .mapping
        .as_deref()
        .map(|p| io::load_mapping(p, training_classes))
        .transpose()?;
    let classes = mapping
        .as_ref()
        .map_or_else(|| training_classes.clone(), |m| m.class_names());
    let cfg = InferenceConfig {
        probability_threshold: a.tau,
        fusion: FusionConfig::with_iou(a.wbf_iou),
        presence_threshold: a.presence_threshold,
        top1_per_class: a.top1,
    };
    let images = predict_dataset(
        &ds,
        checkpoint.as_ref().map(|c| &c.params),
        mapping.as_ref(),
        &cfg,
        a.box_source,
    )?;
    let n_boxes: usize = images.iter().map(|i| i.boxes.len()).sum();
    io::save_predictions(&a.out, &io::PredictionsFile { classes, images })?;
    Ok(Outcome::ok(vec![format!(
        "wrote {n_boxes} boxes for {} images to {}",
        ds.len(),
        a.out.display()
    )]))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), io::format_f64)
}

fn eval_cmd(a: &EvalArgs) -> Result<Outcome> {
    let preds = io::load_predictions(&a.pred)?;
    let ds = io::load_dataset(&a.gt)?;
    let gt = crate::experiment::ground_truth(&ds)?;
    let cfg = EvalConfig {
        iou_thresholds: a.thresholds.clone(),
        locacc_score_threshold: a.locacc_score,
        locacc_iou_thresholds: a.locacc_thresholds.clone(),
        locacc_positives_only: a.locacc_positives_only,
    };
    let report = evaluate(&preds.align_to(&gt)?, &gt, &cfg)?;
    if let Some(p) = &a.out_json {
        io::save_text(p, &io::report_json(&report)?)?;
    }
    if let Some(p) = &a.out_csv {
        io::save_text(p, &report.to_csv())?;
    }
    let mut lines = vec![format!("mAP {}", opt(report.map))];
    for (t, v) in report.iou_thresholds.iter().zip(&report.ap_per_threshold) {
        lines.push(format!("AP@{t} {}", opt(*v)));
    }
    for (t, v) in report
        .locacc_iou_thresholds
        .iter()
        .zip(&report.locacc_per_threshold)
    {
        lines.push(format!("loc-acc@{t} {}", opt(*v)));
    }
    Ok(Outcome::ok(lines))
}

fn gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let results = run_suite(a.trials, a.seed, a.tol)?;
    let ok = results.iter().all(|r| r.passed());
    let report = results
        .iter()
        .map(|r| {
            format!(
                "{} {}: max relative error {:.3e} over {} points ({} failing)",
                if r.passed() { "PASS" } else { "FAIL" },
                r.name,
                r.max_rel_error,
                r.trials,
                r.failures
            )
        })
        .collect();
    Ok(Outcome { report, ok })
}

fn bench(a: &BenchArgs) -> Result<Outcome> {
    let mut cfg = BenchConfig {
        n_train: a.n_train,
        n_eval: a.n_eval,
        max_steps: a.max_steps,
        lr: Some(a.lr),
        box_source: a.box_source,
        ..BenchConfig::default()
    };
    cfg.inference.probability_threshold = a.tau;
    let mut lines = Vec::new();
    let mut results = Vec::new();
    for seed in a.first_seed..a.first_seed + a.seeds {
        let r = run_seed(&cfg, seed)?;
        lines.push(format!(
            "seed {seed}: loc mAP {:.4} (no WBF {:.4}) | mil mAP {:.4} (no WBF {:.4})",
            r.loc.map_wbf, r.loc.map_no_wbf, r.mil.map_wbf, r.mil.map_no_wbf
        ));
        results.push(r);
    }
    let count = |f: &dyn Fn(&crate::experiment::SeedResult) -> bool| {
        results.iter().filter(|r| f(r)).count()
    };
    lines.push(format!(
        "loc > mil in {}/{} seeds; WBF >= no WBF: loc {}/{}, mil {}/{}",
        count(&|r| r.loc.map_wbf > r.mil.map_wbf),
        results.len(),
        count(&|r| r.loc.map_wbf >= r.loc.map_no_wbf),
        results.len(),
        count(&|r| r.mil.map_wbf >= r.mil.map_no_wbf),
        results.len(),
    ));
    if let Some(p) = &a.out_json {
        io::save_text(p, &io::to_json_pretty(&results)?)?;
    }
    Ok(Outcome::ok(lines))
}
