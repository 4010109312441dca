//! End-to-end glue: trained heads to region detections, dataset ground truth
//! to the evaluation view, and the seeded synthetic benchmark.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{
    auroc, evaluate, EvalConfig, EvalReport, GroundTruth, ImageGt, ImagePredictions,
};
use crate::fusion::FusionConfig;
use crate::head::{forward, train, HeadParams, TrainConfig, TrainMode};
use crate::inference::{
    apply_class_mapping, detect_pathologies, ClassMapping, InferenceConfig, RegionDetection,
};
use crate::synth::{generate_dataset, SynthConfig};

/// Where region boxes and presence scores come from at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    /// Presence and box heads of the trained model.
    Predicted,
    /// Region boxes and presence recorded in the dataset.
    Data,
}

/// Region detections of one image.
///
/// With `params`, pathology probabilities come from the model and boxes per
/// `source`; without, the sample's precomputed probabilities and recorded
/// boxes are used. Unlisted regions are dropped.
pub fn region_detections(
    sample: &Sample,
    params: Option<&HeadParams>,
    source: BoxSource,
) -> Result<Vec<RegionDetection>> {
    let listed = |r: &usize| sample.listed[*r];
    let Some(params) = params else {
        let probs = sample.pathology_probs.as_ref().ok_or_else(|| {
            Error::config(format!(
                "image `{}` has no pathology probabilities",
                sample.image_id
            ))
        })?;
        return Ok((0..sample.n_regions())
            .filter(listed)
            .map(|r| RegionDetection {
                region_id: r,
                bbox: sample.region_boxes[r],
                presence: sample.presence[r],
                pathology_probs: probs.row(r).to_vec(),
            })
            .collect());
    };
    let features = sample.features.as_ref().ok_or_else(|| {
        Error::config(format!(
            "image `{}` has no region features",
            sample.image_id
        ))
    })?;
    let out = forward(features.view(), params)?;
    Ok((0..sample.n_regions())
        .filter(listed)
        .map(|r| {
            let (bbox, presence) = match source {
                BoxSource::Predicted => (out.boxes[r].to_corner(), out.presence[r]),
                BoxSource::Data => (sample.region_boxes[r], sample.presence[r]),
            };
            RegionDetection {
                region_id: r,
                bbox,
                presence,
                pathology_probs: out.pathology.row(r).to_vec(),
            }
        })
        .collect())
}

/// Runs inference on every image; images are processed in parallel and
/// returned in dataset order.
pub fn predict_dataset(
    dataset: &Dataset,
    params: Option<&HeadParams>,
    mapping: Option<&ClassMapping>,
    cfg: &InferenceConfig,
    source: BoxSource,
) -> Result<Vec<ImagePredictions>> {
    cfg.validate()?;
    let predicted = params.map_or(dataset.classes.len(), |p| p.n_classes());
    if let Some(m) = mapping {
        if m.source_count() != predicted {
            return Err(Error::config(format!(
                "mapping expects {} training classes, model predicts {predicted}",
                m.source_count()
            )));
        }
    }
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let mut regions = region_detections(s, params, source)?;
            if let Some(m) = mapping {
                regions = regions
                    .iter()
                    .map(|d| apply_class_mapping(d, m))
                    .collect::<Result<_>>()?;
            }
            Ok(ImagePredictions {
                image_id: s.image_id.clone(),
                boxes: detect_pathologies(&regions, cfg).boxes,
            })
        })
        .collect()
}

/// Evaluation view of the dataset's annotations.
pub fn ground_truth(dataset: &Dataset) -> Result<GroundTruth> {
    let images = dataset
        .samples
        .iter()
        .map(|s| {
            let gt = s.gt.as_ref().ok_or_else(|| {
                Error::config(format!("image `{}` has no ground truth", s.image_id))
            })?;
            Ok(ImageGt {
                image_id: s.image_id.clone(),
                boxes: gt.boxes.clone(),
                labels: gt.image_labels.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(GroundTruth {
        classes: dataset.classes.clone(),
        images,
    })
}

/// Macro AUROC of region-level probabilities against anatomy labels, and of
/// image-level scores (max over present regions) against image labels.
pub fn classification_auroc(
    dataset: &Dataset,
    params: &HeadParams,
) -> Result<(Option<f64>, Option<f64>)> {
    let nc = dataset.classes.len();
    let mut region_scores = vec![Vec::new(); nc];
    let mut region_labels = vec![Vec::new(); nc];
    let mut image_scores = vec![Vec::new(); nc];
    let mut image_labels = vec![Vec::new(); nc];
    for s in &dataset.samples {
        let f = s
            .features
            .as_ref()
            .ok_or_else(|| Error::config("AUROC needs region features"))?;
        let out = forward(f.view(), params)?;
        let present = s.present_mask();
        for c in 0..nc {
            let mut best = f64::NEG_INFINITY;
            for r in (0..s.n_regions()).filter(|&r| present[r]) {
                let p = out.pathology[(r, c)];
                best = best.max(p);
                if let Some(l) = &s.anatomy_labels {
                    region_scores[c].push(p);
                    region_labels[c].push(l[(r, c)]);
                }
            }
            if let (Some(labels), true) = (s.image_labels(), best.is_finite()) {
                image_scores[c].push(best);
                image_labels[c].push(labels[c]);
            }
        }
    }
    let macro_mean = |scores: &[Vec<f64>], labels: &[Vec<bool>]| {
        let vals: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter_map(|(s, l)| auroc(s, l))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok((
        macro_mean(&region_scores, &region_labels),
        macro_mean(&image_scores, &image_labels),
    ))
}

/// Settings of the seeded synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub max_steps: usize,
    /// Learning rate for both modes; `None` keeps the per-mode defaults.
    pub lr: Option<f64>,
    pub inference: InferenceConfig,
    pub box_source: BoxSource,
    pub eval: EvalConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            n_train: 500,
            n_eval: 200,
            max_steps: 2_000,
            lr: Some(BENCH_LR),
            inference: InferenceConfig::default(),
            box_source: BoxSource::Predicted,
            eval: EvalConfig::default(),
        }
    }
}

/// Learning rate used at desk scale, where the run is capped at 2 000 steps.
pub const BENCH_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: TrainMode,
    pub map_wbf: f64,
    pub map_no_wbf: f64,
    pub region_auroc: Option<f64>,
    pub image_auroc: Option<f64>,
    pub steps: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub loc: ModeResult,
    pub mil: ModeResult,
}

pub fn train_config(mode: TrainMode, bench: &BenchConfig, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_mode(mode);
    cfg.max_steps = bench.max_steps;
    cfg.seed = seed;
    if let Some(lr) = bench.lr {
        cfg.optimizer.lr = lr;
    }
    cfg
}

/// Train and eval splits of one benchmark world.
pub fn bench_data(bench: &BenchConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = generate_dataset(&SynthConfig {
        n_images: bench.n_train,
        first_image: 0,
        seed,
        ..bench.synth.clone()
    })?;
    let eval = generate_dataset(&SynthConfig {
        n_images: bench.n_eval,
        first_image: bench.n_train,
        seed,
        ..bench.synth.clone()
    })?;
    Ok((train, eval))
}

pub fn evaluate_params(
    params: &HeadParams,
    data: &Dataset,
    cfg: &InferenceConfig,
    source: BoxSource,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let preds = predict_dataset(data, Some(params), None, cfg, source)?;
    evaluate(&preds, &ground_truth(data)?, eval)
}

pub fn run_mode(
    mode: TrainMode,
    bench: &BenchConfig,
    seed: u64,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<ModeResult> {
    let outcome = train(train_set, &train_config(mode, bench, seed))?;
    let params = &outcome.params;
    let with = evaluate_params(
        params,
        eval_set,
        &bench.inference,
        bench.box_source,
        &bench.eval,
    )?;
    let without_cfg = InferenceConfig {
        fusion: FusionConfig {
            iou_threshold: 1.0,
            ..bench.inference.fusion
        },
        ..bench.inference
    };
    let without = evaluate_params(
        params,
        eval_set,
        &without_cfg,
        bench.box_source,
        &bench.eval,
    )?;
    let (region_auroc, image_auroc) = classification_auroc(eval_set, params)?;
    Ok(ModeResult {
        mode,
        map_wbf: with.map.unwrap_or(0.0),
        map_no_wbf: without.map.unwrap_or(0.0),
        region_auroc,
        image_auroc,
        steps: outcome.history.len(),
        final_loss: outcome.history.last().map_or(f64::NAN, |r| r.loss.total),
    })
}

pub fn run_seed(bench: &BenchConfig, seed: u64) -> Result<SeedResult> {
    let (train_set, eval_set) = bench_data(bench, seed)?;
    Ok(SeedResult {
        seed,
        loc: run_mode(TrainMode::Loc, bench, seed, &train_set, &eval_set)?,
        mil: run_mode(TrainMode::Mil, bench, seed, &train_set, &eval_set)?,
    })
}
