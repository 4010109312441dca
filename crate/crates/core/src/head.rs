//! Per-region prediction heads and their training loop.
//!
//! Three heads read the same region feature vector, with weights shared
//! across regions:
//!
//! * presence: one linear unit + sigmoid,
//! * box: `linear -> relu -> linear -> relu -> linear -> sigmoid`, producing a
//!   [`CenterBox`], hidden width equal to the feature dimension,
//! * pathology: one linear layer + sigmoid over all classes.
//!
//! Gradients are derived by hand and optimized with AdamW.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::CenterBox;
use crate::losses::{
    combined_loss, detr_fixed_match_loss_grad, loc_loss, mil_loss, AslParams, CombinedLossWeights,
    DetrLossBreakdown, DetrLossParams, LsePoolParams, RegionPrediction, RegionTarget,
};

pub const BOX_OUTPUTS: usize = 4;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Head weights. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub pathology_w: Array2<f64>,
    pub pathology_b: Array1<f64>,
    pub presence_w: Array1<f64>,
    pub presence_b: Array1<f64>,
    pub box_w1: Array2<f64>,
    pub box_b1: Array1<f64>,
    pub box_w2: Array2<f64>,
    pub box_b2: Array1<f64>,
    pub box_w3: Array2<f64>,
    pub box_b3: Array1<f64>,
}

pub const BLOCK_NAMES: [&str; 10] = [
    "pathology.weight",
    "pathology.bias",
    "presence.weight",
    "presence.bias",
    "box.0.weight",
    "box.0.bias",
    "box.1.weight",
    "box.1.bias",
    "box.2.weight",
    "box.2.bias",
];

impl HeadParams {
    pub fn zeros(feature_dim: usize, n_classes: usize) -> Self {
        let f = feature_dim;
        Self {
            pathology_w: Array2::zeros((n_classes, f)),
            pathology_b: Array1::zeros(n_classes),
            presence_w: Array1::zeros(f),
            presence_b: Array1::zeros(1),
            box_w1: Array2::zeros((f, f)),
            box_b1: Array1::zeros(f),
            box_w2: Array2::zeros((f, f)),
            box_b2: Array1::zeros(f),
            box_w3: Array2::zeros((BOX_OUTPUTS, f)),
            box_b3: Array1::zeros(BOX_OUTPUTS),
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(feature_dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut p = Self::zeros(feature_dim, n_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (feature_dim.max(1) as f64).sqrt();
        for w in [
            p.pathology_w.as_slice_mut().unwrap(),
            p.presence_w.as_slice_mut().unwrap(),
            p.box_w1.as_slice_mut().unwrap(),
            p.box_w2.as_slice_mut().unwrap(),
            p.box_w3.as_slice_mut().unwrap(),
        ] {
            for v in w.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.presence_w.len()
    }

    pub fn n_classes(&self) -> usize {
        self.pathology_b.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim(), self.n_classes())
    }

    pub fn blocks(&self) -> [&[f64]; 10] {
        [
            self.pathology_w.as_slice().unwrap(),
            self.pathology_b.as_slice().unwrap(),
            self.presence_w.as_slice().unwrap(),
            self.presence_b.as_slice().unwrap(),
            self.box_w1.as_slice().unwrap(),
            self.box_b1.as_slice().unwrap(),
            self.box_w2.as_slice().unwrap(),
            self.box_b2.as_slice().unwrap(),
            self.box_w3.as_slice().unwrap(),
            self.box_b3.as_slice().unwrap(),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.pathology_w.as_slice_mut().unwrap(),
            self.pathology_b.as_slice_mut().unwrap(),
            self.presence_w.as_slice_mut().unwrap(),
            self.presence_b.as_slice_mut().unwrap(),
            self.box_w1.as_slice_mut().unwrap(),
            self.box_b1.as_slice_mut().unwrap(),
            self.box_w2.as_slice_mut().unwrap(),
            self.box_b2.as_slice_mut().unwrap(),
            self.box_w3.as_slice_mut().unwrap(),
            self.box_b3.as_slice_mut().unwrap(),
        ]
    }

    fn block_shapes(&self) -> [Vec<usize>; 10] {
        [
            self.pathology_w.shape().to_vec(),
            self.pathology_b.shape().to_vec(),
            self.presence_w.shape().to_vec(),
            self.presence_b.shape().to_vec(),
            self.box_w1.shape().to_vec(),
            self.box_b1.shape().to_vec(),
            self.box_w2.shape().to_vec(),
            self.box_b2.shape().to_vec(),
            self.box_w3.shape().to_vec(),
            self.box_b3.shape().to_vec(),
        ]
    }

    /// Offsets of each block inside [`HeadParams::to_flat`].
    pub fn block_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut offset = 0;
        self.blocks()
            .iter()
            .map(|b| {
                let r = offset..offset + b.len();
                offset += b.len();
                r
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape {
                what: "flat parameter vector",
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += other`, block by block in a fixed order.
    pub fn accumulate(&mut self, other: &HeadParams) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            for v in block.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Outputs of all heads for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub presence: Array1<f64>,
    pub boxes: Vec<CenterBox>,
    /// `regions x classes`.
    pub pathology: Array2<f64>,
}

struct ForwardCache {
    out: HeadOutput,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    pre2: Array2<f64>,
    h2: Array2<f64>,
    box_out: Array2<f64>,
}

fn check_features(features: &ArrayView2<f64>, params: &HeadParams) -> Result<()> {
    if features.ncols() != params.feature_dim() {
        return Err(Error::Shape {
            what: "feature dimension",
            expected: params.feature_dim(),
            found: features.ncols(),
        });
    }
    Ok(())
}

fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    out += &b.view().insert_axis(Axis(0));
    out
}

fn forward_cached(features: ArrayView2<f64>, params: &HeadParams) -> Result<ForwardCache> {
    check_features(&features, params)?;

    let presence_logit = features.dot(&params.presence_w) + params.presence_b[0];
    let presence = presence_logit.mapv(sigmoid);

    let pathology = linear(&features, &params.pathology_w, &params.pathology_b).mapv(sigmoid);

    let pre1 = linear(&features, &params.box_w1, &params.box_b1);
    let h1 = pre1.mapv(|v| v.max(0.0));
    let pre2 = linear(&h1.view(), &params.box_w2, &params.box_b2);
    let h2 = pre2.mapv(|v| v.max(0.0));
    let box_out = linear(&h2.view(), &params.box_w3, &params.box_b3).mapv(sigmoid);
    let boxes = box_out
        .rows()
        .into_iter()
        .map(|r| CenterBox::new(r[0], r[1], r[2], r[3]))
        .collect();

    Ok(ForwardCache {
        out: HeadOutput {
            presence,
            boxes,
            pathology,
        },
        pre1,
        h1,
        pre2,
        h2,
        box_out,
    })
}

/// Applies every head to each row of `features` (`regions x feature_dim`).
pub fn forward(features: ArrayView2<f64>, params: &HeadParams) -> Result<HeadOutput> {
    forward_cached(features, params).map(|c| c.out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Anatomy-level labels supervise each region directly.
    Loc,
    /// Image-level labels supervise LSE-pooled region probabilities.
    Mil,
    /// Sum of both pathology objectives.
    LocMil,
}

impl TrainMode {
    pub fn uses_loc(self) -> bool {
        matches!(self, TrainMode::Loc | TrainMode::LocMil)
    }

    pub fn uses_mil(self) -> bool {
        matches!(self, TrainMode::Mil | TrainMode::LocMil)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Loc => "loc",
            TrainMode::Mil => "mil",
            TrainMode::LocMil => "loc_mil",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: TrainMode,
    pub asl: AslParams,
    pub detr: DetrLossParams,
    pub lse: LsePoolParams,
    pub weights: CombinedLossWeights,
}

impl LossConfig {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            mode,
            asl: AslParams::default(),
            detr: DetrLossParams::default(),
            lse: LsePoolParams::default(),
            weights: CombinedLossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.asl.validate()?;
        self.detr.validate()?;
        self.lse.validate()?;
        if !(self.weights.asl_weight >= 0.0) {
            return Err(Error::config("ASL weight must be >= 0"));
        }
        Ok(())
    }
}

/// Loss of one sample or the mean over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub detr: DetrLossBreakdown,
    pub loc: f64,
    pub mil: f64,
}

impl LossValue {
    fn add_scaled(&mut self, o: &LossValue, s: f64) {
        self.total += s * o.total;
        self.detr.total += s * o.detr.total;
        self.detr.presence += s * o.detr.presence;
        self.detr.l1 += s * o.detr.l1;
        self.detr.giou += s * o.detr.giou;
        self.loc += s * o.loc;
        self.mil += s * o.mil;
    }
}

/// Checks that `sample` carries what `mode` trains on.
pub fn check_sample(sample: &Sample, params: &HeadParams, mode: TrainMode) -> Result<()> {
    let features = sample.features.as_ref().ok_or_else(|| {
        Error::config(format!(
            "image `{}` has no region features",
            sample.image_id
        ))
    })?;
    check_features(&features.view(), params)?;
    if mode.uses_loc() && sample.anatomy_labels.is_none() {
        return Err(Error::config(format!(
            "mode `{}` needs anatomy-level labels, image `{}` has none",
            mode.as_str(),
            sample.image_id
        )));
    }
    if mode.uses_mil() && sample.image_labels().is_none() {
        return Err(Error::config(format!(
            "mode `{}` needs image-level labels, image `{}` has none",
            mode.as_str(),
            sample.image_id
        )));
    }
    Ok(())
}

/// Loss of one image and its gradient with respect to every parameter.
pub fn sample_loss_and_grad(
    sample: &Sample,
    params: &HeadParams,
    cfg: &LossConfig,
) -> Result<(LossValue, HeadParams)> {
    check_sample(sample, params, cfg.mode)?;
    let features = sample.features.as_ref().expect("checked").view();
    let cache = forward_cached(features, params)?;
    let present = sample.present_mask();
    let n_regions = features.nrows();

    // detection heads
    let preds: Vec<RegionPrediction> = (0..n_regions)
        .map(|i| RegionPrediction {
            presence: cache.out.presence[i],
            bbox: cache.out.boxes[i],
        })
        .collect();
    let targets: Vec<RegionTarget> = (0..n_regions)
        .map(|i| RegionTarget {
            present: present[i],
            bbox: sample.region_boxes[i].to_center(),
        })
        .collect();
    let (detr, detr_grad) = detr_fixed_match_loss_grad(&preds, &targets, &cfg.detr)?;

    // pathology head
    let probs = cache.out.pathology.view();
    let mut dprobs = Array2::<f64>::zeros(probs.dim());
    let mut loc = 0.0;
    let mut mil = 0.0;
    if cfg.mode.uses_loc() {
        let labels = sample.anatomy_labels.as_ref().expect("checked");
        let l = loc_loss(probs, labels.view(), &present, &cfg.asl)?;
        loc = l.value;
        dprobs += &l.grad;
    }
    if cfg.mode.uses_mil() {
        let labels = sample.image_labels().expect("checked");
        let l = mil_loss(probs, labels, &present, &cfg.lse, &cfg.asl)?;
        mil = l.value;
        dprobs += &l.grad;
    }
    let total = combined_loss(detr.total, loc + mil, &cfg.weights);

    let mut grad = params.zeros_like();

    // pathology: dZ = w * dP * P(1-P)
    let w = cfg.weights.asl_weight;
    let dz = ndarray::Zip::from(&dprobs)
        .and(&probs)
        .map_collect(|&g, &p| w * g * p * (1.0 - p));
    grad.pathology_w = dz.t().dot(&features);
    grad.pathology_b = dz.sum_axis(Axis(0));

    // presence
    let dpres: Array1<f64> = (0..n_regions)
        .map(|i| {
            let p = cache.out.presence[i];
            detr_grad.presence[i] * p * (1.0 - p)
        })
        .collect();
    grad.presence_w = features.t().dot(&dpres);
    grad.presence_b[0] = dpres.sum();

    // box MLP
    let mut dout = Array2::<f64>::zeros((n_regions, BOX_OUTPUTS));
    for i in 0..n_regions {
        for k in 0..BOX_OUTPUTS {
            let o = cache.box_out[[i, k]];
            dout[[i, k]] = detr_grad.bbox[i][k] * o * (1.0 - o);
        }
    }
    grad.box_w3 = dout.t().dot(&cache.h2);
    grad.box_b3 = dout.sum_axis(Axis(0));
    let mut dpre2 = dout.dot(&params.box_w3);
    ndarray::Zip::from(&mut dpre2)
        .and(&cache.pre2)
        .for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
    grad.box_w2 = dpre2.t().dot(&cache.h1);
    grad.box_b2 = dpre2.sum_axis(Axis(0));
    let mut dpre1 = dpre2.dot(&params.box_w2);
    ndarray::Zip::from(&mut dpre1)
        .and(&cache.pre1)
        .for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
    grad.box_w1 = dpre1.t().dot(&features);
    grad.box_b1 = dpre1.sum_axis(Axis(0));

    let value = LossValue {
        total,
        detr,
        loc,
        mil,
    };
    if !total.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!(
            "non-finite loss or gradient on image `{}` (loss {total})",
            sample.image_id
        )));
    }
    Ok((value, grad))
}

/// Mean loss and gradient over `batch`. Per-sample work may run in parallel;
/// the reduction always proceeds in batch order.
pub fn batch_loss_and_grad(
    batch: &[&Sample],
    params: &HeadParams,
    cfg: &LossConfig,
) -> Result<(LossValue, HeadParams)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let per_sample: Vec<Result<(LossValue, HeadParams)>> = batch
        .par_iter()
        .map(|s| sample_loss_and_grad(s, params, cfg))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut value = LossValue::default();
    let mut grad = params.zeros_like();
    for r in per_sample {
        let (v, g) = r?;
        value.add_scaled(&v, scale);
        grad.accumulate(&g);
    }
    grad.scale(scale);
    Ok((value, grad))
}

/// Batch loss only.
pub fn batch_loss(batch: &[&Sample], params: &HeadParams, cfg: &LossConfig) -> Result<LossValue> {
    batch_loss_and_grad(batch, params, cfg).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &HeadParams) -> Self {
        let shapes: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self {
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }
}

/// One AdamW update on a flat parameter slice.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    hp: &AdamW,
) {
    let t = step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= hp.lr * hp.weight_decay * params[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Bias-corrected Adam step with weight decay applied directly to the
/// parameters.
pub fn adamw_step(
    params: &mut HeadParams,
    grads: &HeadParams,
    state: &mut OptimizerState,
    hp: &AdamW,
) -> Result<()> {
    if params.num_params() != grads.num_params() {
        return Err(Error::Shape {
            what: "gradient",
            expected: params.num_params(),
            found: grads.num_params(),
        });
    }
    state.step += 1;
    let step = state.step;
    for (((p, g), m), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        adamw_update(p, g, m, v, step, hp);
    }
    Ok(())
}

/// Patience for full-scale runs; the CLI default is the shorter desk value.
pub const FULL_PATIENCE: usize = 20_000;
pub const DESK_PATIENCE: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Stop after this many steps without a new best batch loss.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Optimizer settings per mode: lr 3e-5 / wd 1e-5 with anatomy-level
    /// supervision, lr 1e-4 / wd 1e-4 for MIL.
    pub fn for_mode(mode: TrainMode) -> Self {
        let optimizer = match mode {
            TrainMode::Loc | TrainMode::LocMil => AdamW::new(3e-5, 1e-5),
            TrainMode::Mil => AdamW::new(1e-4, 1e-4),
        };
        Self {
            loss: LossConfig::new(mode),
            optimizer,
            batch_size: 128,
            max_steps: 2_000,
            patience: DESK_PATIENCE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.patience == 0 {
            return Err(Error::config(
                "batch size, max steps and patience must be positive",
            ));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.weight_decay >= 0.0) {
            return Err(Error::config("learning rate and weight decay must be >= 0"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: LossValue,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub history: Vec<HistoryRow>,
    pub stopped_early: bool,
}

/// Shuffled, epoch-based batch indices.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Trains freshly initialized heads on `dataset`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let feature_dim = dataset
        .feature_dim
        .or_else(|| {
            dataset
                .samples
                .iter()
                .find_map(|s| s.features.as_ref().map(|f| f.ncols()))
        })
        .ok_or_else(|| Error::config("dataset has no region features"))?;
    let init = HeadParams::init(feature_dim, dataset.classes.len(), cfg.seed);
    train_from(dataset, cfg, init)
}

pub fn train_from(dataset: &Dataset, cfg: &TrainConfig, init: HeadParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    for s in &dataset.samples {
        check_sample(s, &init, cfg.loss.mode)?;
    }

    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let mut sampler = BatchSampler::new(dataset.len(), cfg.seed ^ 0x5eed_ba7c);
    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut best = f64::INFINITY;
    let mut best_step = 0;
    let mut stopped_early = false;

    for step in 0..cfg.max_steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
        let (loss, grad) = batch_loss_and_grad(&batch, &params, &cfg.loss)?;
        history.push(HistoryRow { step, loss });
        if loss.total < best {
            best = loss.total;
            best_step = step;
        } else if step - best_step >= cfg.patience {
            stopped_early = true;
            break;
        }
        adamw_step(&mut params, &grad, &mut state, &cfg.optimizer)?;
    }
    Ok(TrainOutcome {
        params,
        history,
        stopped_early,
    })
}

/// Mean of `values[lo..hi]`, used to smooth loss curves.
pub fn window_mean(history: &[HistoryRow], lo: usize, hi: usize) -> f64 {
    let hi = hi.min(history.len());
    let slice = &history[lo.min(hi)..hi];
    slice.iter().map(|r| r.loss.total).sum::<f64>() / slice.len().max(1) as f64
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADPDHEAD";
const CHECKPOINT_VERSION: u32 = 1;

/// Trained heads plus the training-class vocabulary they predict.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub classes: Vec<String>,
    pub params: HeadParams,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
}

impl Checkpoint {
    /// Layout (all integers little-endian):
    ///
    /// ```text
    /// magic "ADPDHEAD" | u32 version
    /// u32 class count | per class: u32 len, UTF-8 bytes
    /// u32 tensor count | per tensor: u32 len, UTF-8 name, u32 ndim,
    ///                    u64 dims[ndim], f64 data[prod(dims)] (row-major)
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_u32(w, self.classes.len() as u32)?;
        for c in &self.classes {
            write_str(w, c)?;
        }
        let shapes = self.params.block_shapes();
        write_u32(w, BLOCK_NAMES.len() as u32)?;
        for ((name, shape), data) in BLOCK_NAMES.iter().zip(&shapes).zip(self.params.blocks()) {
            write_str(w, name)?;
            write_u32(w, shape.len() as u32)?;
            for &d in shape {
                write_u64(w, d as u64)?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_classes = read_u32(r)? as usize;
        let classes = (0..n_classes)
            .map(|_| read_str(r))
            .collect::<Result<Vec<_>>>()?;

        let n_tensors = read_u32(r)? as usize;
        if n_tensors != BLOCK_NAMES.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {n_tensors}",
                BLOCK_NAMES.len()
            )));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for expected in BLOCK_NAMES {
            let name = read_str(r)?;
            if name != expected {
                return Err(Error::Checkpoint(format!(
                    "expected tensor `{expected}`, found `{name}`"
                )));
            }
            let ndim = read_u32(r)? as usize;
            let dims = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push((dims, data));
        }

        let feature_dim = tensors[2].0[0];
        let mut params = HeadParams::zeros(feature_dim, n_classes);
        let shapes = params.block_shapes();
        for (((dims, data), shape), (dst, name)) in tensors
            .iter()
            .zip(&shapes)
            .zip(params.blocks_mut().into_iter().zip(BLOCK_NAMES))
        {
            if dims != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {dims:?}, expected {shape:?}"
                )));
            }
            dst.copy_from_slice(data);
        }
        Ok(Self { classes, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
