//! Seeded finite-difference suite over every loss and the full head backward.
//!
//! Each trial draws a random point away from the kinks of the loss (ASL clip,
//! GIoU coordinate ties, corner clamping, ReLU boundaries) so central
//! differences are meaningful, then compares analytic and numeric gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{Sample, SampleGt};
use crate::error::Result;
use crate::geometry::{BBox, CenterBox};
use crate::head::{sample_loss_and_grad, HeadParams, LossConfig, TrainMode};
use crate::losses::{
    asl, asl_grad, detr_fixed_match_loss, detr_fixed_match_loss_grad, finite_difference_check,
    loc_loss, lse_pool, lse_pool_grad, mil_loss, AslParams, DetrLossParams, LsePoolParams,
    RegionPrediction, RegionTarget, FD_STEP,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const LOSS_NAMES: [&str; 6] = [
    "asl",
    "lse_pool",
    "detr",
    "loc_loss",
    "mil_loss",
    "head_backward",
];

/// Distance kept from any kink of a piecewise-smooth loss.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub trials: usize,
    /// Worst relative error over all trials.
    pub max_rel_error: f64,
    pub failures: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn summarize(name: &'static str, errors: &[f64], tol: f64) -> SuiteResult {
    SuiteResult {
        name,
        trials: errors.len(),
        max_rel_error: errors.iter().copied().fold(0.0, f64::max),
        failures: errors.iter().filter(|e| !(**e <= tol)).count(),
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_asl(rng: &mut ChaCha8Rng) -> AslParams {
    AslParams {
        gamma_pos: if rng.random_bool(0.5) {
            0.0
        } else {
            rng.random_range(0.0..2.0)
        },
        gamma_neg: rng.random_range(0.0..5.0),
        clip: if rng.random_bool(0.5) { 0.0 } else { 0.05 },
        eps: 1e-8,
    }
}

/// A probability at least `KINK_MARGIN` away from the ASL clip (and, with a
/// fractional focusing exponent, from the region where it blows up).
fn smooth_prob(rng: &mut ChaCha8Rng, asl: &AslParams) -> f64 {
    loop {
        let p = rng.random_range(0.02..0.98);
        if (p - asl.clip).abs() > 10.0 * KINK_MARGIN {
            return p;
        }
    }
}

fn check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> Result<f64> {
    let report = finite_difference_check(f, x, analytic, FD_STEP)?;
    Ok(if report.nonfinite.is_empty() {
        report.max_rel_error
    } else {
        f64::INFINITY
    })
}

pub fn check_asl(trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_for(seed, 0);
    (0..trials)
        .map(|_| {
            let params = random_asl(&mut rng);
            let positive = rng.random_bool(0.5);
            let p = smooth_prob(&mut rng, &params);
            check(
                |x| asl(x[0], positive, &params),
                &[p],
                &[asl_grad(p, positive, &params)],
            )
        })
        .collect()
}

pub fn check_lse(trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_for(seed, 1);
    (0..trials)
        .map(|_| {
            let n = rng.random_range(1..=8);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let params = LsePoolParams {
                r: rng.random_range(0.5..20.0),
            };
            let g = lse_pool_grad(&x, &params)?;
            check(|v| lse_pool(v, &params).expect("non-empty"), &x, &g)
        })
        .collect()
}

/// Corner boxes strictly inside the unit square whose coordinates stay
/// `KINK_MARGIN` apart from the target's on each axis.
fn detr_instance(rng: &mut ChaCha8Rng) -> (Vec<RegionPrediction>, Vec<RegionTarget>) {
    let center = |rng: &mut ChaCha8Rng| {
        CenterBox::new(
            rng.random_range(0.3..0.7),
            rng.random_range(0.3..0.7),
            rng.random_range(0.05..0.5),
            rng.random_range(0.05..0.5),
        )
    };
    let n = rng.random_range(1..=5);
    let mut preds = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    while preds.len() < n {
        let p = center(rng);
        let t = center(rng);
        let (a, b) = (p.to_corner().coords(), t.to_corner().coords());
        let tie = [0, 2]
            .iter()
            .flat_map(|&i| [(i, 0), (i, 2)])
            .chain([1, 3].iter().flat_map(|&i| [(i, 1), (i, 3)]))
            .any(|(i, j)| (a[i] - b[j]).abs() < KINK_MARGIN);
        if tie {
            continue;
        }
        preds.push(RegionPrediction {
            presence: rng.random_range(0.02..0.98),
            bbox: p,
        });
        targets.push(RegionTarget {
            present: rng.random_bool(0.7),
            bbox: t,
        });
    }
    (preds, targets)
}

fn detr_flat(preds: &[RegionPrediction]) -> Vec<f64> {
    preds
        .iter()
        .flat_map(|p| {
            let b = p.bbox.to_array();
            [p.presence, b[0], b[1], b[2], b[3]]
        })
        .collect()
}

fn detr_unflat(x: &[f64]) -> Vec<RegionPrediction> {
    x.chunks(5)
        .map(|c| RegionPrediction {
            presence: c[0],
            bbox: CenterBox::new(c[1], c[2], c[3], c[4]),
        })
        .collect()
}

pub fn check_detr(trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_for(seed, 2);
    let params = DetrLossParams::default();
    (0..trials)
        .map(|_| {
            let (preds, targets) = detr_instance(&mut rng);
            let (_, g) = detr_fixed_match_loss_grad(&preds, &targets, &params)?;
            let analytic: Vec<f64> = g
                .presence
                .iter()
                .zip(&g.bbox)
                .flat_map(|(p, b)| [*p, b[0], b[1], b[2], b[3]])
                .collect();
            check(
                |x| {
                    detr_fixed_match_loss(&detr_unflat(x), &targets, &params)
                        .expect("shapes agree")
                        .total
                },
                &detr_flat(&preds),
                &analytic,
            )
        })
        .collect()
}

fn prob_matrix(rng: &mut ChaCha8Rng, n: usize, c: usize, asl: &AslParams) -> Array2<f64> {
    Array2::from_shape_fn((n, c), |_| smooth_prob(rng, asl))
}

fn present_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let i = rng.random_range(0..n);
    m[i] = true;
    m
}

fn matrix_check(
    probs: &Array2<f64>,
    analytic: &Array2<f64>,
    f: impl Fn(ArrayView2<f64>) -> f64,
) -> Result<f64> {
    let dim = probs.dim();
    let x: Vec<f64> = probs.iter().copied().collect();
    let g: Vec<f64> = analytic.iter().copied().collect();
    check(
        |v| f(ArrayView2::from_shape(dim, v).expect("same length")),
        &x,
        &g,
    )
}

pub fn check_loc(trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_for(seed, 3);
    (0..trials)
        .map(|_| {
            let asl = random_asl(&mut rng);
            let (n, c) = (rng.random_range(1..=6), rng.random_range(1..=5));
            let probs = prob_matrix(&mut rng, n, c, &asl);
            let labels = Array2::from_shape_fn((n, c), |_| rng.random_bool(0.3));
            let present = present_mask(&mut rng, n);
            let g = loc_loss(probs.view(), labels.view(), &present, &asl)?;
            matrix_check(&probs, &g.grad, |p| {
                loc_loss(p, labels.view(), &present, &asl)
                    .expect("shapes agree")
                    .value
            })
        })
        .collect()
}

pub fn check_mil(trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_for(seed, 4);
    let mut out = Vec::with_capacity(trials);
    while out.len() < trials {
        let asl = random_asl(&mut rng);
        let lse = LsePoolParams {
            r: rng.random_range(1.0..15.0),
        };
        let (n, c) = (rng.random_range(1..=6), rng.random_range(1..=5));
        let probs = prob_matrix(&mut rng, n, c, &asl);
        let labels: Vec<bool> = (0..c).map(|_| rng.random_bool(0.5)).collect();
        let present = present_mask(&mut rng, n);
        // the pooled probability must itself avoid the ASL clip
        let near_clip = (0..c).any(|k| {
            let bag: Vec<f64> = (0..n)
                .filter(|&i| present[i])
                .map(|i| probs[[i, k]])
                .collect();
            let pooled = lse_pool(&bag, &lse).expect("non-empty");
            (pooled - asl.clip).abs() < 10.0 * KINK_MARGIN
        });
        if near_clip {
            continue;
        }
        let g = mil_loss(probs.view(), &labels, &present, &lse, &asl)?;
        out.push(matrix_check(&probs, &g.grad, |p| {
            mil_loss(p, &labels, &present, &lse, &asl)
                .expect("shapes agree")
                .value
        })?);
    }
    Ok(out)
}

fn perturbed_params(rng: &mut ChaCha8Rng, feature_dim: usize, n_classes: usize) -> HeadParams {
    let mut p = HeadParams::init(feature_dim, n_classes, rng.random());
    let flat: Vec<f64> = p
        .to_flat()
        .iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    p.set_flat(&flat).expect("same length");
    p
}

/// Smallest distance of any box-MLP pre-activation from the ReLU hinge, and
/// of any predicted corner from the unit-square boundary.
fn head_kink_distance(features: &Array2<f64>, p: &HeadParams) -> f64 {
    let lin = |x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>| {
        x.dot(&w.t()) + b.view().insert_axis(Axis(0))
    };
    let pre1 = lin(features, &p.box_w1, &p.box_b1);
    let pre2 = lin(&pre1.mapv(|v| v.max(0.0)), &p.box_w2, &p.box_b2);
    let out =
        lin(&pre2.mapv(|v| v.max(0.0)), &p.box_w3, &p.box_b3).mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let hinge = pre1
        .iter()
        .chain(pre2.iter())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let boundary = out
        .rows()
        .into_iter()
        .flat_map(|r| {
            let b = CenterBox::new(r[0], r[1], r[2], r[3]);
            [
                b.cx - b.w / 2.0,
                b.cx + b.w / 2.0 - 1.0,
                b.cy - b.h / 2.0,
                b.cy + b.h / 2.0 - 1.0,
            ]
        })
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    hinge.min(boundary)
}

fn head_instance(rng: &mut ChaCha8Rng) -> (Sample, HeadParams) {
    loop {
        let (f, c, n) = (
            rng.random_range(2..=6),
            rng.random_range(1..=4),
            rng.random_range(1..=5),
        );
        let params = perturbed_params(rng, f, c);
        let features = Array2::from_shape_fn((n, f), |_| rng.random_range(-1.0..1.0));
        if head_kink_distance(&features, &params) < KINK_MARGIN {
            continue;
        }
        let present = present_mask(rng, n);
        let labels = Array2::from_shape_fn((n, c), |(i, _)| present[i] && rng.random_bool(0.4));
        let image_labels = (0..c)
            .map(|k| labels.column(k).iter().any(|&l| l))
            .collect();
        let region_boxes = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.05..0.5), rng.random_range(0.05..0.5));
                let (w, h) = (rng.random_range(0.1..0.45), rng.random_range(0.1..0.45));
                BBox::new(x, y, x + w, y + h).expect("inside the unit square")
            })
            .collect();
        let sample = Sample {
            image_id: "gradcheck".into(),
            region_boxes,
            presence: present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
            listed: vec![true; n],
            features: Some(features),
            pathology_probs: None,
            anatomy_labels: Some(labels),
            gt: Some(SampleGt {
                boxes: Vec::new(),
                image_labels,
            }),
        };
        // predicted probabilities (and MIL pooled values) must avoid the clip
        let out = crate::head::forward(sample.features.as_ref().unwrap().view(), &params)
            .expect("shapes agree");
        if out
            .pathology
            .iter()
            .any(|&p| (p - 0.05).abs() < 10.0 * KINK_MARGIN)
        {
            continue;
        }
        return (sample, params);
    }
}

/// Worst per-block relative error of the full head gradient; modes cycle
/// through loc, mil and loc+mil, with the pathology loss weighted 1 so its
/// blocks are checked at full scale.
pub fn check_head(trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_for(seed, 5);
    let modes = [TrainMode::Loc, TrainMode::Mil, TrainMode::LocMil];
    let mut out = Vec::with_capacity(trials);
    while out.len() < trials {
        let (sample, params) = head_instance(&mut rng);
        let mut cfg = LossConfig::new(modes[out.len() % 3]);
        cfg.weights.asl_weight = 1.0;
        if cfg.mode.uses_mil() {
            let f = sample.features.as_ref().unwrap().view();
            let probs = crate::head::forward(f, &params)?.pathology;
            let present = sample.present_mask();
            let pooled_near_clip = (0..probs.ncols()).any(|k| {
                let bag: Vec<f64> = (0..probs.nrows())
                    .filter(|&i| present[i])
                    .map(|i| probs[[i, k]])
                    .collect();
                (lse_pool(&bag, &cfg.lse).expect("non-empty") - cfg.asl.clip).abs()
                    < 10.0 * KINK_MARGIN
            });
            if pooled_near_clip {
                continue;
            }
        }
        let (_, grad) = sample_loss_and_grad(&sample, &params, &cfg)?;
        let report = finite_difference_check(
            |v| {
                let mut q = params.clone();
                q.set_flat(v).expect("same length");
                sample_loss_and_grad(&sample, &q, &cfg)
                    .map(|(l, _)| l.total)
                    .unwrap_or(f64::NAN)
            },
            &params.to_flat(),
            &grad.to_flat(),
            FD_STEP,
        )?;
        let err = if report.nonfinite.is_empty() {
            params
                .block_ranges()
                .into_iter()
                .map(|r| report.rel_error_over(r))
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        out.push(err);
    }
    Ok(out)
}

/// Runs every suite with `trials` points each.
pub fn run_suite(trials: usize, seed: u64, tol: f64) -> Result<Vec<SuiteResult>> {
    type Check = fn(usize, u64) -> Result<Vec<f64>>;
    let runs: [(&str, Check); 6] = [
        ("asl", check_asl),
        ("lse_pool", check_lse),
        ("detr", check_detr),
        ("loc_loss", check_loc),
        ("mil_loss", check_mil),
        ("head_backward", check_head),
    ];
    runs.iter()
        .map(|(name, f)| Ok(summarize(name, &f(trials, seed)?, tol)))
        .collect()
}
