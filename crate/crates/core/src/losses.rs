//! Training objectives with analytic gradients.
//!
//! * [`asl`]: asymmetric loss on a single probability/label pair.
//! * [`lse_pool`]: log-sum-exp pooling of region probabilities into an image
//!   probability (the MIL aggregation).
//! * [`detr_fixed_match_loss`]: region presence + box regression where region
//!   `i` of the prediction is always matched to region `i` of the target.
//! * [`loc_loss`] / [`mil_loss`]: anatomy-level and image-level supervision of
//!   the region pathology probabilities.
//!
//! Every loss exposes its gradient, and [`finite_difference_check`] verifies
//! them numerically.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_to_corner, giou_gradient, CenterBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Probability margin subtracted from negatives before the loss.
    pub clip: f64,
    /// Floor applied to every log argument.
    pub eps: f64,
}

impl Default for AslParams {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip: 0.05,
            eps: 1e-8,
        }
    }
}

impl AslParams {
    /// Plain binary cross-entropy.
    pub fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            clip: 0.0,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::config("ASL focusing exponents must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.clip) {
            return Err(Error::config("ASL clip must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("ASL probability floor must be > 0"));
        }
        Ok(())
    }

    /// False when `p` sits within `h` of a kink of the loss (the negative
    /// clip, or the log floor).
    pub fn is_smooth_at(&self, p: f64, positive: bool, h: f64) -> bool {
        if positive {
            (p - self.eps).abs() > h
        } else {
            let near_clip = self.clip > 0.0 && (p - self.clip).abs() <= h;
            let near_floor = ((1.0 - (p - self.clip)) - self.eps).abs() <= h;
            !(near_clip || near_floor)
        }
    }
}

/// `x^g` and its derivative, with `0^0 = 1` and a zero derivative for `g = 0`.
fn focus(x: f64, g: f64) -> (f64, f64) {
    if g == 0.0 {
        (1.0, 0.0)
    } else if g == 1.0 {
        (x, 1.0)
    } else {
        (x.powf(g), g * x.powf(g - 1.0))
    }
}

/// `-ln(max(v, eps))` and its derivative in `v`.
fn neg_log(v: f64, eps: f64) -> (f64, f64) {
    if v > eps {
        (-v.ln(), -1.0 / v)
    } else {
        (-eps.ln(), 0.0)
    }
}

fn asl_value_grad(p: f64, positive: bool, params: &AslParams) -> (f64, f64) {
    if positive {
        let (w, dw) = focus(1.0 - p, params.gamma_pos);
        let (l, dl) = neg_log(p, params.eps);
        // d/dp of w(1-p) is -dw
        (w * l, -dw * l + w * dl)
    } else {
        let shifted = p - params.clip;
        if shifted <= 0.0 {
            return (0.0, 0.0);
        }
        let (w, dw) = focus(shifted, params.gamma_neg);
        let (l, dl) = neg_log(1.0 - shifted, params.eps);
        (w * l, dw * l - w * dl)
    }
}

/// Asymmetric loss of probability `p` against a binary target.
///
/// Positives: `(1 - p)^gamma_pos * -ln(p)`. Negatives use the shifted
/// probability `p_m = max(p - clip, 0)`: `p_m^gamma_neg * -ln(1 - p_m)`.
pub fn asl(p: f64, positive: bool, params: &AslParams) -> f64 {
    asl_value_grad(p, positive, params).0
}

/// Derivative of [`asl`] in `p`.
pub fn asl_grad(p: f64, positive: bool, params: &AslParams) -> f64 {
    asl_value_grad(p, positive, params).1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsePoolParams {
    /// Sharpness; larger values approach max pooling.
    pub r: f64,
}

impl Default for LsePoolParams {
    fn default() -> Self {
        Self { r: 10.0 }
    }
}

impl LsePoolParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::config("LSE sharpness must be positive"));
        }
        Ok(())
    }
}

/// `(1/r) ln((1/N) sum exp(r x_i))`, evaluated with the maximum factored out.
pub fn lse_pool(values: &[f64], params: &LsePoolParams) -> Result<f64> {
    let (value, _) = lse_pool_impl(values, params, false)?;
    Ok(value)
}

/// Gradient of [`lse_pool`]: `softmax(r x)`.
pub fn lse_pool_grad(values: &[f64], params: &LsePoolParams) -> Result<Vec<f64>> {
    let (_, grad) = lse_pool_impl(values, params, true)?;
    Ok(grad)
}

fn lse_pool_impl(
    values: &[f64],
    params: &LsePoolParams,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if values.is_empty() {
        return Err(Error::arg("LSE pooling needs at least one value"));
    }
    let r = params.r;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (r * (v - max)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let value = max + (sum / values.len() as f64).ln() / r;
    let grad = if want_grad {
        exps.iter().map(|e| e / sum).collect()
    } else {
        Vec::new()
    };
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetrLossParams {
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub presence_weight: f64,
    /// Floor on the presence cross-entropy log arguments.
    pub eps: f64,
}

impl Default for DetrLossParams {
    fn default() -> Self {
        Self {
            l1_weight: 5.0,
            giou_weight: 2.0,
            presence_weight: 1.0,
            eps: 1e-8,
        }
    }
}

impl DetrLossParams {
    pub fn validate(&self) -> Result<()> {
        if [self.l1_weight, self.giou_weight, self.presence_weight]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::config("detection loss weights must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionPrediction {
    pub presence: f64,
    pub bbox: CenterBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionTarget {
    pub present: bool,
    pub bbox: CenterBox,
}

/// Weighted components of the detection loss; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetrLossBreakdown {
    pub total: f64,
    pub presence: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Gradient of the detection loss with respect to each region's presence
/// probability and center-box parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DetrGradient {
    pub presence: Vec<f64>,
    pub bbox: Vec<[f64; 4]>,
}

fn bce_value_grad(p: f64, positive: bool, eps: f64) -> (f64, f64) {
    if positive {
        neg_log(p, eps)
    } else {
        let (l, dl) = neg_log(1.0 - p, eps);
        (l, -dl)
    }
}

/// Jacobian of the clamped corner box with respect to `(cx, cy, w, h)`.
/// Row `k` holds the partials of corner coordinate `k`.
fn corner_jacobian(c: &CenterBox) -> [[f64; 4]; 4] {
    let inside = |v: f64| (0.0..=1.0).contains(&v);
    let w_active = if c.w > 0.0 { 1.0 } else { 0.0 };
    let h_active = if c.h > 0.0 { 1.0 } else { 0.0 };
    let (w, h) = (c.w.max(0.0), c.h.max(0.0));
    let x1 = c.cx - 0.5 * w;
    let y1 = c.cy - 0.5 * h;
    let x2 = c.cx + 0.5 * w;
    let y2 = c.cy + 0.5 * h;
    let mut j = [[0.0; 4]; 4];
    if inside(x1) {
        j[0] = [1.0, 0.0, -0.5 * w_active, 0.0];
    }
    if inside(y1) {
        j[1] = [0.0, 1.0, 0.0, -0.5 * h_active];
    }
    if inside(x2) {
        j[2] = [1.0, 0.0, 0.5 * w_active, 0.0];
    }
    if inside(y2) {
        j[3] = [0.0, 1.0, 0.0, 0.5 * h_active];
    }
    j
}

fn check_detr_shapes(pred: &[RegionPrediction], target: &[RegionTarget]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape {
            what: "region predictions vs targets",
            expected: target.len(),
            found: pred.len(),
        });
    }
    Ok(())
}

/// Detection loss under the fixed region-to-query assignment.
///
/// `presence_weight * mean_i BCE(presence_i)` over every region, plus, over
/// the regions present in the target, the mean of
/// `l1_weight * |pred - target|_1 + giou_weight * (1 - GIoU)`. The L1 term is
/// taken on center/size parameters and GIoU on corner boxes.
pub fn detr_fixed_match_loss(
    pred: &[RegionPrediction],
    target: &[RegionTarget],
    params: &DetrLossParams,
) -> Result<DetrLossBreakdown> {
    detr_fixed_match_loss_grad(pred, target, params).map(|(l, _)| l)
}

pub fn detr_fixed_match_loss_grad(
    pred: &[RegionPrediction],
    target: &[RegionTarget],
    params: &DetrLossParams,
) -> Result<(DetrLossBreakdown, DetrGradient)> {
    check_detr_shapes(pred, target)?;
    let n = pred.len();
    let mut grad = DetrGradient {
        presence: vec![0.0; n],
        bbox: vec![[0.0; 4]; n],
    };
    if n == 0 {
        return Ok((DetrLossBreakdown::default(), grad));
    }

    let mut presence = 0.0;
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        let (l, dl) = bce_value_grad(p.presence, t.present, params.eps);
        presence += l;
        grad.presence[i] = params.presence_weight * dl / n as f64;
    }
    presence *= params.presence_weight / n as f64;

    let n_present = target.iter().filter(|t| t.present).count();
    let (mut l1, mut giou_term) = (0.0, 0.0);
    if n_present > 0 {
        let scale = 1.0 / n_present as f64;
        for (i, (p, t)) in pred.iter().zip(target).enumerate() {
            if !t.present {
                continue;
            }
            let pa = p.bbox.to_array();
            let ta = t.bbox.to_array();
            for k in 0..4 {
                let d = pa[k] - ta[k];
                l1 += d.abs();
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad.bbox[i][k] += params.l1_weight * scale * sign;
            }

            let pc = center_to_corner(&p.bbox);
            let tc = center_to_corner(&t.bbox);
            let g = giou_gradient(&pc, &tc)?;
            giou_term += 1.0 - g.value;
            let jac = corner_jacobian(&p.bbox);
            for (corner, row) in jac.iter().enumerate() {
                for (k, r) in row.iter().enumerate() {
                    grad.bbox[i][k] -= params.giou_weight * scale * g.grad[corner] * r;
                }
            }
        }
        l1 *= params.l1_weight * scale;
        giou_term *= params.giou_weight * scale;
    }

    let breakdown = DetrLossBreakdown {
        total: presence + l1 + giou_term,
        presence,
        l1,
        giou: giou_term,
    };
    Ok((breakdown, grad))
}

/// Scalar loss together with its gradient in the region x class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Set when the loss was defined as zero because no region was present.
    pub no_present_regions: bool,
}

fn check_matrix_shapes(probs: &ArrayView2<f64>, present: &[bool]) -> Result<()> {
    if probs.nrows() != present.len() {
        return Err(Error::Shape {
            what: "presence mask",
            expected: probs.nrows(),
            found: present.len(),
        });
    }
    Ok(())
}

/// Anatomy-level loss: mean ASL over every (present region, class) pair.
pub fn loc_loss(
    probs: ArrayView2<f64>,
    labels: ArrayView2<bool>,
    present: &[bool],
    params: &AslParams,
) -> Result<LossGrad> {
    check_matrix_shapes(&probs, present)?;
    if probs.dim() != labels.dim() {
        return Err(Error::Shape {
            what: "anatomy label matrix",
            expected: probs.len(),
            found: labels.len(),
        });
    }
    let mut grad = Array2::zeros(probs.dim());
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present == 0 || probs.ncols() == 0 {
        return Ok(LossGrad {
            value: 0.0,
            grad,
            no_present_regions: true,
        });
    }
    let scale = 1.0 / (n_present * probs.ncols()) as f64;
    let mut value = 0.0;
    for (i, _) in present.iter().enumerate().filter(|(_, &p)| p) {
        for c in 0..probs.ncols() {
            let (l, dl) = asl_value_grad(probs[[i, c]], labels[[i, c]], params);
            value += l;
            grad[[i, c]] = dl * scale;
        }
    }
    Ok(LossGrad {
        value: value * scale,
        grad,
        no_present_regions: false,
    })
}

/// Image-level loss: per class, LSE-pool the probabilities of the present
/// regions, score the pooled probability against the image label with ASL,
/// and average over classes.
pub fn mil_loss(
    probs: ArrayView2<f64>,
    image_labels: &[bool],
    present: &[bool],
    lse: &LsePoolParams,
    params: &AslParams,
) -> Result<LossGrad> {
    check_matrix_shapes(&probs, present)?;
    if image_labels.len() != probs.ncols() {
        return Err(Error::Shape {
            what: "image label vector",
            expected: probs.ncols(),
            found: image_labels.len(),
        });
    }
    let rows: Vec<usize> = (0..present.len()).filter(|&i| present[i]).collect();
    if rows.is_empty() {
        return Err(Error::arg("MIL loss needs at least one present region"));
    }
    let mut grad = Array2::zeros(probs.dim());
    if probs.ncols() == 0 {
        return Ok(LossGrad {
            value: 0.0,
            grad,
            no_present_regions: false,
        });
    }
    let scale = 1.0 / probs.ncols() as f64;
    let mut value = 0.0;
    let mut bag = Vec::with_capacity(rows.len());
    for c in 0..probs.ncols() {
        bag.clear();
        bag.extend(rows.iter().map(|&i| probs[[i, c]]));
        let (pooled, weights) = lse_pool_impl(&bag, lse, true)?;
        let (l, dl) = asl_value_grad(pooled, image_labels[c], params);
        value += l;
        for (&i, w) in rows.iter().zip(&weights) {
            grad[[i, c]] = dl * w * scale;
        }
    }
    Ok(LossGrad {
        value: value * scale,
        grad,
        no_present_regions: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedLossWeights {
    pub asl_weight: f64,
}

impl Default for CombinedLossWeights {
    fn default() -> Self {
        Self { asl_weight: 0.01 }
    }
}

/// `detr + asl_weight * asl_like`. For the combined anatomy + MIL objective
/// pass the sum of both losses as `asl_like`.
pub fn combined_loss(detr: f64, asl_like: f64, w: &CombinedLossWeights) -> f64 {
    detr + w.asl_weight * asl_like
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// `max_i |a_i - n_i| / max(|a|_inf, |n|_inf, 1e-12)`.
    pub max_rel_error: f64,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-12)`. Diagnostic only:
    /// components far below the difference quotient's roundoff (about
    /// `1e-16 * |f| / h`) make this figure meaningless.
    pub max_coord_rel_error: f64,
    /// Coordinate with the largest absolute discrepancy.
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates where a perturbed evaluation was not finite.
    pub nonfinite: Vec<usize>,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.nonfinite.is_empty() && self.max_rel_error <= tol
    }

    /// Relative error restricted to the coordinates in `range`, normalized by
    /// the largest gradient magnitude inside that range.
    pub fn rel_error_over(&self, range: std::ops::Range<usize>) -> f64 {
        rel_error(&self.analytic[range.clone()], &self.numeric[range])
    }
}

const REL_FLOOR: f64 = 1e-12;

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(REL_FLOOR, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn finite_difference_check<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<FdReport>
where
    F: Fn(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(Error::Shape {
            what: "analytic gradient",
            expected: x.len(),
            found: analytic.len(),
        });
    }
    let mut point = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    let mut nonfinite = Vec::new();
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let up = f(&point);
        point[i] = x[i] - h;
        let down = f(&point);
        point[i] = x[i];
        let n = (up - down) / (2.0 * h);
        if !n.is_finite() || !analytic[i].is_finite() {
            nonfinite.push(i);
        }
        numeric.push(n);
    }

    let finite = |i: &usize| !nonfinite.contains(i);
    let idx: Vec<usize> = (0..x.len()).filter(finite).collect();
    let a: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    let n: Vec<f64> = idx.iter().map(|&i| numeric[i]).collect();
    let max_rel_error = rel_error(&a, &n);

    let mut max_coord_rel_error: f64 = 0.0;
    let mut worst: Option<(usize, f64)> = None;
    for &i in &idx {
        let diff = (analytic[i] - numeric[i]).abs();
        let denom = analytic[i].abs().max(numeric[i].abs()).max(REL_FLOOR);
        max_coord_rel_error = max_coord_rel_error.max(diff / denom);
        if worst.is_none_or(|(_, d)| diff > d) {
            worst = Some((i, diff));
        }
    }
    Ok(FdReport {
        max_rel_error,
        max_coord_rel_error,
        worst_index: worst.map(|(i, _)| i),
        analytic: analytic.to_vec(),
        numeric,
        nonfinite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn asl_reduces_to_bce() {
        let v = asl(0.5, true, &AslParams::bce());
        assert!((v - -(0.5f64.ln())).abs() < 1e-15);
        assert!((asl(0.3, false, &AslParams::bce()) - -(0.7f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn asl_clip_zero() {
        let p = AslParams::default();
        assert_eq!(asl(0.05, false, &p), 0.0);
        assert_eq!(asl(0.01, false, &p), 0.0);
        assert_eq!(asl_grad(0.01, false, &p), 0.0);
        assert!(!p.is_smooth_at(0.05, false, FD_STEP));
    }

    #[test]
    fn asl_perfect_positive() {
        assert_eq!(asl(1.0, true, &AslParams::default()), 0.0);
    }

    #[test]
    fn asl_log_floor() {
        let p = AslParams::bce();
        assert!((asl(0.0, true, &p) - -(1e-8f64.ln())).abs() < 1e-12);
        assert_eq!(asl_grad(0.0, true, &p), 0.0);
    }

    #[test]
    fn asl_negative_focusing() {
        let p = AslParams::default();
        let pm: f64 = 0.6 - 0.05;
        let expected = pm.powi(4) * -(1.0 - pm).ln();
        assert!((asl(0.6, false, &p) - expected).abs() < 1e-15);
    }

    #[test]
    fn lse_examples() {
        let params = LsePoolParams::default();
        for r in [0.1, 1.0, 10.0, 100.0] {
            let v = lse_pool(&[0.3, 0.3, 0.3], &LsePoolParams { r }).unwrap();
            assert!((v - 0.3).abs() < 1e-15);
        }
        // (1/10) ln((e^9 + e^1)/2), evaluated with mpmath at 50 digits
        let v = lse_pool(&[0.9, 0.1], &params).unwrap();
        assert!((v - 0.830_718_822_581_295).abs() < 1e-12, "{v}");
        let g = lse_pool_grad(&[0.9, 0.1, 0.4], &params).unwrap();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(g.iter().all(|&w| w > 0.0));
        assert!(lse_pool(&[], &params).is_err());
    }

    #[test]
    fn lse_overflow_safe() {
        let v = lse_pool(&[1000.0, 999.0], &LsePoolParams { r: 10.0 }).unwrap();
        assert!(v.is_finite() && v < 1000.0 && v > 999.0);
    }

    fn cb(a: [f64; 4]) -> CenterBox {
        CenterBox::from_array(a)
    }

    #[test]
    fn detr_identity_boxes() {
        let pred = vec![
            RegionPrediction {
                presence: 0.7,
                bbox: cb([0.3, 0.4, 0.2, 0.3]),
            },
            RegionPrediction {
                presence: 0.2,
                bbox: cb([0.6, 0.6, 0.1, 0.1]),
            },
        ];
        let target = vec![
            RegionTarget {
                present: true,
                bbox: cb([0.3, 0.4, 0.2, 0.3]),
            },
            RegionTarget {
                present: false,
                bbox: cb([0.1, 0.1, 0.1, 0.1]),
            },
        ];
        let l = detr_fixed_match_loss(&pred, &target, &DetrLossParams::default()).unwrap();
        assert_eq!(l.l1, 0.0);
        assert!(l.giou.abs() < 1e-15);
        let expected_presence = (-(0.7f64.ln()) - (0.8f64.ln())) / 2.0;
        assert!((l.presence - expected_presence).abs() < 1e-15);
        assert_eq!(l.total, l.presence + l.l1 + l.giou);
    }

    #[test]
    fn detr_presence_limit() {
        let pred = vec![
            RegionPrediction {
                presence: 1.0 - 1e-12,
                bbox: cb([0.3, 0.4, 0.2, 0.3]),
            },
            RegionPrediction {
                presence: 1e-12,
                bbox: cb([0.6, 0.6, 0.1, 0.1]),
            },
        ];
        let target = vec![
            RegionTarget {
                present: true,
                bbox: cb([0.3, 0.4, 0.2, 0.3]),
            },
            RegionTarget {
                present: false,
                bbox: cb([0.6, 0.6, 0.1, 0.1]),
            },
        ];
        let l = detr_fixed_match_loss(&pred, &target, &DetrLossParams::default()).unwrap();
        assert!(l.presence < 1e-11);
    }

    #[test]
    fn detr_no_present_regions_skips_boxes() {
        let pred = vec![RegionPrediction {
            presence: 0.4,
            bbox: cb([0.3, 0.4, 0.2, 0.3]),
        }];
        let target = vec![RegionTarget {
            present: false,
            bbox: cb([0.7, 0.7, 0.2, 0.2]),
        }];
        let (l, g) =
            detr_fixed_match_loss_grad(&pred, &target, &DetrLossParams::default()).unwrap();
        assert_eq!(l.l1 + l.giou, 0.0);
        assert_eq!(g.bbox[0], [0.0; 4]);
        assert!(detr_fixed_match_loss(&pred, &[], &DetrLossParams::default()).is_err());
    }

    #[test]
    fn loc_loss_single_pair_equals_asl() {
        let p = AslParams::default();
        let probs = array![[0.3]];
        let labels = array![[true]];
        let l = loc_loss(probs.view(), labels.view(), &[true], &p).unwrap();
        assert_eq!(l.value, asl(0.3, true, &p));
        assert_eq!(l.grad[[0, 0]], asl_grad(0.3, true, &p));
    }

    #[test]
    fn loc_loss_hand_average() {
        let p = AslParams::default();
        let probs = array![[0.81, 0.12], [0.33, 0.64]];
        let labels = array![[true, false], [false, true]];
        let l = loc_loss(probs.view(), labels.view(), &[true, true], &p).unwrap();
        let expected = (asl(0.81, true, &p)
            + asl(0.12, false, &p)
            + asl(0.33, false, &p)
            + asl(0.64, true, &p))
            / 4.0;
        assert!((l.value - expected).abs() < 1e-15);
    }

    #[test]
    fn loc_loss_perfect_is_zero() {
        let p = AslParams::default();
        let probs = array![[1.0, 0.02], [0.04, 1.0]];
        let labels = array![[true, false], [false, true]];
        let l = loc_loss(probs.view(), labels.view(), &[true, true], &p).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn loc_loss_no_present_regions() {
        let probs = array![[0.5]];
        let labels = array![[true]];
        let l = loc_loss(probs.view(), labels.view(), &[false], &AslParams::default()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.no_present_regions);
    }

    #[test]
    fn loc_loss_ignores_absent_rows() {
        let p = AslParams::default();
        let probs = array![[0.3], [0.9]];
        let labels = array![[true], [false]];
        let l = loc_loss(probs.view(), labels.view(), &[true, false], &p).unwrap();
        assert_eq!(l.value, asl(0.3, true, &p));
        assert_eq!(l.grad[[1, 0]], 0.0);
    }

    #[test]
    fn mil_single_region_is_loc() {
        let p = AslParams::default();
        let probs = array![[0.3, 0.8, 0.1]];
        let img = [true, false, false];
        let labels = array![[true, false, false]];
        let mil = mil_loss(probs.view(), &img, &[true], &LsePoolParams::default(), &p).unwrap();
        let loc = loc_loss(probs.view(), labels.view(), &[true], &p).unwrap();
        assert!((mil.value - loc.value).abs() < 1e-15);
    }

    #[test]
    fn mil_requires_present_region() {
        let probs = array![[0.3]];
        let r = mil_loss(
            probs.view(),
            &[true],
            &[false],
            &LsePoolParams::default(),
            &AslParams::default(),
        );
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn mil_sharp_pooling_near_zero_loss() {
        let p = AslParams::default();
        let n = 6usize;
        let r = 200.0;
        let mut probs = Array2::zeros((n, 1));
        probs[[2, 0]] = 1.0;
        let present = vec![true; n];
        let l = mil_loss(probs.view(), &[true], &present, &LsePoolParams { r }, &p).unwrap();
        let bound = asl(1.0 - (n as f64).ln() / r, true, &p);
        assert!(l.value <= bound, "{} > {}", l.value, bound);
        assert!(l.value < 0.01);
    }

    #[test]
    fn combined_examples() {
        let w = CombinedLossWeights::default();
        assert!((combined_loss(1.0, 2.0, &w) - 1.02).abs() < 1e-15);
        assert_eq!(
            combined_loss(1.0, 2.0, &CombinedLossWeights { asl_weight: 0.0 }),
            1.0
        );
    }

    #[test]
    fn fd_square() {
        let r = finite_difference_check(|x| x[0] * x[0], &[3.0], &[6.0], FD_STEP).unwrap();
        assert!(r.max_rel_error < 1e-9);
        assert!(r.passes(1e-4));
    }

    #[test]
    fn fd_reports_nonfinite() {
        let r = finite_difference_check(|x| x[0].ln(), &[0.0], &[1.0], FD_STEP).unwrap();
        assert_eq!(r.nonfinite, vec![0]);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn fd_flags_wrong_gradient() {
        let r =
            finite_difference_check(|x| x[0] * x[1], &[2.0, 3.0], &[3.0, 2.5], FD_STEP).unwrap();
        assert_eq!(r.worst_index, Some(1));
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn fd_at_asl_kink_disagrees() {
        let params = AslParams {
            gamma_neg: 0.0,
            ..AslParams::default()
        };
        let x = [params.clip];
        let g = [asl_grad(params.clip, false, &params)];
        let r = finite_difference_check(|v| asl(v[0], false, &params), &x, &g, FD_STEP).unwrap();
        assert!(!params.is_smooth_at(x[0], false, FD_STEP));
        // one-sided slopes 0 and 1/(1 - 0) average to about 0.5
        assert!((r.numeric[0] - 0.5).abs() < 1e-4);
        assert!(!r.passes(1e-4));
    }
}
