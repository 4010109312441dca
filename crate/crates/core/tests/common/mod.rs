#![allow(dead_code)]

use adpd::geometry::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// IoU from raw corner arithmetic, independent of the library.
pub fn iou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Brute-force AP: sweep every distinct score as a firing threshold, record
/// (recall, precision), then integrate the upper envelope of precision over
/// recall.
pub fn ap_oracle(
    preds: &[Option<([f64; 4], f64)>],
    gt: &[Option<[f64; 4]>],
    t: f64,
) -> Option<f64> {
    let n_gt = gt.iter().flatten().count();
    if n_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = preds.iter().flatten().map(|p| p.1).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut curve = Vec::new();
    for &s in &thresholds {
        let mut fired = 0;
        let mut tp = 0;
        for (p, g) in preds.iter().zip(gt) {
            if let Some((b, score)) = p {
                if *score >= s {
                    fired += 1;
                    if g.is_some_and(|g| iou_oracle(*b, g) >= t) {
                        tp += 1;
                    }
                }
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / fired as f64));
    }
    let mut recalls: Vec<f64> = curve.iter().map(|c| c.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = curve
            .iter()
            .filter(|c| c.0 >= r)
            .map(|c| c.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..0.8);
    let y = rng.random_range(0.0..0.8);
    let w = rng.random_range(0.01..(1.0 - x));
    let h = rng.random_range(0.01..(1.0 - y));
    BBox::clamped(x, y, x + w, y + h)
}

/// `b` moved by up to `amp` per coordinate, corners kept ordered.
pub fn nudged(b: &BBox, amp: f64, rng: &mut ChaCha8Rng) -> BBox {
    let c = b.coords();
    let mut d = [0.0; 4];
    for k in 0..4 {
        d[k] = (c[k] + rng.random_range(-amp..=amp)).clamp(0.0, 1.0);
    }
    BBox::clamped(
        d[0].min(d[2]),
        d[1].min(d[3]),
        d[0].max(d[2]),
        d[1].max(d[3]),
    )
}
