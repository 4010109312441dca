//! Detection metrics: AP at IoU thresholds, mAP over thresholds and classes,
//! and localization accuracy at a fixed box-score threshold.
//!
//! The evaluation regime keeps at most one box per class and image on both
//! sides, so matching reduces to a single IoU test per image.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::inference::PathologyBox;

pub const DEFAULT_IOU_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
pub const DEFAULT_LOCACC_IOU_THRESHOLDS: [f64; 3] = [0.1, 0.3, 0.5];
pub const DEFAULT_LOCACC_SCORE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGt {
    pub image_id: String,
    /// `(class id, box)`, at most one per class.
    pub boxes: Vec<(usize, BBox)>,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub classes: Vec<String>,
    pub images: Vec<ImageGt>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            let mut seen = vec![false; self.classes.len()];
            for &(c, _) in &img.boxes {
                if c >= self.classes.len() {
                    return Err(Error::arg(format!(
                        "image `{}`: class id {c} outside vocabulary",
                        img.image_id
                    )));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::arg(format!(
                        "image `{}` has more than one `{}` box",
                        img.image_id, self.classes[c]
                    )));
                }
                if !img.labels.get(c).copied().unwrap_or(false) {
                    return Err(Error::arg(format!(
                        "image `{}` has a `{}` box but no matching image label",
                        img.image_id, self.classes[c]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePredictions {
    pub image_id: String,
    pub boxes: Vec<PathologyBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub locacc_score_threshold: f64,
    pub locacc_iou_thresholds: Vec<f64>,
    /// Count only images that contain the class (no credit for true negatives).
    pub locacc_positives_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            locacc_score_threshold: DEFAULT_LOCACC_SCORE,
            locacc_iou_thresholds: DEFAULT_LOCACC_IOU_THRESHOLDS.to_vec(),
            locacc_positives_only: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |t: &f64| *t > 0.0 && *t <= 1.0;
        if self.iou_thresholds.is_empty()
            || !self.iou_thresholds.iter().all(ok)
            || !self.locacc_iou_thresholds.iter().all(ok)
        {
            return Err(Error::config("IoU thresholds must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.locacc_score_threshold) {
            return Err(Error::config("loc-acc score threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The top-scoring prediction of one class in one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Top1 {
    pub bbox: BBox,
    pub score: f64,
}

/// Average precision of one class.
///
/// `preds[i]` and `gt[i]` belong to image `i`; images are expected in
/// ascending image-id order, which breaks score ties. Returns `None` when the
/// class has no ground-truth box.
pub fn average_precision(
    preds: &[Option<Top1>],
    gt: &[Option<BBox>],
    iou_threshold: f64,
) -> Option<f64> {
    let n_gt = gt.iter().filter(|g| g.is_some()).count();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, Top1)> = preds
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));

    let hits: Vec<bool> = ranked
        .iter()
        .map(|(i, p)| gt[*i].is_some_and(|g| iou(&p.bbox, &g) >= iou_threshold))
        .collect();

    // precision at each rank, then its running maximum from the tail
    let mut tp = 0usize;
    let mut precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let total: f64 = hits
        .iter()
        .zip(&precision)
        .filter(|(hit, _)| **hit)
        .map(|(_, p)| p)
        .sum();
    Some(total / n_gt as f64)
}

/// Fraction of images judged correct for one class.
///
/// A prediction fires when its score reaches `score_threshold`. Images with a
/// ground-truth box are correct when a fired prediction overlaps it with IoU
/// at least `iou_threshold`; images without one are correct when nothing
/// fires. With `positives_only` only images containing the class count.
pub fn localization_accuracy(
    preds: &[Option<Top1>],
    gt: &[Option<BBox>],
    iou_threshold: f64,
    score_threshold: f64,
    positives_only: bool,
) -> Option<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (p, g) in preds.iter().zip(gt) {
        let fired = p.filter(|p| p.score >= score_threshold);
        match g {
            Some(g) => {
                total += 1;
                if fired.is_some_and(|p| iou(&p.bbox, g) >= iou_threshold) {
                    correct += 1;
                }
            }
            None if !positives_only => {
                total += 1;
                if fired.is_none() {
                    correct += 1;
                }
            }
            None => {}
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub iou_thresholds: Vec<f64>,
    /// `ap[class][threshold]`; `None` for classes without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Mean AP over thresholds, per class.
    pub class_map: Vec<Option<f64>>,
    /// Mean of `class_map` over classes with ground truth.
    pub map: Option<f64>,
    /// Macro mean over classes at each threshold.
    pub ap_per_threshold: Vec<Option<f64>>,
    pub locacc_iou_thresholds: Vec<f64>,
    pub locacc_score_threshold: f64,
    pub locacc: Vec<Vec<Option<f64>>>,
    pub locacc_per_threshold: Vec<Option<f64>>,
    pub n_images: usize,
    pub n_gt_boxes: usize,
    pub n_predictions: usize,
}

/// Class-major, per-image table.
type ClassTable<T> = Vec<Vec<Option<T>>>;

/// AP block of the report: per-class AP at each threshold and the means.
pub fn mean_ap(
    preds: &[Vec<Option<Top1>>],
    gt: &[Vec<Option<BBox>>],
    thresholds: &[f64],
) -> (ClassTable<f64>, Vec<Option<f64>>, Option<f64>) {
    let ap: ClassTable<f64> = preds
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            thresholds
                .iter()
                .map(|&t| average_precision(p, g, t))
                .collect()
        })
        .collect();
    let class_map: Vec<Option<f64>> = ap.iter().map(|row| mean_of(row.iter().copied())).collect();
    let map = mean_of(class_map.iter().copied());
    (ap, class_map, map)
}

/// Per-class, per-image matrices (class-major) of top-1 predictions and
/// ground-truth boxes, with images sorted by id.
fn class_tables(
    preds: &[ImagePredictions],
    gt: &GroundTruth,
) -> Result<(ClassTable<Top1>, ClassTable<BBox>, usize)> {
    let by_id: HashMap<&str, &ImagePredictions> =
        preds.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let gt_ids: std::collections::HashSet<&str> =
        gt.images.iter().map(|g| g.image_id.as_str()).collect();
    let mut offenders: Vec<String> = preds
        .iter()
        .filter(|p| !gt_ids.contains(p.image_id.as_str()))
        .map(|p| format!("{} (predictions only)", p.image_id))
        .chain(
            gt.images
                .iter()
                .filter(|g| !by_id.contains_key(g.image_id.as_str()))
                .map(|g| format!("{} (ground truth only)", g.image_id)),
        )
        .collect();
    if by_id.len() != preds.len() {
        offenders.push("duplicate image ids in predictions".into());
    }
    if !offenders.is_empty() {
        offenders.sort();
        return Err(Error::ImageMismatch(offenders));
    }

    let mut images: Vec<&ImageGt> = gt.images.iter().collect();
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let n_classes = gt.classes.len();
    let mut p_table = vec![vec![None; images.len()]; n_classes];
    let mut g_table = vec![vec![None; images.len()]; n_classes];
    let mut n_predictions = 0;
    for (i, img) in images.iter().enumerate() {
        for &(c, b) in &img.boxes {
            g_table[c][i] = Some(b);
        }
        for b in &by_id[img.image_id.as_str()].boxes {
            if b.class_id >= n_classes {
                return Err(Error::arg(format!(
                    "image `{}`: predicted class id {} outside vocabulary",
                    img.image_id, b.class_id
                )));
            }
            n_predictions += 1;
            let slot: &mut Option<Top1> = &mut p_table[b.class_id][i];
            if slot.is_none_or(|t| b.score > t.score) {
                *slot = Some(Top1 {
                    bbox: b.bbox,
                    score: b.score,
                });
            }
        }
    }
    Ok((p_table, g_table, n_predictions))
}

pub fn evaluate(
    preds: &[ImagePredictions],
    gt: &GroundTruth,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    gt.validate()?;
    let (p_table, g_table, n_predictions) = class_tables(preds, gt)?;

    let (ap, class_map, map) = mean_ap(&p_table, &g_table, &cfg.iou_thresholds);
    let ap_per_threshold = (0..cfg.iou_thresholds.len())
        .map(|t| mean_of(ap.iter().map(|row| row[t])))
        .collect();

    let locacc: Vec<Vec<Option<f64>>> = p_table
        .iter()
        .zip(&g_table)
        .map(|(p, g)| {
            cfg.locacc_iou_thresholds
                .iter()
                .map(|&t| {
                    localization_accuracy(
                        p,
                        g,
                        t,
                        cfg.locacc_score_threshold,
                        cfg.locacc_positives_only,
                    )
                })
                .collect()
        })
        .collect();
    let locacc_per_threshold = (0..cfg.locacc_iou_thresholds.len())
        .map(|t| mean_of(locacc.iter().map(|row| row[t])))
        .collect();

    Ok(EvalReport {
        classes: gt.classes.clone(),
        iou_thresholds: cfg.iou_thresholds.clone(),
        ap,
        class_map,
        map,
        ap_per_threshold,
        locacc_iou_thresholds: cfg.locacc_iou_thresholds.clone(),
        locacc_score_threshold: cfg.locacc_score_threshold,
        locacc,
        locacc_per_threshold,
        n_images: gt.images.len(),
        n_gt_boxes: g_table.iter().flatten().filter(|g| g.is_some()).count(),
        n_predictions,
    })
}

fn threshold_key(t: f64) -> String {
    format!("{t}")
}

fn opt_json(v: Option<f64>) -> serde_json::Value {
    v.map_or(serde_json::Value::Null, serde_json::Value::from)
}

impl EvalReport {
    /// Nested JSON form:
    ///
    /// ```text
    /// { "ap": {class: {threshold: ap|null}}, "ap_per_threshold": {threshold: v},
    ///   "class_map": {class: v}, "map": v,
    ///   "locacc": {class: {threshold: v}}, "locacc_per_threshold": {threshold: v},
    ///   "locacc_score_threshold": v, "iou_thresholds": [...],
    ///   "locacc_iou_thresholds": [...], "counts": {"images", "gt_boxes", "predictions"} }
    /// ```
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::{json, Map, Value};
        let per_class = |table: &Vec<Vec<Option<f64>>>, thresholds: &[f64]| -> Value {
            let mut m = Map::new();
            for (c, row) in self.classes.iter().zip(table) {
                let inner: Map<String, Value> = thresholds
                    .iter()
                    .zip(row)
                    .map(|(t, v)| (threshold_key(*t), opt_json(*v)))
                    .collect();
                m.insert(c.clone(), Value::Object(inner));
            }
            Value::Object(m)
        };
        let per_threshold = |values: &[Option<f64>], thresholds: &[f64]| -> Value {
            Value::Object(
                thresholds
                    .iter()
                    .zip(values)
                    .map(|(t, v)| (threshold_key(*t), opt_json(*v)))
                    .collect(),
            )
        };
        let class_map: Map<String, Value> = self
            .classes
            .iter()
            .zip(&self.class_map)
            .map(|(c, v)| (c.clone(), opt_json(*v)))
            .collect();
        json!({
            "ap": per_class(&self.ap, &self.iou_thresholds),
            "ap_per_threshold": per_threshold(&self.ap_per_threshold, &self.iou_thresholds),
            "class_map": class_map,
            "map": opt_json(self.map),
            "locacc": per_class(&self.locacc, &self.locacc_iou_thresholds),
            "locacc_per_threshold": per_threshold(&self.locacc_per_threshold, &self.locacc_iou_thresholds),
            "locacc_score_threshold": self.locacc_score_threshold,
            "iou_thresholds": self.iou_thresholds,
            "locacc_iou_thresholds": self.locacc_iou_thresholds,
            "counts": {
                "images": self.n_images,
                "gt_boxes": self.n_gt_boxes,
                "predictions": self.n_predictions,
            },
        })
    }

    /// One row per class plus a final `__mean__` row. Columns:
    /// `class, ap@<t>..., map, locacc@<t>...`; empty cells are undefined.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(crate::io::format_f64).unwrap_or_default();
        let mut header = vec!["class".to_string()];
        header.extend(self.iou_thresholds.iter().map(|t| format!("ap@{t}")));
        header.push("map".into());
        header.extend(
            self.locacc_iou_thresholds
                .iter()
                .map(|t| format!("locacc@{t}")),
        );
        let mut out = header.join(",");
        out.push('\n');
        for (c, name) in self.classes.iter().enumerate() {
            let mut row = vec![csv_escape(name)];
            row.extend(self.ap[c].iter().map(|v| cell(*v)));
            row.push(cell(self.class_map[c]));
            row.extend(self.locacc[c].iter().map(|v| cell(*v)));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        let mut row = vec!["__mean__".to_string()];
        row.extend(self.ap_per_threshold.iter().map(|v| cell(*v)));
        row.push(cell(self.map));
        row.extend(self.locacc_per_threshold.iter().map(|v| cell(*v)));
        out.push_str(&row.join(","));
        out.push('\n');
        out
    }

    pub fn ap_at(&self, threshold: f64) -> BTreeMap<String, Option<f64>> {
        let t = self
            .iou_thresholds
            .iter()
            .position(|&x| x == threshold)
            .unwrap_or(usize::MAX);
        self.classes
            .iter()
            .zip(&self.ap)
            .map(|(c, row)| (c.clone(), row.get(t).copied().flatten()))
            .collect()
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Area under the ROC curve by the rank-sum statistic, with mid-ranks for
/// ties. `None` when either class is missing.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(c: [f64; 4]) -> BBox {
        BBox::try_from(c).unwrap()
    }

    fn hit(score: f64) -> Option<Top1> {
        Some(Top1 {
            bbox: bb([0.1, 0.1, 0.5, 0.5]),
            score,
        })
    }

    fn miss(score: f64) -> Option<Top1> {
        Some(Top1 {
            bbox: bb([0.6, 0.6, 0.9, 0.9]),
            score,
        })
    }

    fn gt_box() -> Option<BBox> {
        Some(bb([0.1, 0.1, 0.5, 0.5]))
    }

    #[test]
    fn ap_single_match() {
        assert_eq!(average_precision(&[hit(0.3)], &[gt_box()], 0.5), Some(1.0));
    }

    #[test]
    fn ap_no_predictions() {
        assert_eq!(
            average_precision(&[None, None], &[gt_box(), None], 0.5),
            Some(0.0)
        );
    }

    #[test]
    fn ap_undefined_without_gt() {
        assert_eq!(average_precision(&[hit(0.3)], &[None], 0.5), None);
    }

    #[test]
    fn ap_five_ninths() {
        let preds = [hit(0.9), miss(0.8), hit(0.7)];
        let gt = [gt_box(), gt_box(), gt_box()];
        let ap = average_precision(&preds, &gt, 0.5).unwrap();
        assert!((ap - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn ap_score_ties_by_image_order() {
        // equal scores: image 0 (miss) ranks before image 1 (hit)
        let preds = [miss(0.5), hit(0.5)];
        let gt = [gt_box(), gt_box()];
        let ap = average_precision(&preds, &gt, 0.5).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
    }

    #[test]
    fn class_map_arithmetic() {
        let preds = vec![vec![hit(0.9)]];
        let gt = vec![vec![gt_box()]];
        let (_, class_map, map) = mean_ap(&preds, &gt, &DEFAULT_IOU_THRESHOLDS);
        assert_eq!(class_map, vec![Some(1.0)]);
        assert_eq!(map, Some(1.0));

        // IoU of these boxes is 0.35, so AP is 1 up to 0.3 and 0 above
        let shifted = Some(Top1 {
            bbox: bb([0.1, 0.1, 0.24, 0.5]),
            score: 0.9,
        });
        let gt = vec![vec![gt_box()]];
        let (ap, class_map, _) = mean_ap(&[vec![shifted]], &gt, &DEFAULT_IOU_THRESHOLDS);
        let row: Vec<f64> = ap[0].iter().map(|v| v.unwrap()).collect();
        assert_eq!(row, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((class_map[0].unwrap() - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn locacc_examples() {
        let preds = [hit(1.0), hit(1.0), None, None];
        let gt = [gt_box(), gt_box(), None, None];
        assert_eq!(
            localization_accuracy(&preds, &gt, 0.5, 0.7, false),
            Some(1.0)
        );

        let preds = [hit(0.2), None, hit(0.3), None];
        assert_eq!(
            localization_accuracy(&preds, &gt, 0.5, 0.7, false),
            Some(0.5)
        );
    }

    #[test]
    fn locacc_mixed_enumeration() {
        // image 0: GT, fired hit          -> correct
        // image 1: GT, fired miss         -> wrong
        // image 2: no GT, fired           -> wrong
        // image 3: no GT, below threshold -> correct
        let preds = [hit(0.9), miss(0.8), hit(0.75), hit(0.69)];
        let gt = [gt_box(), gt_box(), None, None];
        assert_eq!(
            localization_accuracy(&preds, &gt, 0.5, 0.7, false),
            Some(0.5)
        );
        assert_eq!(
            localization_accuracy(&preds, &gt, 0.5, 0.7, true),
            Some(0.5)
        );
        // no positives at all in positives-only mode
        assert_eq!(
            localization_accuracy(&preds[2..], &gt[2..], 0.5, 0.7, true),
            None
        );
    }

    fn one_class_gt(ids: &[&str], boxes: Vec<Option<BBox>>) -> GroundTruth {
        GroundTruth {
            classes: vec!["c".into()],
            images: ids
                .iter()
                .zip(boxes)
                .map(|(id, b)| ImageGt {
                    image_id: id.to_string(),
                    boxes: b.map(|b| vec![(0, b)]).unwrap_or_default(),
                    labels: vec![b.is_some()],
                })
                .collect(),
        }
    }

    #[test]
    fn evaluate_perfect() {
        let gt = one_class_gt(&["b", "a"], vec![gt_box(), None]);
        let preds = vec![
            ImagePredictions {
                image_id: "a".into(),
                boxes: vec![],
            },
            ImagePredictions {
                image_id: "b".into(),
                boxes: vec![PathologyBox {
                    class_id: 0,
                    bbox: gt_box().unwrap(),
                    score: 1.0,
                }],
            },
        ];
        let r = evaluate(&preds, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.locacc_per_threshold, vec![Some(1.0); 3]);
        assert_eq!(r.n_images, 2);
        assert_eq!(r.n_gt_boxes, 1);
        assert_eq!(r.n_predictions, 1);
        let csv = r.to_csv();
        assert!(csv.starts_with("class,ap@0.1,ap@0.2"));
        assert!(csv.contains("__mean__"));
        let j = r.to_json();
        assert_eq!(j["ap"]["c"]["0.7"], serde_json::json!(1.0));
    }

    #[test]
    fn evaluate_rejects_mismatched_ids() {
        let gt = one_class_gt(&["a"], vec![gt_box()]);
        let preds = vec![ImagePredictions {
            image_id: "z".into(),
            boxes: vec![],
        }];
        match evaluate(&preds, &gt, &EvalConfig::default()) {
            Err(Error::ImageMismatch(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gt_validation() {
        let mut gt = one_class_gt(&["a"], vec![gt_box()]);
        gt.images[0].boxes.push((0, bb([0.0, 0.0, 0.2, 0.2])));
        assert!(gt.validate().is_err());
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]), Some(0.0));
        assert_eq!(auroc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(auroc(&[0.5], &[true]), None);
        // 2 pos, 2 neg, one inversion -> 3/4
        assert_eq!(
            auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]),
            Some(0.75)
        );
    }
}
