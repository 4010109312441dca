//! Weighted box fusion for boxes of a single class.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// IoU above which a box joins an existing cluster.
pub const DEFAULT_FUSION_IOU: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    /// Position in the caller's input, used to break score ties.
    pub source_index: usize,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, source_index: usize) -> Self {
        Self {
            bbox,
            score,
            source_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    /// Multiply fused scores by `min(n, T) / T` where `T = rescale_cap`.
    pub score_rescale: bool,
    pub rescale_cap: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_FUSION_IOU,
            score_rescale: false,
            rescale_cap: 1,
        }
    }
}

impl FusionConfig {
    pub fn with_iou(iou_threshold: f64) -> Self {
        Self {
            iou_threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::config(format!(
                "fusion IoU threshold {} outside [0, 1]",
                self.iou_threshold
            )));
        }
        if self.score_rescale && self.rescale_cap == 0 {
            return Err(Error::config("score rescale cap must be positive"));
        }
        Ok(())
    }
}

struct Cluster {
    /// Running sums of score-weighted coordinates.
    weighted: [f64; 4],
    weight: f64,
    score_sum: f64,
    score_range: (f64, f64),
    lo: [f64; 4],
    hi: [f64; 4],
    fused: BBox,
    members: Vec<usize>,
    first_source: usize,
}

impl Cluster {
    fn open(b: &ScoredBox, index: usize) -> Self {
        let mut c = Cluster {
            weighted: [0.0; 4],
            weight: 0.0,
            score_sum: 0.0,
            score_range: (b.score, b.score),
            lo: b.bbox.coords(),
            hi: b.bbox.coords(),
            fused: b.bbox,
            members: Vec::new(),
            first_source: b.source_index,
        };
        c.push(b, index);
        c
    }

    fn push(&mut self, b: &ScoredBox, index: usize) {
        let coords = b.bbox.coords();
        for (k, &c) in coords.iter().enumerate() {
            self.weighted[k] += b.score * c;
            self.lo[k] = self.lo[k].min(c);
            self.hi[k] = self.hi[k].max(c);
        }
        self.weight += b.score;
        self.score_sum += b.score;
        self.score_range = (
            self.score_range.0.min(b.score),
            self.score_range.1.max(b.score),
        );
        self.members.push(index);
        if self.members.len() > 1 && self.weight > 0.0 {
            // clamping to the member range only absorbs rounding
            let avg = |k: usize| (self.weighted[k] / self.weight).clamp(self.lo[k], self.hi[k]);
            self.fused = BBox::clamped(avg(0), avg(1), avg(2), avg(3));
        }
        // all-zero scores keep the cluster's first box
    }

    fn score(&self, cfg: &FusionConfig) -> f64 {
        let n = self.members.len() as f64;
        let mut score = (self.score_sum / n).clamp(self.score_range.0, self.score_range.1);
        if cfg.score_rescale {
            let cap = cfg.rescale_cap as f64;
            score *= n.min(cap) / cap;
        }
        score
    }
}

fn score_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source_index.cmp(&b.source_index))
}

/// One fused box together with the input positions of its members.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCluster {
    pub fused: ScoredBox,
    /// Indices into the input slice, in visiting order.
    pub members: Vec<usize>,
}

/// [`weighted_box_fusion`] with cluster membership.
pub fn fuse_clusters(boxes: &[ScoredBox], cfg: &FusionConfig) -> Vec<FusedCluster> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| score_order(&boxes[a], &boxes[b]));

    let mut clusters: Vec<Cluster> = Vec::new();
    for &i in &order {
        let b = &boxes[i];
        let mut best: Option<(usize, f64)> = None;
        for (ci, c) in clusters.iter().enumerate() {
            let overlap = iou(&c.fused, &b.bbox);
            if overlap > cfg.iou_threshold && best.is_none_or(|(_, o)| overlap > o) {
                best = Some((ci, overlap));
            }
        }
        match best {
            Some((ci, _)) => clusters[ci].push(b, i),
            None => clusters.push(Cluster::open(b, i)),
        }
    }

    let mut out: Vec<FusedCluster> = clusters
        .into_iter()
        .map(|c| FusedCluster {
            fused: ScoredBox::new(c.fused, c.score(cfg), c.first_source),
            members: c.members,
        })
        .collect();
    out.sort_by(|a, b| score_order(&a.fused, &b.fused));
    out
}

/// Clusters overlapping boxes and replaces each cluster by its score-weighted
/// average box.
///
/// Boxes are visited in descending score order. Each box joins the cluster
/// whose current fused box overlaps it most, provided that overlap exceeds
/// `cfg.iou_threshold`; otherwise it opens a new cluster. A cluster's score is
/// the mean of its member scores. Output is sorted by score, descending.
pub fn weighted_box_fusion(boxes: &[ScoredBox], cfg: &FusionConfig) -> Vec<ScoredBox> {
    fuse_clusters(boxes, cfg)
        .into_iter()
        .map(|c| c.fused)
        .collect()
}
