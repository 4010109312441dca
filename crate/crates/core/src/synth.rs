//! Seeded synthetic scenes: a jittered grid of anatomical regions, pathologies
//! tied to small sets of neighbouring regions, and region features that carry
//! a linear signature of every pathology affecting the region.
//!
//! World-level draws (class affinities and signatures) use one random stream;
//! image `i` uses its own stream, so any image range can be generated
//! independently and two ranges of the same seed share the same world.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, SampleGt};
use crate::error::{Error, Result};
use crate::geometry::BBox;

const WORLD_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_regions: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub n_images: usize,
    /// Index of the first generated image; lets held-out splits share a world.
    pub first_image: usize,
    /// Probability that a class is active in an image.
    pub prevalence: f64,
    /// Half-width of the uniform per-coordinate region jitter.
    pub jitter: f64,
    pub noise_sigma: f64,
    /// Range of the factor by which GT boxes are shrunk about their centre.
    pub shrink: (f64, f64),
    /// Overlap added around each grid cell.
    pub margin: f64,
    /// Every active class affects exactly one region.
    pub single_region: bool,
    /// Probability that a region is hidden (presence 0).
    pub region_dropout: f64,
    /// Length of each class signature vector.
    pub signature_norm: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_regions: 8,
            n_classes: 5,
            feature_dim: 16,
            n_images: 500,
            first_image: 0,
            prevalence: 0.3,
            jitter: 0.02,
            noise_sigma: 0.1,
            shrink: (0.6, 1.0),
            margin: 0.03,
            single_region: false,
            region_dropout: 0.0,
            signature_norm: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions == 0 || self.n_classes == 0 || self.feature_dim == 0 {
            return Err(Error::config(
                "region, class and feature counts must be positive",
            ));
        }
        if self.feature_dim < self.n_regions {
            return Err(Error::config(format!(
                "feature_dim {} cannot hold a one-hot code for {} regions",
                self.feature_dim, self.n_regions
            )));
        }
        let (lo, hi) = self.shrink;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("shrink range must satisfy 0 < lo <= hi <= 1"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.prevalence) || !unit(self.region_dropout) {
            return Err(Error::config("prevalence and dropout must lie in [0, 1]"));
        }
        if !(self.jitter >= 0.0 && self.noise_sigma >= 0.0 && self.margin >= 0.0)
            || !self.signature_norm.is_finite()
            || self.signature_norm <= 0.0
        {
            return Err(Error::config(
                "jitter, noise, margin and signature norm must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Grid shape for `n` regions: two columns, as many rows as needed.
fn grid_shape(n: usize) -> (usize, usize) {
    let cols = if n == 1 { 1 } else { 2 };
    (cols, n.div_ceil(cols))
}

/// Canonical region boxes before jitter.
pub fn canonical_layout(n_regions: usize, margin: f64) -> Vec<BBox> {
    let (cols, rows) = grid_shape(n_regions);
    (0..n_regions)
        .map(|r| {
            let (col, row) = (r % cols, r / cols);
            let (w, h) = (1.0 / cols as f64, 1.0 / rows as f64);
            BBox::clamped(
                col as f64 * w - margin,
                row as f64 * h - margin,
                (col + 1) as f64 * w + margin,
                (row + 1) as f64 * h + margin,
            )
        })
        .collect()
}

fn grid_neighbours(r: usize, n_regions: usize) -> Vec<usize> {
    let (cols, _) = grid_shape(n_regions);
    let (col, row) = (r % cols, r / cols);
    let mut out = Vec::new();
    if col > 0 {
        out.push(r - 1);
    }
    if col + 1 < cols && r + 1 < n_regions {
        out.push(r + 1);
    }
    if row > 0 {
        out.push(r - cols);
    }
    if r + cols < n_regions {
        out.push(r + cols);
    }
    out
}

/// Fixed per-seed structure shared by all images.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub layout: Vec<BBox>,
    /// Regions each class may affect: an anchor and, when available, a neighbour.
    pub affinity: Vec<Vec<usize>>,
    /// `classes x feature_dim`.
    pub signatures: Array2<f64>,
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(WORLD_STREAM);
        let layout = canonical_layout(cfg.n_regions, cfg.margin);
        let affinity = (0..cfg.n_classes)
            .map(|_| {
                let anchor = rng.random_range(0..cfg.n_regions);
                let mut set = vec![anchor];
                if let Some(&n) = grid_neighbours(anchor, cfg.n_regions).choose(&mut rng) {
                    set.push(n);
                }
                set
            })
            .collect();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut signatures = Array2::from_shape_fn((cfg.n_classes, cfg.feature_dim), |_| {
            normal.sample(&mut rng)
        });
        for mut row in signatures.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v * cfg.signature_norm / norm);
        }
        Ok(Self {
            layout,
            affinity,
            signatures,
        })
    }
}

fn jittered(b: &BBox, amp: f64, rng: &mut ChaCha8Rng) -> BBox {
    if amp == 0.0 {
        return *b;
    }
    let mut c = b.coords();
    for v in &mut c {
        *v += rng.random_range(-amp..=amp);
    }
    let x1 = c[0].clamp(0.0, 1.0);
    let y1 = c[1].clamp(0.0, 1.0);
    // keep corners ordered even for amplitudes larger than half a box
    BBox::clamped(x1, y1, c[2].max(x1), c[3].max(y1))
}

fn generate_image(cfg: &SynthConfig, world: &SynthWorld, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let (nr, nc) = (cfg.n_regions, cfg.n_classes);
    let region_boxes: Vec<BBox> = world
        .layout
        .iter()
        .map(|b| jittered(b, cfg.jitter, &mut rng))
        .collect();
    let visible: Vec<bool> = (0..nr)
        .map(|_| cfg.region_dropout == 0.0 || !rng.random_bool(cfg.region_dropout))
        .collect();

    let mut labels = Array2::from_elem((nr, nc), false);
    let mut gt_boxes = Vec::new();
    for c in 0..nc {
        if !rng.random_bool(cfg.prevalence) {
            continue;
        }
        let candidates: Vec<usize> = world.affinity[c]
            .iter()
            .copied()
            .filter(|&r| visible[r])
            .collect();
        let two = !cfg.single_region && candidates.len() > 1 && rng.random_bool(0.5);
        let affected: Vec<usize> = if two {
            candidates
        } else if let Some(&r) = candidates.choose(&mut rng) {
            vec![r]
        } else {
            continue;
        };
        let enclosing = affected
            .iter()
            .map(|&r| region_boxes[r])
            .reduce(|a, b| a.enclose(&b))
            .expect("non-empty");
        let (lo, hi) = cfg.shrink;
        let f = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        for &r in &affected {
            labels[(r, c)] = true;
        }
        gt_boxes.push((c, enclosing.shrink(f)));
    }

    let mut features = Array2::zeros((nr, cfg.feature_dim));
    for r in 0..nr {
        let mut row = features.row_mut(r);
        if visible[r] {
            row[r] = 1.0;
            for c in 0..nc {
                if labels[(r, c)] {
                    row += &world.signatures.row(c);
                }
            }
        }
        if cfg.noise_sigma > 0.0 {
            row.mapv_inplace(|v| v + noise.sample(&mut rng));
        }
    }

    let image_labels = (0..nc)
        .map(|c| labels.column(c).iter().any(|&l| l))
        .collect();
    Sample {
        image_id: format!("img-{index:06}"),
        region_boxes,
        presence: visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        listed: vec![true; nr],
        features: Some(features),
        pathology_probs: None,
        anatomy_labels: Some(labels),
        gt: Some(SampleGt {
            boxes: gt_boxes,
            image_labels,
        }),
    }
}

pub fn class_names(n_classes: usize) -> Vec<String> {
    (0..n_classes).map(|c| format!("pathology_{c}")).collect()
}

/// Images `first_image .. first_image + n_images` of the world given by `cfg.seed`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let world = SynthWorld::new(cfg)?;
    let samples = (cfg.first_image..cfg.first_image + cfg.n_images)
        .map(|i| generate_image(cfg, &world, i))
        .collect();
    Ok(Dataset {
        classes: class_names(cfg.n_classes),
        n_regions: cfg.n_regions,
        feature_dim: Some(cfg.feature_dim),
        samples,
    })
}
