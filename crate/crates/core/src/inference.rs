//! Pathology boxes from per-region predictions.
//!
//! Each detected anatomical region proposes its own box for every pathology
//! whose probability clears the threshold, using that probability as the box
//! score. Proposals of the same pathology are then merged with weighted box
//! fusion, and optionally reduced to the single best box per pathology.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{weighted_box_fusion, FusionConfig, ScoredBox};
use crate::geometry::BBox;

/// Default vocabulary sizes of the anatomy/pathology label sets.
pub const DEFAULT_REGION_COUNT: usize = 29;
pub const DEFAULT_PATHOLOGY_COUNT: usize = 55;

/// One anatomical region as seen by the pathology predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDetection {
    pub region_id: usize,
    pub bbox: BBox,
    pub presence: f64,
    pub pathology_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    Mean,
    Max,
}

impl Combiner {
    fn combine(self, values: impl Iterator<Item = f64>) -> f64 {
        match self {
            Combiner::Mean => {
                let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                sum / n as f64
            }
            Combiner::Max => values.fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappedClass {
    pub name: String,
    pub sources: Vec<usize>,
    pub combiner: Combiner,
}

/// Many-to-one mapping from training classes onto evaluation classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMapping {
    classes: Vec<MappedClass>,
    source_count: usize,
}

impl ClassMapping {
    pub fn new(classes: Vec<MappedClass>, source_count: usize) -> Result<Self> {
        for c in &classes {
            if c.sources.is_empty() {
                return Err(Error::config(format!(
                    "evaluation class `{}` has no source classes",
                    c.name
                )));
            }
            if let Some(&bad) = c.sources.iter().find(|&&s| s >= source_count) {
                return Err(Error::config(format!(
                    "evaluation class `{}` refers to unknown training class index {bad}",
                    c.name
                )));
            }
        }
        Ok(Self {
            classes,
            source_count,
        })
    }

    /// Resolves source class names against the training vocabulary.
    pub fn from_names<'a, I>(entries: I, training_classes: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [String], Combiner)>,
    {
        let mut classes = Vec::new();
        for (name, sources, combiner) in entries {
            let sources = sources
                .iter()
                .map(|s| {
                    training_classes.iter().position(|t| t == s).ok_or_else(|| {
                        Error::config(format!(
                            "evaluation class `{name}` refers to unknown training class `{s}`"
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            classes.push(MappedClass {
                name: name.to_string(),
                sources,
                combiner,
            });
        }
        Self::new(classes, training_classes.len())
    }

    pub fn identity(training_classes: &[String]) -> Self {
        let classes = training_classes
            .iter()
            .enumerate()
            .map(|(i, n)| MappedClass {
                name: n.clone(),
                sources: vec![i],
                combiner: Combiner::Mean,
            })
            .collect();
        Self {
            classes,
            source_count: training_classes.len(),
        }
    }

    pub fn classes(&self) -> &[MappedClass] {
        &self.classes
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }
}

pub fn apply_class_mapping(d: &RegionDetection, m: &ClassMapping) -> Result<RegionDetection> {
    if d.pathology_probs.len() != m.source_count {
        return Err(Error::Shape {
            what: "region pathology probabilities",
            expected: m.source_count,
            found: d.pathology_probs.len(),
        });
    }
    let pathology_probs = m
        .classes
        .iter()
        .map(|c| {
            c.combiner
                .combine(c.sources.iter().map(|&s| d.pathology_probs[s]))
        })
        .collect();
    Ok(RegionDetection {
        pathology_probs,
        ..d.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathologyBox {
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Classes must exceed this probability to propose a box.
    pub probability_threshold: f64,
    pub fusion: FusionConfig,
    /// Regions below this presence are treated as not detected.
    pub presence_threshold: f64,
    pub top1_per_class: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            probability_threshold: 0.0,
            fusion: FusionConfig::default(),
            presence_threshold: 0.5,
            top1_per_class: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("probability threshold", self.probability_threshold),
            ("presence threshold", self.presence_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} {v} outside [0, 1]")));
            }
        }
        self.fusion.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Detections {
    /// Sorted by class, then by descending score.
    pub boxes: Vec<PathologyBox>,
    /// Detected regions skipped because their box has zero area.
    pub skipped_degenerate: usize,
}

pub fn detect_pathologies(regions: &[RegionDetection], cfg: &InferenceConfig) -> Detections {
    let n_classes = regions
        .iter()
        .map(|r| r.pathology_probs.len())
        .max()
        .unwrap_or(0);
    let mut per_class: Vec<Vec<ScoredBox>> = vec![Vec::new(); n_classes];
    let mut skipped_degenerate = 0;

    for (idx, region) in regions.iter().enumerate() {
        if region.presence < cfg.presence_threshold {
            continue;
        }
        if region.bbox.is_degenerate() {
            skipped_degenerate += 1;
            continue;
        }
        for (class, &p) in region.pathology_probs.iter().enumerate() {
            if p > cfg.probability_threshold {
                per_class[class].push(ScoredBox::new(region.bbox, p, idx));
            }
        }
    }

    let mut boxes = Vec::new();
    for (class_id, proposals) in per_class.iter().enumerate() {
        if proposals.is_empty() {
            continue;
        }
        let fused = weighted_box_fusion(proposals, &cfg.fusion);
        let keep = if cfg.top1_per_class { 1 } else { fused.len() };
        boxes.extend(fused.into_iter().take(keep).map(|b| PathologyBox {
            class_id,
            bbox: b.bbox,
            score: b.score,
        }));
    }
    Detections {
        boxes,
        skipped_degenerate,
    }
}
