//! In-memory dataset: one [`Sample`] per image, regions indexed by region id.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Ground-truth annotations of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGt {
    /// `(class id, box)`, at most one box per class.
    pub boxes: Vec<(usize, BBox)>,
    pub image_labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    /// One entry per region id of the vocabulary.
    pub region_boxes: Vec<BBox>,
    /// Region presence scores; ground truth uses exactly 0 or 1.
    pub presence: Vec<f64>,
    /// Regions that appear in the record at all.
    pub listed: Vec<bool>,
    /// `regions x feature_dim`.
    pub features: Option<Array2<f64>>,
    /// `regions x classes`, precomputed region probabilities.
    pub pathology_probs: Option<Array2<f64>>,
    /// `regions x classes` anatomy-level labels.
    pub anatomy_labels: Option<Array2<bool>>,
    pub gt: Option<SampleGt>,
}

impl Sample {
    pub fn n_regions(&self) -> usize {
        self.region_boxes.len()
    }

    /// Presence flags with the conventional 0.5 cut.
    pub fn present_mask(&self) -> Vec<bool> {
        self.presence.iter().map(|&p| p >= 0.5).collect()
    }

    pub fn image_labels(&self) -> Option<&[bool]> {
        self.gt.as_ref().map(|g| g.image_labels.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub n_regions: usize,
    pub feature_dim: Option<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every sample against the declared vocabulary sizes.
    pub fn validate(&self) -> Result<()> {
        let n_classes = self.classes.len();
        for s in &self.samples {
            let bad = |what: &'static str, expected: usize, found: usize| Error::Shape {
                what,
                expected,
                found,
            };
            if s.region_boxes.len() != self.n_regions {
                return Err(bad("region boxes", self.n_regions, s.region_boxes.len()));
            }
            if s.presence.len() != self.n_regions || s.listed.len() != self.n_regions {
                return Err(bad("region presence", self.n_regions, s.presence.len()));
            }
            if let Some(f) = &s.features {
                if f.nrows() != self.n_regions {
                    return Err(bad("feature rows", self.n_regions, f.nrows()));
                }
                if let Some(d) = self.feature_dim {
                    if f.ncols() != d {
                        return Err(bad("feature columns", d, f.ncols()));
                    }
                }
            }
            if let Some(p) = &s.pathology_probs {
                if p.dim() != (self.n_regions, n_classes) {
                    return Err(bad(
                        "pathology probabilities",
                        self.n_regions * n_classes,
                        p.len(),
                    ));
                }
            }
            if let Some(l) = &s.anatomy_labels {
                if l.dim() != (self.n_regions, n_classes) {
                    return Err(bad("anatomy labels", self.n_regions * n_classes, l.len()));
                }
            }
            if let Some(g) = &s.gt {
                if g.image_labels.len() != n_classes {
                    return Err(bad("image labels", n_classes, g.image_labels.len()));
                }
            }
        }
        Ok(())
    }
}
