//! Dataset schema, JSON ingestion, and the synthetic bag generator.
//!
//! A [`Dataset`] stores ground truth next to the training bags for
//! convenience, but training code only ever receives a [`TrainingView`],
//! which has no path to the ground-truth boxes.

mod synth;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use synth::{generate_synthetic, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    pub labels: Vec<u8>,
    pub proposals: Vec<Proposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruth>>,
}

impl Bag {
    pub fn is_positive(&self, class: usize) -> bool {
        self.labels.get(class).copied() == Some(1)
    }

    pub fn positive_classes(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&c| self.labels[c] == 1).collect()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    /// Row-major `num_proposals x feature_dim` matrix.
    pub fn feature_matrix(&self) -> Array2<f64> {
        let d = self.proposals.first().map_or(0, |p| p.feature.len());
        Array2::from_shape_fn((self.proposals.len(), d), |(i, j)| self.proposals[i].feature[j])
    }

    /// Ground-truth boxes of one class, empty when absent.
    pub fn gt_boxes(&self, class: usize) -> Vec<BBox> {
        self.ground_truth
            .iter()
            .flatten()
            .filter(|g| g.class == class)
            .map(|g| g.bbox)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub feature_dim: usize,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidDataset("no classes declared".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidDataset("feature_dim must be positive".into()));
        }
        if self.bags.is_empty() {
            return Err(Error::InvalidDataset("dataset has no bags".into()));
        }
        let n = self.num_classes();
        let mut seen = std::collections::HashSet::new();
        for bag in &self.bags {
            if !seen.insert(bag.id.as_str()) {
                return Err(Error::bag(&bag.id, "id", "duplicate bag id"));
            }
            if bag.labels.len() != n {
                return Err(Error::DimensionMismatch {
                    bag: bag.id.clone(),
                    field: "labels".into(),
                    expected: n,
                    found: bag.labels.len(),
                });
            }
            if let Some(bad) = bag.labels.iter().find(|&&l| l > 1) {
                return Err(Error::bag(&bag.id, "labels", format!("label {bad} is not 0 or 1")));
            }
            if bag.proposals.is_empty() {
                return Err(Error::bag(&bag.id, "proposals", "at least one proposal required"));
            }
            for (i, p) in bag.proposals.iter().enumerate() {
                if p.feature.len() != self.feature_dim {
                    return Err(Error::DimensionMismatch {
                        bag: bag.id.clone(),
                        field: format!("proposals[{i}].feature"),
                        expected: self.feature_dim,
                        found: p.feature.len(),
                    });
                }
                if p.feature.iter().any(|v| !v.is_finite()) {
                    return Err(Error::bag(
                        &bag.id,
                        format!("proposals[{i}].feature"),
                        "non-finite value",
                    ));
                }
            }
            for (i, g) in bag.ground_truth.iter().flatten().enumerate() {
                if g.class >= n {
                    return Err(Error::bag(
                        &bag.id,
                        format!("ground_truth[{i}].class"),
                        format!("class {} out of range for {n} classes", g.class),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn has_ground_truth(&self) -> bool {
        self.bags.iter().all(|b| b.ground_truth.is_some())
    }

    pub fn bag(&self, id: &str) -> Option<&Bag> {
        self.bags.iter().find(|b| b.id == id)
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { ds: self }
    }
}

/// Read-only view of a dataset without ground truth.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    ds: &'a Dataset,
}

impl<'a> TrainingView<'a> {
    pub fn num_classes(&self) -> usize {
        self.ds.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.ds.feature_dim
    }

    pub fn len(&self) -> usize {
        self.ds.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.bags.is_empty()
    }

    pub fn bags(&self) -> impl Iterator<Item = TrainBag<'a>> + 'a {
        self.ds.bags.iter().map(|bag| TrainBag { bag })
    }

    pub fn get(&self, index: usize) -> TrainBag<'a> {
        TrainBag {
            bag: &self.ds.bags[index],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainBag<'a> {
    bag: &'a Bag,
}

impl TrainBag<'_> {
    pub fn id(&self) -> &str {
        &self.bag.id
    }
    pub fn labels(&self) -> &[u8] {
        &self.bag.labels
    }
    pub fn proposals(&self) -> &[Proposal] {
        &self.bag.proposals
    }
    pub fn positive_classes(&self) -> Vec<usize> {
        self.bag.positive_classes()
    }
    pub fn boxes(&self) -> Vec<BBox> {
        self.bag.boxes()
    }
    pub fn feature_matrix(&self) -> Array2<f64> {
        self.bag.feature_matrix()
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds: Dataset = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
    ds.validate()?;
    Ok(ds)
}

/// Writes compact JSON atomically. Shortest round-trip float formatting makes
/// the output byte-stable for a fixed dataset.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let bytes = serde_json::to_vec(ds).map_err(|e| Error::json(path.as_ref(), e))?;
    write_atomic(path.as_ref(), &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
