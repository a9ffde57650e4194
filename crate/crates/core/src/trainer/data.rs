//! In-memory feature matrices for training and evaluation.

use crate::dataio::{NcifarContainer, IMAGE_BYTES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::invalid("dataset needs positive dimension and class count"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::invalid(format!(
                "{} feature values for {} examples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(j) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::invalid(format!("label {} at {j} out of range", labels[j])));
        }
        Ok(Dataset {
            dim,
            classes,
            features,
            labels,
        })
    }

    /// Pixels scaled to `[-0.5, 0.5]`.
    pub fn from_ncifar(container: &NcifarContainer) -> Result<Self> {
        let mut features = Vec::with_capacity(container.records.len() * IMAGE_BYTES);
        let mut labels = Vec::with_capacity(container.records.len());
        for r in &container.records {
            features.extend(r.image.pixels().iter().map(|&p| p as f64 / 255.0 - 0.5));
            labels.push(r.noisy_label as usize);
        }
        Dataset::new(IMAGE_BYTES, container.n_classes as usize, features, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.x(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.dim, self.classes, self.features.clone(), labels)
    }
}
