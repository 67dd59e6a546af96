//! Datasets: loading, synthesis, and mini-batch iteration.

pub mod idx;
pub mod partition;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::RngStream;

/// An in-memory labeled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<u32>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<u32>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Features and labels for the listed examples, in order.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<u32>) {
        let features = self.features.gather_rows(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (features, labels)
    }

    /// Split off the first `fraction` of a shuffled copy as one dataset and
    /// the rest as another (used to carve public/private pools from a single
    /// source).
    pub fn carve(&self, fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::invalid("carve fraction must be in (0, 1)"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        let take = ((self.len() as f64 * fraction).round() as usize)
            .max(1)
            .min(self.len() - 1);
        let (first, rest) = order.split_at(take);
        let (f1, l1) = self.gather(first);
        let (f2, l2) = self.gather(rest);
        Ok((
            Dataset::new(f1, l1, self.class_count)?,
            Dataset::new(f2, l2, self.class_count)?,
        ))
    }
}

/// Gaussian-blobs classification dataset: one unit-direction center per
/// class scaled by `separation`, unit isotropic noise around it. Labels
/// cycle through the classes so the set is balanced.
pub fn synthesize_blobs(
    classes: usize,
    dim: usize,
    size: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if classes == 0 || dim == 0 || size == 0 {
        return Err(Error::invalid("blobs need positive classes, dim, size"));
    }
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut c: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut c {
            *v *= separation / norm;
        }
        centers.push(c);
    }
    let mut features = Matrix::zeros(size, dim);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let label = i % classes;
        let row = features.row_mut(i);
        for (v, &c) in row.iter_mut().zip(&centers[label]) {
            *v = c + rng.normal();
        }
        labels.push(label as u32);
    }
    Dataset::new(features, labels, classes)
}

/// Without-replacement mini-batch iterator: a shuffled pass over the index
/// set, reshuffled whenever fewer than one batch remains.
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl EpochSampler {
    /// `indices` is the pool to draw from; `batch` is clamped to the pool
    /// size by the caller.
    pub fn new(indices: Vec<usize>, batch: usize) -> Self {
        assert!(!indices.is_empty(), "sampler needs a nonempty pool");
        assert!(batch >= 1 && batch <= indices.len(), "bad batch size");
        EpochSampler {
            order: indices,
            cursor: usize::MAX, // force initial shuffle
            batch,
        }
    }

    pub fn next_batch(&mut self, rng: &mut RngStream) -> &[usize] {
        if self.cursor == usize::MAX || self.cursor + self.batch > self.order.len() {
            rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..start + self.batch]
    }
}
