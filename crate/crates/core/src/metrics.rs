//! Classification metrics built on a raw confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn new(num_classes: usize) -> Self {
        Metrics {
            confusion: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(
                "metrics",
                format!("{} labels vs {} predictions", truth.len(), predicted.len()),
            ));
        }
        let mut m = Metrics::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|r| r.len() != k) {
            return Err(Error::shape("metrics", "confusion matrix is not square"));
        }
        Ok(Metrics { confusion })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.num_classes();
        for label in [truth, predicted] {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
        }
        self.confusion[truth][predicted] += 1;
        Ok(())
    }

    /// Adds another matrix of the same size; counts merge associatively.
    pub fn merge(&mut self, other: &Metrics) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::shape("metrics", "merging matrices of different size"));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn confusion(&self) -> &[Vec<u64>] {
        &self.confusion
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.confusion[i][i]).sum()
    }

    /// `trace / total`; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.confusion[class].iter().sum()
    }

    /// Row-normalized matrix. Rows of classes with no samples are `None`.
    pub fn normalized(&self) -> Vec<Option<Vec<f64>>> {
        self.confusion
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row.iter().map(|&c| c as f64 / total as f64).collect())
            })
            .collect()
    }

    /// Classes with no true samples.
    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&i| self.row_total(i) == 0).collect()
    }

    /// Diagonal of the normalized matrix.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.normalized()
            .into_iter()
            .enumerate()
            .map(|(i, row)| row.map(|r| r[i]))
            .collect()
    }
}
