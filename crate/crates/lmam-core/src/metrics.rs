//! Classification metrics: accuracy, per-class precision/recall/F1 and the
//! support-weighted F1 average, all derived from a confusion matrix whose
//! rows are true classes and columns are predictions.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[true_class][predicted_class]`.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(rows: &[Vec<usize>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Config("confusion matrix must be square".into()));
        }
        let counts = rows.iter().flatten().copied().collect();
        Ok(Self { classes, counts })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn record_all(&mut self, truths: &[usize], predictions: &[usize]) {
        for (&t, &p) in truths.iter().zip(predictions) {
            self.record(t, p);
        }
    }

    pub fn support(&self, class: usize) -> usize {
        (0..self.classes).map(|p| self.counts[class * self.classes + p]).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Config("cannot compute metrics over an empty split".into()));
        }
        let c = self.classes;
        let mut correct = 0usize;
        let mut per_class = Vec::with_capacity(c);
        let mut weighted_f1 = 0.0;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            correct += tp;
            let support = self.support(k);
            let predicted: usize = (0..c).map(|t| self.counts[t * c + k]).sum();
            let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            weighted_f1 += (support as f64 / total as f64) * f1;
            per_class.push(ClassScores { precision, recall, f1, support });
        }
        let confusion = (0..c).map(|t| self.counts[t * c..(t + 1) * c].to_vec()).collect();
        Ok(Metrics {
            accuracy: correct as f64 / total as f64,
            weighted_f1,
            per_class,
            confusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let mut cm = ConfusionMatrix::new(3);
        cm.record_all(&[0, 1, 2, 2], &[0, 1, 2, 2]);
        let m = cm.metrics().unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.weighted_f1, 1.0);
    }

    #[test]
    fn hand_worked_symmetric_confusion() {
        // [[2,1],[1,2]]: accuracy 4/6, both per-class F1 = 2/3, weighted 2/3.
        let cm = ConfusionMatrix::from_counts(&[vec![2, 1], vec![1, 2]]).unwrap();
        let m = cm.metrics().unwrap();
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert!((m.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.weighted_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_one_class_predictor_on_imbalanced_data() {
        // Supports 5 and 1, everything predicted as class 0:
        // accuracy 5/6; class-0 F1 = 10/11; class-1 F1 = 0;
        // weighted F1 = (5/6)*(10/11) = 50/66 < 5/6.
        let cm = ConfusionMatrix::from_counts(&[vec![5, 0], vec![1, 0]]).unwrap();
        let m = cm.metrics().unwrap();
        assert!((m.accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert!((m.weighted_f1 - 50.0 / 66.0).abs() < 1e-12);
        assert!(m.weighted_f1 < m.accuracy);
    }

    #[test]
    fn row_sums_are_supports() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 2, 0], vec![1, 4, 1], vec![0, 0, 2]]).unwrap();
        assert_eq!(cm.support(0), 5);
        assert_eq!(cm.support(1), 6);
        assert_eq!(cm.support(2), 2);
        let m = cm.metrics().unwrap();
        for (k, scores) in m.per_class.iter().enumerate() {
            assert_eq!(scores.support, m.confusion[k].iter().sum::<usize>());
        }
    }

    #[test]
    fn empty_split_is_an_error() {
        let cm = ConfusionMatrix::new(2);
        assert!(cm.metrics().is_err());
    }
}
