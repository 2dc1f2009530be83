//! Classification metrics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::prototype::argmax;
use crate::{Error, Real, Result};

/// Cyclic neighbourhood used by the plus-or-minus-one accuracy: labels in
/// `first..=last` form a ring, anything outside only matches exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    pub first: usize,
    pub last: usize,
}

impl Adjacency {
    pub fn neighbours(&self, a: usize, b: usize) -> bool {
        if a == b {
            return true;
        }
        let ring = self.first..=self.last;
        if !ring.contains(&a) || !ring.contains(&b) {
            return false;
        }
        let len = self.last - self.first + 1;
        let (x, y) = (a - self.first, b - self.first);
        (x + 1) % len == y || (y + 1) % len == x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub plus_minus_one: Option<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn predictions<T: Real>(logits: &[T], classes: usize) -> Vec<usize> {
    logits.chunks_exact(classes).map(argmax).collect()
}

pub fn evaluate(predicted: &[usize], labels: &[usize], classes: usize, adjacency: Option<Adjacency>) -> Result<Metrics> {
    if predicted.len() != labels.len() {
        return Err(Error::Shape("predictions and labels differ in length".into()));
    }
    if labels.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    if let Some(adj) = adjacency {
        if adj.first > adj.last || adj.last >= classes {
            return Err(Error::Config("adjacency range outside the label set".into()));
        }
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let (mut correct, mut near) = (0usize, 0usize);
    for (&p, &y) in predicted.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::OutOfRange("label outside the class range".into()));
        }
        confusion[y][p] += 1;
        correct += usize::from(p == y);
        if let Some(adj) = adjacency {
            near += usize::from(adj.neighbours(p, y));
        }
    }
    let n = labels.len() as f64;
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect();
    Ok(Metrics {
        samples: labels.len(),
        accuracy: correct as f64 / n,
        per_class_accuracy,
        plus_minus_one: adjacency.map(|_| near as f64 / n),
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_confusion() {
        let m = evaluate(&[0, 1, 1, 2], &[0, 1, 2, 2], 3, None).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.confusion[2], [0, 1, 1]);
        assert_eq!(m.per_class_accuracy, [Some(1.0), Some(1.0), Some(0.5)]);
        assert!(m.plus_minus_one.is_none());
    }

    #[test]
    fn cyclic_neighbours() {
        let adj = Adjacency { first: 1, last: 8 };
        assert!(adj.neighbours(1, 8));
        assert!(adj.neighbours(8, 1));
        assert!(adj.neighbours(3, 4));
        assert!(!adj.neighbours(3, 5));
        assert!(!adj.neighbours(0, 1));
        assert!(adj.neighbours(0, 0));
        let m = evaluate(&[1, 0, 5], &[8, 1, 3], 9, Some(adj)).unwrap();
        assert!((m.plus_minus_one.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_has_no_accuracy() {
        let m = evaluate(&[0, 0], &[0, 0], 2, None).unwrap();
        assert_eq!(m.per_class_accuracy[1], None);
        assert!(evaluate(&[], &[], 2, None).is_err());
    }

    #[test]
    fn argmax_prediction() {
        assert_eq!(predictions(&[0.1f64, 0.9, 0.5, 0.5], 2), [1, 0]);
    }
}
