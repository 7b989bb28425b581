//! Classifiers used to score perturbed images.
//!
//! Anything implementing [`Scorer`] can drive proposal harvesting: the built-in
//! [`TinyClassifier`] or a [`ScoreCache`] of precomputed posteriors exported from
//! an external network.

mod cache;
mod tiny;

pub use cache::{ScoreCache, ScoreCacheEntry};
pub use tiny::{train_tiny_classifier, TinyClassifier, TrainConfig};

use crate::error::{Error, Result};
use crate::imaging::{BBox, Image};

/// A normalized class posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    probabilities: Vec<f64>,
}

impl ClassScores {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::InvalidScores("no classes".into()));
        }
        if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidScores("probability outside [0, 1]".into()));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidScores(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probabilities })
    }

    /// Softmax of `logits` with max subtraction.
    pub fn from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        Self {
            probabilities: exps.into_iter().map(|e| e / s).collect(),
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn num_classes(&self) -> usize {
        self.probabilities.len()
    }

    pub fn get(&self, label: usize) -> Result<f64> {
        self.probabilities
            .get(label)
            .copied()
            .ok_or(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes(),
            })
    }

    /// Labels by descending probability, ties broken by ascending label.
    pub fn top_k(&self, k: usize) -> Result<Vec<usize>> {
        let c = self.num_classes();
        if k == 0 || k > c {
            return Err(Error::KOutOfRange { k, num_classes: c });
        }
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            self.probabilities[b]
                .total_cmp(&self.probabilities[a])
                .then(a.cmp(&b))
        });
        order.truncate(k);
        Ok(order)
    }
}

/// What is being scored: the (possibly perturbed) image plus the identity of the
/// image and region, which file-backed scorers use as a lookup key.
#[derive(Debug, Clone, Copy)]
pub struct ScoreQuery<'a> {
    pub image_id: &'a str,
    /// `None` means the whole, unperturbed image.
    pub region: Option<BBox>,
    pub image: &'a Image,
}

impl<'a> ScoreQuery<'a> {
    pub fn whole(image_id: &'a str, image: &'a Image) -> Self {
        Self {
            image_id,
            region: None,
            image,
        }
    }
}

pub trait Scorer: Send + Sync {
    fn num_classes(&self) -> usize;

    fn score(&self, query: &ScoreQuery<'_>) -> Result<ClassScores>;
}

pub fn predict_topk(scorer: &dyn Scorer, query: &ScoreQuery<'_>, k: usize) -> Result<Vec<usize>> {
    let c = scorer.num_classes();
    if k == 0 || k > c {
        return Err(Error::KOutOfRange { k, num_classes: c });
    }
    scorer.score(query)?.top_k(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        let s = ClassScores::new(vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(s.top_k(2).unwrap(), vec![1, 2]);
        let mut all = s.top_k(3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        let u = ClassScores::from_logits(&[0.0; 5]);
        assert_eq!(u.top_k(3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(s.top_k(0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(s.top_k(4), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn softmax_is_shift_invariant_in_argmax() {
        let a = ClassScores::from_logits(&[1.0, 3.0, -2.0]);
        let b = ClassScores::from_logits(&[101.0, 103.0, 98.0]);
        assert_eq!(a.top_k(1).unwrap(), b.top_k(1).unwrap());
        for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_unnormalized_scores() {
        assert!(ClassScores::new(vec![0.5, 0.6]).is_err());
        assert!(ClassScores::new(vec![]).is_err());
        assert!(ClassScores::new(vec![1.2, -0.2]).is_err());
    }
}
