use super::{ClassScores, ScoreQuery, Scorer};
use crate::error::{Error, Result};
use crate::imaging::{filter_downsample, Image};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Softmax-linear classifier over a coarse image descriptor.
///
/// The descriptor downsamples each channel to `downsample x downsample` cells,
/// squares every cell value and subtracts the descriptor mean. Squaring makes the
/// descriptor sensitive to how concentrated a color is, so blurring an object away
/// lowers its class evidence even though blur preserves mean intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassifierFile", into = "ClassifierFile")]
pub struct TinyClassifier {
    num_classes: usize,
    feature_dim: usize,
    downsample: usize,
    channels: usize,
    /// `num_classes x feature_dim`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    num_classes: usize,
    feature_dim: usize,
    downsample: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl TryFrom<ClassifierFile> for TinyClassifier {
    type Error = Error;

    fn try_from(f: ClassifierFile) -> Result<Self> {
        let cells = f.downsample * f.downsample;
        if f.num_classes == 0 || cells == 0 || f.feature_dim % cells != 0 {
            return Err(Error::InvalidConfig(format!(
                "classifier with {} classes, feature_dim {}, downsample {}",
                f.num_classes, f.feature_dim, f.downsample
            )));
        }
        let channels = f.feature_dim / cells;
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidConfig(format!("{channels} channels")));
        }
        if f.weights.len() != f.num_classes * f.feature_dim || f.bias.len() != f.num_classes {
            return Err(Error::InvalidConfig("weight/bias shape mismatch".into()));
        }
        if f.weights.iter().chain(&f.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Self {
            num_classes: f.num_classes,
            feature_dim: f.feature_dim,
            downsample: f.downsample,
            channels,
            weights: f.weights,
            bias: f.bias,
        })
    }
}

impl From<TinyClassifier> for ClassifierFile {
    fn from(c: TinyClassifier) -> Self {
        Self {
            num_classes: c.num_classes,
            feature_dim: c.feature_dim,
            downsample: c.downsample,
            weights: c.weights,
            bias: c.bias,
        }
    }
}

impl TinyClassifier {
    /// All-zero parameters; scores every image uniformly.
    pub fn zeros(num_classes: usize, downsample: usize, channels: usize) -> Result<Self> {
        let feature_dim = downsample * downsample * channels;
        ClassifierFile {
            num_classes,
            feature_dim,
            downsample,
            weights: vec![0.0; num_classes * feature_dim],
            bias: vec![0.0; num_classes],
        }
        .try_into()
    }

    pub fn from_parts(
        num_classes: usize,
        downsample: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let feature_dim = if num_classes == 0 { 0 } else { weights.len() / num_classes };
        ClassifierFile {
            num_classes,
            feature_dim,
            downsample,
            weights,
            bias,
        }
        .try_into()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn features(&self, img: &Image) -> Result<Vec<f64>> {
        if img.channels() != self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                got: img.channels(),
            });
        }
        Ok(descriptor(img, self.downsample))
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.feature_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn score_image(&self, img: &Image) -> Result<ClassScores> {
        let x = self.features(img)?;
        Ok(ClassScores::from_logits(&self.logits(&x)))
    }

    /// Mean cross-entropy over a labeled set.
    pub fn cross_entropy(&self, dataset: &[(Image, usize)]) -> Result<f64> {
        let mut total = 0.0;
        for (img, label) in dataset {
            let p = self.score_image(img)?.get(*label)?;
            total -= p.max(1e-300).ln();
        }
        Ok(total / dataset.len().max(1) as f64)
    }

    pub fn accuracy(&self, dataset: &[(Image, usize)]) -> Result<f64> {
        let mut hits = 0usize;
        for (img, label) in dataset {
            if self.score_image(img)?.top_k(1)?[0] == *label {
                hits += 1;
            }
        }
        Ok(hits as f64 / dataset.len().max(1) as f64)
    }
}

impl Scorer for TinyClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn score(&self, query: &ScoreQuery<'_>) -> Result<ClassScores> {
        self.score_image(query.image)
    }
}

fn descriptor(img: &Image, d: usize) -> Vec<f64> {
    let planes = filter_downsample(img, d);
    let c = planes.len();
    let mut x = vec![0.0; d * d * c];
    for (ci, p) in planes.iter().enumerate() {
        for (i, v) in p.values().iter().enumerate() {
            x[i * c + ci] = v * v;
        }
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub downsample: usize,
    /// Inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
    pub seed: u64,
    /// Train on all eight flips/transposes of every image.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.5,
            batch_size: 32,
            downsample: 16,
            num_classes: None,
            seed: 0,
            augment: true,
        }
    }
}

/// Mini-batch gradient descent on softmax cross-entropy from zero weights.
///
/// Sample order is reshuffled each epoch from `cfg.seed`, so identical inputs give
/// bit-identical parameters.
pub fn train_tiny_classifier(dataset: &[(Image, usize)], cfg: &TrainConfig) -> Result<TinyClassifier> {
    let (first, _) = dataset.first().ok_or(Error::EmptyDataset)?;
    if cfg.batch_size == 0 || cfg.downsample == 0 || !(cfg.learning_rate >= 0.0) {
        return Err(Error::InvalidConfig(format!("bad training config {cfg:?}")));
    }
    let max_label = dataset.iter().map(|(_, l)| *l).max().unwrap_or(0);
    let num_classes = cfg.num_classes.unwrap_or(max_label + 1);
    if max_label >= num_classes {
        return Err(Error::LabelOutOfRange {
            label: max_label,
            num_classes,
        });
    }
    let mut clf = TinyClassifier::zeros(num_classes, cfg.downsample, first.channels())?;
    let variants: &[u8] = if cfg.augment { &[0, 1, 2, 3, 4, 5, 6, 7] } else { &[0] };
    let mut feats = Vec::with_capacity(dataset.len() * variants.len());
    let mut labels = Vec::with_capacity(feats.capacity());
    for (img, label) in dataset {
        for &k in variants {
            feats.push(clf.features(&img.dihedral(k))?);
            labels.push(*label);
        }
    }
    let dim = clf.feature_dim;
    let mut rng = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut grad_w = vec![0.0; num_classes * dim];
    let mut grad_b = vec![0.0; num_classes];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            grad_b.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = &feats[i];
                let p = ClassScores::from_logits(&clf.logits(x));
                for (k, pk) in p.probabilities().iter().enumerate() {
                    let r = pk - if k == labels[i] { 1.0 } else { 0.0 };
                    grad_b[k] += r;
                    for (g, v) in grad_w[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                        *g += r * v;
                    }
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (w, g) in clf.weights.iter_mut().zip(&grad_w) {
                *w -= step * g;
            }
            for (b, g) in clf.bias.iter_mut().zip(&grad_b) {
                *b -= step * g;
            }
        }
    }
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Square of `color` at a random position over a dim gray noisy background.
    fn square_image(color: [f64; 3], rng: &mut crate::rng::Rng) -> Image {
        let n = 24;
        let (ox, oy) = (rng.random_range(0..12), rng.random_range(0..12));
        let mut data = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let inside = (ox..ox + 10).contains(&x) && (oy..oy + 10).contains(&y);
                let bg: f64 = 0.2 + rng.random_range(-0.05..0.05);
                for c in color {
                    data.push(if inside { c } else { bg });
                }
            }
        }
        Image::new(n, n, 3, data).unwrap()
    }

    fn red_blue(n: usize, seed: u64) -> Vec<(Image, usize)> {
        let mut rng = crate::rng::seeded(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let color = if label == 0 { [0.9, 0.15, 0.15] } else { [0.15, 0.2, 0.9] };
                (square_image(color, &mut rng), label)
            })
            .collect()
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let clf = TinyClassifier::zeros(4, 4, 3).unwrap();
        let img = Image::filled(8, 8, 3, 0.3).unwrap();
        let s = clf.score(&ScoreQuery::whole("x", &img)).unwrap();
        assert!(s.probabilities().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let clf = TinyClassifier::zeros(2, 4, 3).unwrap();
        let gray = Image::filled(8, 8, 1, 0.3).unwrap();
        assert!(matches!(
            clf.score_image(&gray),
            Err(Error::ChannelMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn separates_red_from_blue_squares() {
        let train = red_blue(200, 1);
        let cfg = TrainConfig {
            downsample: 8,
            ..TrainConfig::default()
        };
        let clf = train_tiny_classifier(&train, &cfg).unwrap();
        assert!(clf.accuracy(&train).unwrap() >= 0.99);
        let held_out = red_blue(60, 2);
        assert!(clf.accuracy(&held_out).unwrap() >= 0.95);
        let mut rng = crate::rng::seeded(3);
        let red = square_image([0.9, 0.15, 0.15], &mut rng);
        assert!(clf.score_image(&red).unwrap().get(0).unwrap() > 0.9);
        for (img, _) in &held_out {
            let s = clf.score_image(img).unwrap();
            assert!((s.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_class_dataset_is_confident() {
        let data: Vec<_> = red_blue(40, 4).into_iter().map(|(img, _)| (img, 0)).collect();
        let clf = train_tiny_classifier(&data, &TrainConfig::default()).unwrap();
        for (img, _) in &data {
            assert!(clf.score_image(img).unwrap().get(0).unwrap() >= 0.99);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = red_blue(50, 5);
        let cfg = TrainConfig {
            epochs: 5,
            seed: 17,
            downsample: 6,
            ..TrainConfig::default()
        };
        let a = train_tiny_classifier(&data, &cfg).unwrap();
        let b = train_tiny_classifier(&data, &cfg).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.bias(), b.bias());
    }

    #[test]
    fn full_batch_cross_entropy_never_increases() {
        let data = red_blue(40, 6);
        let mut prev = f64::INFINITY;
        let mut cfg = TrainConfig {
            batch_size: data.len(),
            downsample: 6,
            learning_rate: 0.2,
            ..TrainConfig::default()
        };
        for epochs in 0..15 {
            cfg.epochs = epochs;
            let ce = train_tiny_classifier(&data, &cfg).unwrap().cross_entropy(&data).unwrap();
            assert!(ce <= prev + 1e-6, "epoch {epochs}: {ce} > {prev}");
            prev = ce;
        }
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            train_tiny_classifier(&[], &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let data = vec![(Image::filled(4, 4, 3, 0.5).unwrap(), 3)];
        let cfg = TrainConfig {
            num_classes: Some(2),
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_tiny_classifier(&data, &cfg),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 2 })
        ));
    }

    #[test]
    fn json_layout() {
        let clf = TinyClassifier::zeros(2, 2, 1).unwrap();
        let v = serde_json::to_value(&clf).unwrap();
        assert_eq!(v["num_classes"], 2);
        assert_eq!(v["feature_dim"], 4);
        assert_eq!(v["downsample"], 2);
        assert_eq!(v["weights"].as_array().unwrap().len(), 8);
        let back: TinyClassifier = serde_json::from_value(v).unwrap();
        assert_eq!(back, clf);
        let bad = serde_json::json!({"num_classes": 2, "feature_dim": 4, "downsample": 2, "weights": [0.0], "bias": [0.0, 0.0]});
        assert!(serde_json::from_value::<TinyClassifier>(bad).is_err());
    }
}
