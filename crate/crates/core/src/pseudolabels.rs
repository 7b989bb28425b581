//! Stochastic pixel-wise pseudo-labels.
//!
//! Foreground pixels are drawn inside one proposal box, from the `n_plus`
//! strongest activations of the map that produced the box, with probability
//! proportional to activation. Background pixels are drawn uniformly from the
//! `n_minus` weakest activations lying outside every pool box.

use crate::error::{Error, Result};
use crate::imaging::{io, BBox, GrayMap, Image};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Candidate-pool size, either a fraction of the region area or an absolute count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSize {
    Fraction(f64),
    Count(usize),
}

impl PoolSize {
    /// Resolved against a region of `area` pixels; always within `1..=area`.
    pub fn resolve(self, area: usize) -> usize {
        let n = match self {
            PoolSize::Fraction(f) => (f * area as f64).round() as usize,
            PoolSize::Count(n) => n,
        };
        n.clamp(1, area.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_plus: PoolSize,
    pub n_minus: PoolSize,
    pub samples_per_side: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_plus: PoolSize::Fraction(0.3),
            n_minus: PoolSize::Fraction(0.3),
            samples_per_side: 10,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: PoolSize| match p {
            PoolSize::Fraction(f) => f > 0.0 && f <= 1.0,
            PoolSize::Count(n) => n >= 1,
        };
        if !ok(self.n_plus) || !ok(self.n_minus) || self.samples_per_side == 0 {
            return Err(Error::InvalidConfig(format!("sampling config {self:?}")));
        }
        Ok(())
    }
}

/// Margin above zero for the smallest weight when activations must be shifted.
const WEIGHT_EPS: f64 = 1e-8;

/// Pixel coordinate `(x, y)`.
pub type Pixel = (usize, usize);

/// Foreground candidates: the top-`n_plus` activations inside `bbox`, strongest first.
pub fn foreground_candidates(e: &GrayMap, bbox: &BBox, cfg: &SamplingConfig) -> Result<Vec<usize>> {
    bbox.within(e.width(), e.height())?;
    let w = e.width();
    let v = e.values();
    let mut idx: Vec<usize> = (bbox.y0..bbox.y1)
        .flat_map(|y| (bbox.x0..bbox.x1).map(move |x| y * w + x))
        .collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(cfg.n_plus.resolve(bbox.area()));
    Ok(idx)
}

/// Background candidates: the low-`n_minus` activations outside all `boxes`, weakest first.
pub fn background_candidates(e: &GrayMap, boxes: &[BBox], cfg: &SamplingConfig) -> Result<Vec<usize>> {
    let w = e.width();
    let v = e.values();
    let mut idx: Vec<usize> = (0..v.len())
        .filter(|&i| !boxes.iter().any(|b| b.contains(i % w, i / w)))
        .collect();
    if idx.is_empty() {
        return Err(Error::NoBackground);
    }
    let exterior = idx.len();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx.truncate(cfg.n_minus.resolve(exterior));
    Ok(idx)
}

fn to_pixel(i: usize, w: usize) -> Pixel {
    (i % w, i / w)
}

/// Draws up to `samples_per_side` distinct foreground pixels inside `bbox`.
///
/// Sampling is without replacement; each draw picks a remaining candidate with
/// probability proportional to its activation. When some candidate activation
/// is `<= 0`, all of them are first shifted by `1e-8 - min`.
pub fn sample_foreground<R: Rng + ?Sized>(
    e: &GrayMap,
    bbox: &BBox,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<Pixel>> {
    let cand = foreground_candidates(e, bbox, cfg)?;
    Ok(draw_weighted(e, &cand, cfg.samples_per_side, rng))
}

/// Sequential activation-proportional draws without replacement from `cand`.
pub(crate) fn draw_weighted<R: Rng + ?Sized>(e: &GrayMap, cand: &[usize], n: usize, rng: &mut R) -> Vec<Pixel> {
    let v = e.values();
    let min = cand.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min);
    let floor = if min > 0.0 { 0.0 } else { min - WEIGHT_EPS };
    let mut pool: Vec<(usize, f64)> = cand.iter().map(|&i| (i, v[i] - floor)).collect();
    let n = n.min(pool.len());
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = pool.iter().map(|(_, wt)| wt).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (j, (_, wt)) in pool.iter().enumerate() {
            if u < *wt {
                pick = j;
                break;
            }
            u -= wt;
        }
        let (i, _) = pool.swap_remove(pick);
        out.push(to_pixel(i, e.width()));
    }
    out
}

/// Draws up to `samples_per_side` distinct background pixels, uniformly.
pub fn sample_background<R: Rng + ?Sized>(
    e: &GrayMap,
    boxes: &[BBox],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<Pixel>> {
    let cand = background_candidates(e, boxes, cfg)?;
    Ok(draw_uniform(&cand, cfg.samples_per_side, e.width(), rng))
}

/// Uniform draws without replacement from `cand`.
pub(crate) fn draw_uniform<R: Rng + ?Sized>(cand: &[usize], n: usize, width: usize, rng: &mut R) -> Vec<Pixel> {
    let n = n.min(cand.len());
    rand::seq::index::sample(rng, cand.len(), n)
        .into_iter()
        .map(|j| to_pixel(cand[j], width))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PixelLabel {
    Background,
    Foreground,
    Unknown,
}

/// Partial per-pixel supervision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMask {
    width: usize,
    height: usize,
    labels: Vec<PixelLabel>,
}

impl PseudoLabelMask {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[PixelLabel] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> PixelLabel {
        self.labels[y * self.width + x]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != PixelLabel::Unknown).count()
    }

    /// Gray image with foreground 255, background 0 and unknown 128.
    pub fn to_image(&self) -> Image {
        let data = self
            .labels
            .iter()
            .map(|l| match l {
                PixelLabel::Foreground => 1.0,
                PixelLabel::Background => 0.0,
                PixelLabel::Unknown => 128.0 / 255.0,
            })
            .collect();
        Image::new(self.width, self.height, 1, data).expect("valid dims")
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        io::write_pnm(path, &self.to_image())
    }
}

pub fn build_pseudo_mask(fg: &[Pixel], bg: &[Pixel], width: usize, height: usize) -> Result<PseudoLabelMask> {
    let mut labels = vec![PixelLabel::Unknown; width * height];
    for (set, label) in [(fg, PixelLabel::Foreground), (bg, PixelLabel::Background)] {
        for &(x, y) in set {
            if x >= width || y >= height {
                return Err(Error::OutOfBounds { x, y, width, height });
            }
            let slot = &mut labels[y * width + x];
            if *slot != PixelLabel::Unknown && *slot != label {
                return Err(Error::Overlap { x, y });
            }
            *slot = label;
        }
    }
    if labels.iter().all(|l| *l == PixelLabel::Unknown) {
        return Err(Error::AllUnknown);
    }
    Ok(PseudoLabelMask {
        width,
        height,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ramp(w: usize, h: usize) -> GrayMap {
        GrayMap::new(w, h, (0..w * h).map(|i| i as f64 / (w * h) as f64).collect()).unwrap()
    }

    #[test]
    fn exhaustive_foreground_returns_whole_box() {
        let e = ramp(6, 6);
        let b = BBox::new(1, 2, 4, 4).unwrap();
        let cfg = SamplingConfig {
            n_plus: PoolSize::Count(6),
            samples_per_side: 6,
            ..SamplingConfig::default()
        };
        let got: HashSet<_> = sample_foreground(&e, &b, &cfg, &mut crate::rng::seeded(0))
            .unwrap()
            .into_iter()
            .collect();
        let want: HashSet<_> = (2..4).flat_map(|y| (1..4).map(move |x| (x, y))).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn single_hot_candidate_always_drawn() {
        let mut vals = vec![0.0; 25];
        vals[2 * 5 + 3] = 1.0;
        let e = GrayMap::new(5, 5, vals).unwrap();
        let cfg = SamplingConfig {
            n_plus: PoolSize::Count(1),
            samples_per_side: 3,
            ..SamplingConfig::default()
        };
        let mut rng = crate::rng::seeded(1);
        for _ in 0..20 {
            assert_eq!(sample_foreground(&e, &BBox::full(5, 5), &cfg, &mut rng).unwrap(), vec![(3, 2)]);
        }
    }

    #[test]
    fn foreground_stays_in_box_and_top_candidates() {
        let e = ramp(10, 10);
        let b = BBox::new(2, 2, 8, 8).unwrap();
        let cfg = SamplingConfig::default();
        let kth = {
            let mut inside: Vec<f64> = (2..8).flat_map(|y| (2..8).map(move |x| (x, y))).map(|(x, y)| e.get(x, y)).collect();
            inside.sort_by(|a, b| b.total_cmp(a));
            inside[cfg.n_plus.resolve(36) - 1]
        };
        let mut rng = crate::rng::seeded(2);
        for _ in 0..50 {
            let s = sample_foreground(&e, &b, &cfg, &mut rng).unwrap();
            assert_eq!(s.len(), 10);
            assert_eq!(s.iter().collect::<HashSet<_>>().len(), 10);
            for &(x, y) in &s {
                assert!(b.contains(x, y));
                assert!(e.get(x, y) >= kth);
            }
        }
    }

    #[test]
    fn background_avoids_boxes_and_takes_low_activations() {
        let e = ramp(10, 10);
        let boxes = [BBox::new(0, 0, 5, 5).unwrap(), BBox::new(6, 6, 10, 10).unwrap()];
        let cfg = SamplingConfig {
            n_minus: PoolSize::Count(12),
            ..SamplingConfig::default()
        };
        let cand = background_candidates(&e, &boxes, &cfg).unwrap();
        assert_eq!(cand.len(), 12);
        let mut rng = crate::rng::seeded(3);
        for _ in 0..50 {
            for (x, y) in sample_background(&e, &boxes, &cfg, &mut rng).unwrap() {
                assert!(boxes.iter().all(|b| !b.contains(x, y)));
                assert!(cand.contains(&(y * 10 + x)));
            }
        }
    }

    #[test]
    fn full_cover_has_no_background() {
        let e = ramp(4, 4);
        let r = sample_background(&e, &[BBox::full(4, 4)], &SamplingConfig::default(), &mut crate::rng::seeded(0));
        assert!(matches!(r, Err(Error::NoBackground)));
    }

    #[test]
    fn single_exterior_pixel() {
        let e = ramp(3, 3);
        let boxes = [BBox::new(0, 0, 3, 2).unwrap(), BBox::new(0, 2, 2, 3).unwrap()];
        let cfg = SamplingConfig {
            n_minus: PoolSize::Count(1),
            ..SamplingConfig::default()
        };
        let mut rng = crate::rng::seeded(4);
        for _ in 0..10 {
            assert_eq!(sample_background(&e, &boxes, &cfg, &mut rng).unwrap(), vec![(2, 2)]);
        }
    }

    #[test]
    fn resampling_varies_between_steps() {
        let e = ramp(20, 20);
        let b = BBox::new(0, 0, 10, 10).unwrap();
        let cfg = SamplingConfig::default();
        let mut rng = crate::rng::seeded(5);
        let a = sample_foreground(&e, &b, &cfg, &mut rng).unwrap();
        let c = sample_foreground(&e, &b, &cfg, &mut rng).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn build_mask_examples() {
        let m = build_pseudo_mask(&[(1, 1)], &[(0, 0)], 2, 2).unwrap();
        assert_eq!(
            m.labels(),
            &[PixelLabel::Background, PixelLabel::Unknown, PixelLabel::Unknown, PixelLabel::Foreground]
        );
        let fg_only = build_pseudo_mask(&[(0, 1)], &[], 2, 2).unwrap();
        assert_eq!(fg_only.labeled_count(), 1);
        assert!(matches!(build_pseudo_mask(&[(0, 0)], &[(0, 0)], 2, 2), Err(Error::Overlap { .. })));
        assert!(matches!(build_pseudo_mask(&[(2, 0)], &[], 2, 2), Err(Error::OutOfBounds { .. })));
        assert!(matches!(build_pseudo_mask(&[], &[], 2, 2), Err(Error::AllUnknown)));
    }

    #[test]
    fn mask_export_levels() {
        let m = build_pseudo_mask(&[(1, 0)], &[(0, 0)], 3, 1).unwrap();
        let bytes = io::encode_pnm(&m.to_image());
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 255, 128]);
    }

    #[test]
    fn pool_size_json_forms() {
        let cfg: SamplingConfig =
            serde_json::from_str(r#"{"n_plus": {"fraction": 0.5}, "n_minus": {"count": 7}, "samples_per_side": 4}"#).unwrap();
        assert_eq!(cfg.n_plus.resolve(10), 5);
        assert_eq!(cfg.n_minus.resolve(100), 7);
        assert_eq!(cfg.n_minus.resolve(3), 3);
        assert_eq!(PoolSize::Fraction(0.01).resolve(10), 1);
    }

    fn single_draw_frequencies(values: Vec<f64>, draws: usize) -> Vec<f64> {
        let n = values.len();
        let e = GrayMap::new(n, 1, values).unwrap();
        let cand: Vec<usize> = (0..n).collect();
        let mut rng = crate::rng::seeded(11);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            let (x, _) = draw_weighted(&e, &cand, 1, &mut rng)[0];
            counts[x] += 1;
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn positive_activations_are_used_as_weights() {
        let f = single_draw_frequencies(vec![1.0, 2.0, 3.0], 30_000);
        for (got, want) in f.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 0.015, "{f:?}");
        }
    }

    #[test]
    fn non_positive_activations_are_shifted_above_zero() {
        let f = single_draw_frequencies(vec![-1.0, 0.0, 1.0], 30_000);
        assert!(f[0] < 1e-3, "{f:?}");
        assert!((f[2] - 2.0 / 3.0).abs() < 0.015, "{f:?}");
    }
}
