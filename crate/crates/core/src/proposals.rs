//! Discriminative proposal mining.
//!
//! Every attention map is Otsu-thresholded and split into connected regions.
//! Each region's tight box is scored by keeping the image sharp inside the box,
//! blurring everything else, and reading the classifier's posterior for the
//! image label. The best `k` boxes across all maps form the pool.

use crate::error::{Error, Result};
use crate::imaging::{self, io, BBox, GrayMap, Image};
use crate::scorer::{ScoreQuery, Scorer};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::path::Path;

/// `N` single-channel maps sharing one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    width: usize,
    height: usize,
    maps: Vec<GrayMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSidecar {
    pub n_maps: usize,
    pub height: usize,
    pub width: usize,
}

impl AttentionStack {
    pub fn new(maps: Vec<GrayMap>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidMap("attention stack has no maps".into()))?;
        let (width, height) = first.dims();
        if let Some(m) = maps.iter().find(|m| m.dims() != (width, height)) {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: m.dims(),
            });
        }
        Ok(Self { width, height, maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn maps(&self) -> &[GrayMap] {
        &self.maps
    }

    pub fn map(&self, index: usize) -> Option<&GrayMap> {
        self.maps.get(index)
    }

    /// Bilinearly lifts every map to `width x height`.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        if (width, height) == self.dims() {
            return Ok(self.clone());
        }
        let maps = self
            .maps
            .iter()
            .map(|m| imaging::resize_bilinear(m, width, height))
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps)
    }

    /// Reads `N x H x W` little-endian `f32` values with their
    /// `{"n_maps", "height", "width"}` sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let side: StackSidecar = io::read_json(&io::sidecar_path(path))?;
        let bytes = io::read_bytes(path)?;
        let plane = side.width * side.height;
        let values = io::decode_f32_le(&bytes, side.n_maps * plane, path)?;
        let maps = values
            .chunks_exact(plane.max(1))
            .map(|c| GrayMap::new(side.width, side.height, c.to_vec()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::parse(path, e))?;
        Self::new(maps).map_err(|e| Error::parse(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let side = StackSidecar {
            n_maps: self.len(),
            height: self.height,
            width: self.width,
        };
        let values = self.maps.iter().flat_map(|m| m.values().iter().copied());
        io::write_atomic(path, &io::encode_f32_le(values))?;
        io::write_json(&io::sidecar_path(path), &side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub map_index: usize,
    pub score: f64,
}

/// Descending score, then larger box, then lower map index.
fn rank(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.bbox.area().cmp(&a.bbox.area()))
        .then(a.map_index.cmp(&b.map_index))
}

/// Top-`k` scored boxes, best first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProposalPool {
    entries: Vec<ScoredBox>,
}

impl ProposalPool {
    /// Sorts `boxes` into pool order and keeps the first `k`.
    pub fn from_candidates(mut boxes: Vec<ScoredBox>, k: usize) -> Self {
        boxes.sort_by(rank);
        boxes.truncate(k);
        Self { entries: boxes }
    }

    pub fn entries(&self) -> &[ScoredBox] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.entries.iter().map(|e| e.bbox).collect()
    }

    pub fn best(&self) -> Option<&ScoredBox> {
        self.entries.first()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestConfig {
    /// Pool size `K`.
    pub k: usize,
    pub blur_sigma: f64,
    /// Components smaller than this are dropped before scoring.
    pub min_component_area: usize,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            k: 5,
            blur_sigma: 10.0,
            min_component_area: 4,
        }
    }
}

/// Candidate boxes of every map, in map order then component order.
pub fn candidate_boxes(stack: &AttentionStack, min_area: usize) -> Vec<(usize, BBox)> {
    let mut out = Vec::new();
    for (index, map) in stack.maps().iter().enumerate() {
        let threshold = match imaging::otsu_threshold(map) {
            Ok(t) => t,
            Err(Error::ConstantMap) => {
                log::warn!("attention map {index} is constant; skipped");
                continue;
            }
            Err(e) => unreachable!("otsu only fails on constant maps: {e}"),
        };
        let mask = imaging::binarize(map, threshold);
        out.extend(
            imaging::connected_components(&mask)
                .into_iter()
                .filter(|c| c.area() >= min_area)
                .map(|c| (index, c.bbox)),
        );
    }
    out
}

/// Builds the top-`k` discriminative proposal pool for one image.
pub fn harvest_proposals(
    img: &Image,
    image_id: &str,
    label: usize,
    stack: &AttentionStack,
    scorer: &dyn Scorer,
    cfg: &HarvestConfig,
) -> Result<ProposalPool> {
    if stack.dims() != img.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            got: stack.dims(),
        });
    }
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if label >= scorer.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: scorer.num_classes(),
        });
    }
    let candidates = candidate_boxes(stack, cfg.min_component_area);
    if candidates.is_empty() {
        return Err(Error::EmptyPool);
    }
    let scored = candidates
        .par_iter()
        .map(|&(map_index, bbox)| {
            let perturbed = imaging::blur_outside_box(img, &bbox, cfg.blur_sigma)?;
            let query = ScoreQuery {
                image_id,
                region: Some(bbox),
                image: &perturbed,
            };
            let score = scorer.score(&query)?.get(label)?;
            Ok(ScoredBox {
                bbox,
                map_index,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProposalPool::from_candidates(scored, cfg.k))
}

/// Uniform draw from the pool.
pub fn select_random_proposal<R: Rng + ?Sized>(pool: &ProposalPool, rng: &mut R) -> Result<(usize, ScoredBox)> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let i = rng.random_range(0..pool.len());
    Ok((i, pool.entries[i]))
}

/// One image's entry in a proposals file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub image_id: String,
    pub label: usize,
    pub proposals: ProposalPool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{ClassScores, TinyClassifier};

    /// Scores a box by how much of it is inside `target`.
    struct OverlapScorer {
        target: BBox,
    }

    impl Scorer for OverlapScorer {
        fn num_classes(&self) -> usize {
            2
        }

        fn score(&self, q: &ScoreQuery<'_>) -> Result<ClassScores> {
            let b = q.region.unwrap();
            let p = b.intersection_area(&self.target) as f64 / b.area() as f64;
            ClassScores::new(vec![1.0 - p, p])
        }
    }

    fn indicator(w: usize, h: usize, boxes: &[BBox]) -> GrayMap {
        let vals = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                if boxes.iter().any(|b| b.contains(x, y)) { 1.0 } else { 0.0 }
            })
            .collect();
        GrayMap::new(w, h, vals).unwrap()
    }

    #[test]
    fn rectangle_indicator_gives_its_box() {
        let b = BBox::new(3, 2, 9, 7).unwrap();
        let stack = AttentionStack::new(vec![indicator(12, 10, &[b])]).unwrap();
        let img = Image::filled(12, 10, 3, 0.5).unwrap();
        let clf = TinyClassifier::zeros(3, 4, 3).unwrap();
        let pool = harvest_proposals(&img, "i", 1, &stack, &clf, &HarvestConfig::default()).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.entries()[0].bbox, b);
        assert_eq!(pool.entries()[0].map_index, 0);
    }

    #[test]
    fn saturated_k_keeps_everything_sorted() {
        let target = BBox::new(0, 0, 6, 6).unwrap();
        let a = BBox::new(1, 1, 5, 5).unwrap();
        let b = BBox::new(4, 4, 10, 10).unwrap();
        let c = BBox::new(12, 12, 15, 15).unwrap();
        let stack = AttentionStack::new(vec![
            indicator(16, 16, &[c, b]),
            indicator(16, 16, &[a]),
            GrayMap::filled(16, 16, 0.3).unwrap(),
        ])
        .unwrap();
        let img = Image::filled(16, 16, 1, 0.5).unwrap();
        let cfg = HarvestConfig {
            k: 1_000_000,
            ..HarvestConfig::default()
        };
        let pool = harvest_proposals(&img, "i", 1, &stack, &OverlapScorer { target }, &cfg).unwrap();
        let got: Vec<_> = pool.entries().iter().map(|e| (e.bbox, e.map_index)).collect();
        assert_eq!(got, vec![(a, 1), (b, 0), (c, 0)]);
        assert!(pool.entries().windows(2).all(|w| w[0].score >= w[1].score));

        // smaller k is a prefix
        for k in 1..=3 {
            let p = harvest_proposals(&img, "i", 1, &stack, &OverlapScorer { target }, &HarvestConfig { k, ..cfg.clone() }).unwrap();
            assert_eq!(p.entries(), &pool.entries()[..k]);
        }
    }

    #[test]
    fn ties_prefer_larger_boxes_then_lower_map_index() {
        let s = |x1, m| ScoredBox {
            bbox: BBox::new(0, 0, x1, 1).unwrap(),
            map_index: m,
            score: 0.5,
        };
        let pool = ProposalPool::from_candidates(vec![s(2, 1), s(3, 2), s(2, 0)], 10);
        let got: Vec<_> = pool.entries().iter().map(|e| (e.bbox.x1, e.map_index)).collect();
        assert_eq!(got, vec![(3, 2), (2, 0), (2, 1)]);
    }

    #[test]
    fn tiny_components_are_ignored() {
        let speck = BBox::new(0, 0, 1, 3).unwrap();
        let stack = AttentionStack::new(vec![indicator(8, 8, &[speck])]).unwrap();
        let img = Image::filled(8, 8, 1, 0.5).unwrap();
        let clf = TinyClassifier::zeros(2, 2, 1).unwrap();
        let r = harvest_proposals(&img, "i", 0, &stack, &clf, &HarvestConfig::default());
        assert!(matches!(r, Err(Error::EmptyPool)));
    }

    #[test]
    fn constant_maps_give_empty_pool() {
        let stack = AttentionStack::new(vec![GrayMap::filled(8, 8, 0.2).unwrap()]).unwrap();
        let img = Image::filled(8, 8, 1, 0.5).unwrap();
        let clf = TinyClassifier::zeros(2, 2, 1).unwrap();
        assert!(matches!(
            harvest_proposals(&img, "i", 0, &stack, &clf, &HarvestConfig::default()),
            Err(Error::EmptyPool)
        ));
    }

    #[test]
    fn dimension_and_label_checks() {
        let stack = AttentionStack::new(vec![GrayMap::filled(8, 8, 0.2).unwrap()]).unwrap();
        let clf = TinyClassifier::zeros(2, 2, 1).unwrap();
        let img = Image::filled(9, 8, 1, 0.5).unwrap();
        assert!(matches!(
            harvest_proposals(&img, "i", 0, &stack, &clf, &HarvestConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let img = Image::filled(8, 8, 1, 0.5).unwrap();
        assert!(matches!(
            harvest_proposals(&img, "i", 2, &stack, &clf, &HarvestConfig::default()),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn random_selection() {
        let one = ProposalPool::from_candidates(
            vec![ScoredBox {
                bbox: BBox::new(0, 0, 1, 1).unwrap(),
                map_index: 0,
                score: 0.1,
            }],
            5,
        );
        let mut rng = crate::rng::seeded(9);
        for _ in 0..10 {
            assert_eq!(select_random_proposal(&one, &mut rng).unwrap().0, 0);
        }
        assert!(matches!(
            select_random_proposal(&ProposalPool::default(), &mut rng),
            Err(Error::EmptyPool)
        ));

        let four = ProposalPool::from_candidates(
            (0..4)
                .map(|i| ScoredBox {
                    bbox: BBox::new(0, 0, i + 1, 1).unwrap(),
                    map_index: i,
                    score: 0.5,
                })
                .collect(),
            4,
        );
        let draws = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = crate::rng::seeded(11);
        for _ in 0..draws {
            counts[select_random_proposal(&four, &mut rng).unwrap().0] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() <= 0.01, "{counts:?}");
        }
        let (mut r1, mut r2) = (crate::rng::seeded(5), crate::rng::seeded(5));
        assert_eq!(
            select_random_proposal(&four, &mut r1).unwrap(),
            select_random_proposal(&four, &mut r2).unwrap()
        );
    }

    #[test]
    fn stack_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.f32");
        let stack = AttentionStack::new(vec![
            GrayMap::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
            GrayMap::new(3, 2, vec![-1.0, 0.5, 0.25, 0.0, 8.0, 1.0]).unwrap(),
        ])
        .unwrap();
        stack.save(&p).unwrap();
        let side: serde_json::Value = io::read_json(&io::sidecar_path(&p)).unwrap();
        assert_eq!(side, serde_json::json!({"n_maps": 2, "height": 2, "width": 3}));
        assert_eq!(AttentionStack::load(&p).unwrap(), stack);
    }

    #[test]
    fn pool_record_json_layout() {
        let rec = PoolRecord {
            image_id: "img_0".into(),
            label: 2,
            proposals: ProposalPool::from_candidates(
                vec![ScoredBox {
                    bbox: BBox::new(1, 2, 3, 4).unwrap(),
                    map_index: 5,
                    score: 0.75,
                }],
                1,
            ),
        };
        let v = serde_json::to_value(&rec).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"image_id": "img_0", "label": 2,
                "proposals": [{"box": [1, 2, 3, 4], "map_index": 5, "score": 0.75}]})
        );
    }
}
