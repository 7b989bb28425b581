use super::{ClassScores, ScoreQuery, Scorer};
use crate::error::{Error, Result};
use crate::imaging::{io, BBox};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCacheEntry {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    pub scores: Vec<f64>,
}

/// Precomputed posteriors keyed by `(image_id, box)`.
///
/// Lets an external network score proposals offline. Whole-image queries look
/// up the box covering the full image.
#[derive(Debug, Clone, Default)]
pub struct ScoreCache {
    num_classes: usize,
    entries: HashMap<(String, [usize; 4]), ClassScores>,
}

impl ScoreCache {
    pub fn from_entries(entries: Vec<ScoreCacheEntry>) -> Result<Self> {
        let num_classes = entries.first().map(|e| e.scores.len()).unwrap_or(0);
        let mut map = HashMap::with_capacity(entries.len());
        for e in entries {
            if e.scores.len() != num_classes {
                return Err(Error::InvalidScores(format!(
                    "{} has {} scores, expected {num_classes}",
                    e.image_id,
                    e.scores.len()
                )));
            }
            BBox::try_from(e.bbox)?;
            map.insert((e.image_id, e.bbox), ClassScores::new(e.scores)?);
        }
        Ok(Self {
            num_classes,
            entries: map,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<ScoreCacheEntry> = io::read_json(path)?;
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Scorer for ScoreCache {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn score(&self, query: &ScoreQuery<'_>) -> Result<ClassScores> {
        let bbox = query
            .region
            .unwrap_or_else(|| query.image.full_box())
            .to_array();
        self.entries
            .get(&(query.image_id.to_string(), bbox))
            .cloned()
            .ok_or_else(|| Error::ScoreMissing {
                image_id: query.image_id.to_string(),
                bbox,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;

    #[test]
    fn lookup_by_image_and_box() {
        let json = r#"[
            {"image_id": "a", "box": [0, 0, 2, 2], "scores": [0.25, 0.75]},
            {"image_id": "a", "box": [0, 0, 4, 4], "scores": [0.5, 0.5]}
        ]"#;
        let entries: Vec<ScoreCacheEntry> = serde_json::from_str(json).unwrap();
        let cache = ScoreCache::from_entries(entries).unwrap();
        assert_eq!(cache.num_classes(), 2);
        let img = Image::filled(4, 4, 3, 0.0).unwrap();
        let q = ScoreQuery {
            image_id: "a",
            region: Some(BBox::new(0, 0, 2, 2).unwrap()),
            image: &img,
        };
        assert_eq!(cache.score(&q).unwrap().get(1).unwrap(), 0.75);
        assert_eq!(cache.score(&ScoreQuery::whole("a", &img)).unwrap().get(0).unwrap(), 0.5);
        assert!(matches!(
            cache.score(&ScoreQuery::whole("b", &img)),
            Err(Error::ScoreMissing { .. })
        ));
    }

    #[test]
    fn rejects_inconsistent_class_counts() {
        let entries = vec![
            ScoreCacheEntry {
                image_id: "a".into(),
                bbox: [0, 0, 1, 1],
                scores: vec![1.0],
            },
            ScoreCacheEntry {
                image_id: "b".into(),
                bbox: [0, 0, 1, 1],
                scores: vec![0.5, 0.5],
            },
        ];
        assert!(ScoreCache::from_entries(entries).is_err());
    }
}
