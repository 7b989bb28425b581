//! File-level pipeline stages: train-scorer, harvest, optimize and evaluate.
//!
//! Stages only communicate through files in the output directory:
//!
//! ```text
//! scorer.json  scorer_report.json          train-scorer
//! proposals.jsonl                          harvest
//! maps/<id>.f32 (+ .json)  traces/<id>.json optimize
//! report.json  curve.csv                   evaluate
//! ```
//!
//! Every stage computes all results before writing anything, and every file is
//! replaced atomically.

use crate::error::{Error, Result};
use crate::eval::{self, GtAnnotation, MetricsReport};
use crate::imaging::{self, io, GrayMap, Image};
use crate::losses::LocalizationMap;
use crate::mapopt::{self, OptConfig, OptTrace};
use crate::proposals::{self, AttentionStack, HarvestConfig, PoolRecord, ProposalPool};
use crate::rng;
use crate::scorer::{self, ScoreCache, ScoreQuery, Scorer, TinyClassifier, TrainConfig};
use crate::synth::SynthSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCORER_FILE: &str = "scorer.json";
pub const SCORER_REPORT_FILE: &str = "scorer_report.json";
pub const PROPOSALS_FILE: &str = "proposals.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub label: usize,
    /// Binary PPM, relative to the manifest.
    pub image: String,
    /// Raw attention stack, relative to the manifest; its sidecar sits next to it.
    pub attention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Ground-truth JSON-lines file, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<String>,
    pub images: Vec<ManifestEntry>,
}

/// Which maps `evaluate` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    #[default]
    Optimized,
    /// Source attention map of each image's top-ranked proposal, min-max normalized.
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Manifest path, relative to the config file.
    pub dataset: PathBuf,
    /// Output directory, relative to the config file.
    pub output: PathBuf,
    /// Seeds every stage: the scorer trains with it and each image optimizes with
    /// `seed ^ hash(image_id)`. The nested `scorer.seed` and `optimize.seed` are overridden.
    pub seed: u64,
    /// Square working resolution for images and maps; native size when absent.
    pub working_size: Option<usize>,
    pub scorer: TrainConfig,
    /// Precomputed scores used instead of the trained classifier when set.
    pub score_cache: Option<PathBuf>,
    pub harvest: HarvestConfig,
    pub optimize: OptConfig,
    pub map_source: MapSource,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "manifest.json".into(),
            output: "run".into(),
            seed: 0,
            working_size: Some(224),
            scorer: TrainConfig::default(),
            score_cache: None,
            harvest: HarvestConfig::default(),
            optimize: OptConfig::default(),
            map_source: MapSource::Optimized,
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    /// Settings for a generated corpus, which is small enough to run at native size.
    pub fn for_synthetic(spec: &SynthSpec) -> Self {
        let mut cfg = Self {
            seed: spec.seed,
            working_size: None,
            ..Self::default()
        };
        cfg.harvest.k = 3;
        cfg.harvest.blur_sigma = 6.0 * spec.image_size as f64 / 64.0;
        cfg.optimize.lambda_crf = 0.05;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_bytes(path)?;
        let mut cfg: Self = serde_json::from_slice(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.working_size == Some(0) {
            return Err(Error::InvalidConfig("working_size must be positive".into()));
        }
        if self.harvest.k == 0 || !(self.harvest.blur_sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("harvest config {:?}", self.harvest)));
        }
        if self.scorer.batch_size == 0 || self.scorer.downsample == 0 {
            return Err(Error::InvalidConfig(format!("scorer config {:?}", self.scorer)));
        }
        self.optimize.validate()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }
}

/// A manifest plus the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    working: Option<usize>,
}

impl Dataset {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let path = cfg.resolve(&cfg.dataset);
        let manifest: Manifest = io::read_json(&path)?;
        if manifest.images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(e) = manifest.images.iter().find(|e| e.label >= manifest.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: e.label,
                num_classes: manifest.num_classes,
            });
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            manifest,
            working: cfg.working_size,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.images
    }

    pub fn working_dims(&self) -> (usize, usize) {
        match self.working {
            Some(s) => (s, s),
            None => (self.manifest.width, self.manifest.height),
        }
    }

    /// Image at working resolution.
    pub fn image(&self, e: &ManifestEntry) -> Result<Image> {
        let img = io::read_pnm(&self.root.join(&e.image))?;
        let (w, h) = self.working_dims();
        imaging::resize_image(&img, w, h)
    }

    /// Attention stack at working resolution.
    pub fn stack(&self, e: &ManifestEntry) -> Result<AttentionStack> {
        let (w, h) = self.working_dims();
        AttentionStack::load(&self.root.join(&e.attention))?.resized(w, h)
    }

    pub fn ground_truth(&self) -> Result<Vec<GtAnnotation>> {
        let rel = self
            .manifest
            .gt
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("manifest has no ground-truth file".into()))?;
        let gts = eval::load_ground_truth(&self.root.join(rel))?;
        self.entries()
            .iter()
            .map(|e| {
                gts.iter()
                    .find(|g| g.image_id == e.image_id)
                    .cloned()
                    .ok_or_else(|| Error::MissingGtBox(e.image_id.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub num_train: usize,
    pub num_heldout: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
}

/// Every fifth image (indices 4, 9, ...) is held out.
pub fn is_heldout(index: usize) -> bool {
    index % 5 == 4
}

pub fn train_scorer(cfg: &RunConfig) -> Result<TrainSummary> {
    let ds = Dataset::open(cfg)?;
    let samples = ds
        .entries()
        .par_iter()
        .map(|e| Ok((ds.image(e)?, e.label)))
        .collect::<Result<Vec<_>>>()?;
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if is_heldout(i) {
            heldout.push(s);
        } else {
            train.push(s);
        }
    }
    if train.is_empty() {
        train = std::mem::take(&mut heldout);
    }
    let tc = TrainConfig {
        num_classes: Some(ds.manifest.num_classes),
        seed: cfg.seed,
        ..cfg.scorer.clone()
    };
    let clf = scorer::train_tiny_classifier(&train, &tc)?;
    let summary = TrainSummary {
        num_train: train.len(),
        num_heldout: heldout.len(),
        train_accuracy: clf.accuracy(&train)?,
        heldout_accuracy: if heldout.is_empty() { None } else { Some(clf.accuracy(&heldout)?) },
    };
    log::info!(
        "trained on {} images, held-out accuracy {:?}",
        summary.num_train,
        summary.heldout_accuracy
    );
    let out = cfg.output_dir();
    io::write_json(&out.join(SCORER_FILE), &clf)?;
    io::write_json(&out.join(SCORER_REPORT_FILE), &summary)?;
    Ok(summary)
}

fn load_scorer(cfg: &RunConfig) -> Result<Box<dyn Scorer>> {
    match &cfg.score_cache {
        Some(p) => Ok(Box::new(ScoreCache::load(&cfg.resolve(p))?)),
        None => Ok(Box::new(io::read_json::<TinyClassifier>(&cfg.output_dir().join(SCORER_FILE))?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestSummary {
    pub num_images: usize,
    pub mean_pool_size: f64,
}

pub fn harvest(cfg: &RunConfig) -> Result<HarvestSummary> {
    let ds = Dataset::open(cfg)?;
    let scorer = load_scorer(cfg)?;
    if scorer.num_classes() != ds.manifest.num_classes {
        return Err(Error::InvalidConfig(format!(
            "scorer has {} classes, dataset {}",
            scorer.num_classes(),
            ds.manifest.num_classes
        )));
    }
    let records = ds
        .entries()
        .par_iter()
        .map(|e| {
            let img = ds.image(e)?;
            let stack = ds.stack(e)?;
            let pool = proposals::harvest_proposals(&img, &e.image_id, e.label, &stack, scorer.as_ref(), &cfg.harvest)?;
            Ok(PoolRecord {
                image_id: e.image_id.clone(),
                label: e.label,
                proposals: pool,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("harvested proposal pools for {} images", records.len());
    write_jsonl(&cfg.output_dir().join(PROPOSALS_FILE), &records)?;
    Ok(HarvestSummary {
        num_images: records.len(),
        mean_pool_size: records.iter().map(|r| r.proposals.len()).sum::<usize>() as f64 / records.len() as f64,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::parse(path, e))?;
        out.push(b'\n');
    }
    io::write_atomic(path, &out)
}

pub fn load_proposals(path: &Path) -> Result<Vec<PoolRecord>> {
    let text = String::from_utf8(io::read_bytes(path)?).map_err(|e| Error::parse(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse(path, e)))
        .collect()
}

fn pool_for<'a>(records: &'a [PoolRecord], image_id: &str, path: &Path) -> Result<&'a ProposalPool> {
    records
        .iter()
        .find(|r| r.image_id == image_id)
        .map(|r| &r.proposals)
        .ok_or_else(|| Error::parse(path, format!("no proposals for {image_id}")))
}

pub fn map_path(out: &Path, image_id: &str) -> PathBuf {
    out.join("maps").join(format!("{image_id}.f32"))
}

pub fn trace_path(out: &Path, image_id: &str) -> PathBuf {
    out.join("traces").join(format!("{image_id}.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub num_images: usize,
    pub mean_initial_loss: f64,
    pub mean_final_loss: f64,
}

/// Optimizes one image with its own rng stream derived from the global seed.
pub fn optimize_image(
    cfg: &RunConfig,
    img: &Image,
    stack: &AttentionStack,
    pool: &ProposalPool,
    image_id: &str,
) -> Result<(LocalizationMap, OptTrace)> {
    let oc = OptConfig {
        seed: rng::image_seed(cfg.seed, image_id),
        ..cfg.optimize.clone()
    };
    mapopt::optimize_map(img, stack, pool, &oc)
}

pub fn optimize(cfg: &RunConfig) -> Result<OptimizeSummary> {
    let ds = Dataset::open(cfg)?;
    let out = cfg.output_dir();
    let proposals_path = out.join(PROPOSALS_FILE);
    let records = load_proposals(&proposals_path)?;
    let results = ds
        .entries()
        .par_iter()
        .map(|e| {
            let pool = pool_for(&records, &e.image_id, &proposals_path)?;
            optimize_image(cfg, &ds.image(e)?, &ds.stack(e)?, pool, &e.image_id)
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("optimized {} maps ({} steps each)", results.len(), cfg.optimize.steps);
    ds.entries()
        .par_iter()
        .zip(&results)
        .try_for_each(|(e, (s, trace))| -> Result<()> {
            let fg = GrayMap::new(s.width(), s.height(), s.fg().to_vec())?;
            io::write_gray_map(&map_path(&out, &e.image_id), &fg)?;
            io::write_json(&trace_path(&out, &e.image_id), trace)
        })?;
    let n = results.len() as f64;
    let first = |t: &OptTrace| t.steps.first().map_or(0.0, |s| s.loss);
    let last = |t: &OptTrace| t.steps.last().map_or(0.0, |s| s.loss);
    Ok(OptimizeSummary {
        num_images: results.len(),
        mean_initial_loss: results.iter().map(|(_, t)| first(t)).sum::<f64>() / n,
        mean_final_loss: results.iter().map(|(_, t)| last(t)).sum::<f64>() / n,
    })
}

/// Lifts a map to `w x h` with values kept in `[0, 1]`.
fn to_eval_map(map: &GrayMap, w: usize, h: usize) -> Result<LocalizationMap> {
    let m = imaging::resize_bilinear(map, w, h)?;
    LocalizationMap::from_foreground(w, h, m.into_values().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Maps to evaluate, at the original image resolution, in manifest order.
pub fn load_eval_maps(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<LocalizationMap>> {
    let out = cfg.output_dir();
    let (w, h) = (ds.manifest.width, ds.manifest.height);
    match cfg.map_source {
        MapSource::Optimized => ds
            .entries()
            .par_iter()
            .map(|e| to_eval_map(&io::read_gray_map(&map_path(&out, &e.image_id))?, w, h))
            .collect(),
        MapSource::Attention => {
            let path = out.join(PROPOSALS_FILE);
            let records = load_proposals(&path)?;
            ds.entries()
                .par_iter()
                .map(|e| {
                    let best = pool_for(&records, &e.image_id, &path)?.best().ok_or(Error::EmptyPool)?;
                    let stack = AttentionStack::load(&ds.root.join(&e.attention))?;
                    let map = stack.map(best.map_index).ok_or_else(|| {
                        Error::parse(&path, format!("{}: map index {}", e.image_id, best.map_index))
                    })?;
                    to_eval_map(&map.min_max_normalized(), w, h)
                })
                .collect()
        }
    }
}

/// Whole-image top-`k` class predictions from the trained scorer.
fn predictions(cfg: &RunConfig, ds: &Dataset, k: usize) -> Result<Vec<Vec<usize>>> {
    let clf: TinyClassifier = io::read_json(&cfg.output_dir().join(SCORER_FILE))?;
    ds.entries()
        .par_iter()
        .map(|e| {
            let img = ds.image(e)?;
            scorer::predict_topk(&clf, &ScoreQuery::whole(&e.image_id, &img), k)
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig) -> Result<MetricsReport> {
    let ds = Dataset::open(cfg)?;
    let gts = ds.ground_truth()?;
    let maps = load_eval_maps(cfg, &ds)?;
    let out = cfg.output_dir();
    let preds = if out.join(SCORER_FILE).exists() {
        Some(predictions(cfg, &ds, ds.manifest.num_classes.min(5))?)
    } else {
        log::info!("no trained scorer in {}; top-k localization skipped", out.display());
        None
    };
    let (report, sweep) = eval::evaluate(&maps, &gts, preds.as_deref())?;
    log::info!("evaluated {} {:?} maps", report.num_images, cfg.map_source);
    io::write_json(&out.join(REPORT_FILE), &report)?;
    io::write_atomic(&out.join(CURVE_FILE), eval::curve_csv(&sweep).as_bytes())?;
    Ok(report)
}
