//! Per-image optimization of localization logits.
//!
//! Each step draws one proposal uniformly from the pool, resamples foreground
//! pixels inside it (from the map that produced it) and background pixels
//! outside every pool box, then takes a plain gradient step on the combined
//! partial cross-entropy and CRF loss.

use crate::error::{Error, Result};
use crate::imaging::{BBox, BinaryMask, Image};
use crate::losses::{self, Affinity, AffinityParams, LocalizationMap, MapLogits};
use crate::proposals::{select_random_proposal, AttentionStack, ProposalPool};
use crate::pseudolabels::{self, build_pseudo_mask, SamplingConfig};
use crate::rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the partial cross-entropy term.
    pub lambda_pce: f64,
    /// Weight of the CRF term.
    pub lambda_crf: f64,
    pub sampling: SamplingConfig,
    pub affinity: AffinityParams,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.5,
            lambda_pce: 1.0,
            lambda_crf: 2e-9,
            sampling: SamplingConfig::default(),
            affinity: AffinityParams::default(),
            seed: 0,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        // a zero rate is allowed: it reproduces the uniform initial map
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.lambda_pce >= 0.0) || !(self.lambda_crf >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        self.sampling.validate()?;
        self.affinity.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Index into the proposal pool.
    pub proposal: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptTrace {
    pub steps: Vec<TraceStep>,
}

impl OptTrace {
    /// Mean loss over the first and last `fraction` of the steps.
    pub fn head_tail_means(&self, fraction: f64) -> (f64, f64) {
        let n = self.steps.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let mean = |s: &[TraceStep]| s.iter().map(|t| t.loss).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.steps[..k.min(n)]), mean(&self.steps[n.saturating_sub(k)..]))
    }
}

/// Gradient descent on zero-initialized logits. Deterministic given `cfg.seed`.
pub fn optimize_map(
    img: &Image,
    stack: &AttentionStack,
    pool: &ProposalPool,
    cfg: &OptConfig,
) -> Result<(LocalizationMap, OptTrace)> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if stack.dims() != img.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            got: stack.dims(),
        });
    }
    let (w, h) = img.dims();
    let pool_boxes: Vec<BBox> = pool.boxes();

    // candidate pools only depend on the box and its source map
    let mut fg_cand = Vec::with_capacity(pool.len());
    let mut bg_cand = Vec::with_capacity(pool.len());
    for entry in pool.entries() {
        let e = stack.map(entry.map_index).ok_or_else(|| {
            Error::InvalidArgument(format!("proposal map index {} >= {}", entry.map_index, stack.len()))
        })?;
        fg_cand.push(pseudolabels::foreground_candidates(e, &entry.bbox, &cfg.sampling)?);
        bg_cand.push(match pseudolabels::background_candidates(e, &pool_boxes, &cfg.sampling) {
            Ok(c) => c,
            Err(Error::NoBackground) => Vec::new(),
            Err(err) => return Err(err),
        });
    }

    let affinity = if cfg.lambda_crf != 0.0 {
        Some(Affinity::new(img, &cfg.affinity)?)
    } else {
        None
    };
    let mut rng = rng::seeded(cfg.seed);
    let mut logits = MapLogits::zeros(w, h);
    let mut trace = OptTrace::default();
    for _ in 0..cfg.steps {
        let (idx, entry) = select_random_proposal(pool, &mut rng)?;
        let e = &stack.maps()[entry.map_index];
        let mut fg = pseudolabels::draw_weighted(e, &fg_cand[idx], cfg.sampling.samples_per_side, &mut rng);
        let mut bg = pseudolabels::draw_uniform(&bg_cand[idx], cfg.sampling.samples_per_side, w, &mut rng);
        if !bg.is_empty() {
            let n = fg.len().min(bg.len());
            fg.truncate(n);
            bg.truncate(n);
        }
        let y = build_pseudo_mask(&fg, &bg, w, h)?;
        let s = losses::softmax_map(&logits);
        let (parts, grad) = losses::total_loss_with(&y, &s, affinity.as_ref(), cfg.lambda_pce, cfg.lambda_crf)?;
        logits.add_scaled(&grad, -cfg.learning_rate);
        trace.steps.push(TraceStep {
            proposal: idx,
            loss: parts.total,
        });
    }
    Ok((losses::softmax_map(&logits), trace))
}

/// Foreground channel strictly above `tau`.
pub fn binarize_map(s: &LocalizationMap, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside [0, 1]")));
    }
    BinaryMask::new(s.width(), s.height(), s.fg().iter().map(|&v| v > tau).collect())
}
