//! Localization objective: partial cross-entropy on sampled pixels plus a
//! pairwise CRF regularizer, with gradients taken with respect to per-pixel
//! two-channel logits.

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image};
use crate::pseudolabels::{PixelLabel, PseudoLabelMask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Unconstrained two-channel scores; index 0 is background, 1 foreground.
///
/// Also used for gradients with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MapLogits {
    width: usize,
    height: usize,
    bg: Vec<f64>,
    fg: Vec<f64>,
}

impl MapLogits {
    pub fn new(width: usize, height: usize, bg: Vec<f64>, fg: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if n == 0 || bg.len() != n || fg.len() != n {
            return Err(Error::InvalidMap(format!("logits do not match {width}x{height}")));
        }
        if bg.iter().chain(&fg).any(|v| !v.is_finite()) {
            return Err(Error::InvalidMap("non-finite logit".into()));
        }
        Ok(Self { width, height, bg, fg })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bg: vec![0.0; width * height],
            fg: vec![0.0; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bg(&self) -> &[f64] {
        &self.bg
    }

    pub fn fg(&self) -> &[f64] {
        &self.fg
    }

    pub fn bg_mut(&mut self) -> &mut [f64] {
        &mut self.bg
    }

    pub fn fg_mut(&mut self) -> &mut [f64] {
        &mut self.fg
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MapLogits, scale: f64) {
        for (a, b) in self.bg.iter_mut().zip(&other.bg) {
            *a += scale * b;
        }
        for (a, b) in self.fg.iter_mut().zip(&other.fg) {
            *a += scale * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.bg.iter().chain(&self.fg).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Softmax-normalized background/foreground maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    width: usize,
    height: usize,
    bg: Vec<f64>,
    fg: Vec<f64>,
}

impl LocalizationMap {
    /// Builds a map from its foreground channel; background is `1 - fg`.
    pub fn from_foreground(width: usize, height: usize, fg: Vec<f64>) -> Result<Self> {
        if width * height == 0 || fg.len() != width * height {
            return Err(Error::InvalidMap(format!("map does not match {width}x{height}")));
        }
        if fg.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidMap("foreground probability outside [0, 1]".into()));
        }
        let bg = fg.iter().map(|v| 1.0 - v).collect();
        Ok(Self { width, height, bg, fg })
    }

    /// `0.9` on the mask and `0.1` elsewhere when `soft`, else exactly 1/0.
    pub fn from_mask(mask: &BinaryMask, soft: bool) -> Self {
        let (on, off) = if soft { (0.9, 0.1) } else { (1.0, 0.0) };
        let fg = mask.bits().iter().map(|&b| if b { on } else { off }).collect();
        Self::from_foreground(mask.width(), mask.height(), fg).expect("valid probabilities")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bg(&self) -> &[f64] {
        &self.bg
    }

    pub fn fg(&self) -> &[f64] {
        &self.fg
    }

    pub fn channel(&self, r: usize) -> &[f64] {
        if r == 0 {
            &self.bg
        } else {
            &self.fg
        }
    }
}

/// Per-pixel two-way softmax with max subtraction.
pub fn softmax_map(logits: &MapLogits) -> LocalizationMap {
    let (bg, fg) = logits
        .bg
        .iter()
        .zip(&logits.fg)
        .map(|(&z0, &z1)| {
            let m = z0.max(z1);
            let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
            let s = e0 + e1;
            (e0 / s, e1 / s)
        })
        .unzip();
    LocalizationMap {
        width: logits.width,
        height: logits.height,
        bg,
        fg,
    }
}

const LOG_CLAMP: f64 = 1e-12;

fn check_dims(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Cross-entropy summed over labeled pixels; gradient is `S - onehot` there
/// and zero at unknown pixels.
pub fn partial_ce(y: &PseudoLabelMask, s: &LocalizationMap) -> Result<(f64, MapLogits)> {
    check_dims(s.dims(), y.dims())?;
    let mut grad = MapLogits::zeros(s.width, s.height);
    let mut loss = 0.0;
    let mut labeled = 0usize;
    for (i, label) in y.labels().iter().enumerate() {
        let target = match label {
            PixelLabel::Unknown => continue,
            PixelLabel::Background => 0,
            PixelLabel::Foreground => 1,
        };
        labeled += 1;
        let p = s.channel(target)[i].clamp(LOG_CLAMP, 1.0);
        loss -= p.ln();
        grad.bg[i] = s.bg[i] - if target == 0 { 1.0 } else { 0.0 };
        grad.fg[i] = s.fg[i] - if target == 1 { 1.0 } else { 0.0 };
    }
    if labeled == 0 {
        return Err(Error::AllUnknown);
    }
    Ok((loss, grad))
}

/// Gaussian kernel parameters for the pairwise affinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffinityParams {
    pub sigma_spatial: f64,
    pub sigma_color: f64,
    /// Chebyshev neighbourhood radius; weights beyond it are zero.
    pub radius: usize,
}

impl Default for AffinityParams {
    fn default() -> Self {
        Self {
            sigma_spatial: 2.0,
            sigma_color: 0.1,
            radius: 5,
        }
    }
}

impl AffinityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_spatial > 0.0) || !(self.sigma_color > 0.0) || self.radius < 1 {
            return Err(Error::InvalidConfig(format!("affinity params {self:?}")));
        }
        Ok(())
    }
}

/// Truncated pairwise affinity `W` of one image, stored per pixel over a fixed
/// list of neighbour offsets.
///
/// `W[i, j] = exp(-|p_i - p_j|^2 / 2 sigma_s^2 - |c_i - c_j|^2 / 2 sigma_c^2)` for
/// `0 < chebyshev(i, j) <= radius`; zero on the diagonal and beyond the radius.
#[derive(Debug, Clone)]
pub struct Affinity {
    width: usize,
    height: usize,
    offsets: Vec<(isize, isize)>,
    /// `weights[i * offsets.len() + k]`, zero where the neighbour is off-grid.
    weights: Vec<f64>,
    /// Row sums `W 1`.
    degree: Vec<f64>,
}

impl Affinity {
    pub fn new(img: &Image, params: &AffinityParams) -> Result<Self> {
        params.validate()?;
        let (w, h) = img.dims();
        let r = params.radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|&o| o != (0, 0))
            .collect();
        let two_ss = 2.0 * params.sigma_spatial * params.sigma_spatial;
        let two_sc = 2.0 * params.sigma_color * params.sigma_color;
        let spatial: Vec<f64> = offsets
            .iter()
            .map(|&(dx, dy)| (-((dx * dx + dy * dy) as f64) / two_ss).exp())
            .collect();
        let k = offsets.len();
        let mut weights = vec![0.0; w * h * k];
        weights
            .par_chunks_mut(w * k)
            .enumerate()
            .for_each(|(y, row)| {
                for x in 0..w {
                    let ci = img.pixel(y * w + x);
                    for (o, &(dx, dy)) in offsets.iter().enumerate() {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let cj = img.pixel(ny as usize * w + nx as usize);
                        let d2: f64 = ci.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
                        row[x * k + o] = spatial[o] * (-d2 / two_sc).exp();
                    }
                }
            });
        let degree = weights.par_chunks(k).map(|row| row.iter().sum()).collect();
        Ok(Self {
            width: w,
            height: h,
            offsets,
            weights,
            degree,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// `sum_{i != j} W[i, j]`.
    pub fn total_weight(&self) -> f64 {
        self.degree.iter().sum()
    }

    /// `W v` for one channel.
    fn apply(&self, v: &[f64], y: usize, out: &mut [f64]) {
        let (w, h) = (self.width as isize, self.height as isize);
        let k = self.offsets.len();
        for (x, slot) in out.iter_mut().enumerate() {
            let i = y * self.width + x;
            let wts = &self.weights[i * k..(i + 1) * k];
            let mut acc = 0.0;
            for (&(dx, dy), &wt) in self.offsets.iter().zip(wts) {
                if wt == 0.0 {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                debug_assert!(nx >= 0 && ny >= 0 && nx < w && ny < h);
                acc += wt * v[(ny * w + nx) as usize];
            }
            *slot = acc;
        }
    }

    /// CRF loss `sum_r S_r^T W (1 - S_r)` and its gradient with respect to the logits.
    ///
    /// With two channels `1 - S_0 = S_1`, so one product `u = W S_1` and the row
    /// sums `d = W 1` give everything: `W S_0 = d - u`, and the gradient wrt
    /// `S_r` is `W (1 - 2 S_r)`. Rows are computed in parallel and reduced in a
    /// fixed order.
    pub fn crf_loss(&self, s: &LocalizationMap) -> Result<(f64, MapLogits)> {
        check_dims(self.dims(), s.dims())?;
        let w = self.width;
        let rows: Vec<(f64, Vec<f64>)> = (0..self.height)
            .into_par_iter()
            .map(|y| {
                let mut u = vec![0.0; w];
                self.apply(&s.fg, y, &mut u);
                let mut loss = 0.0;
                let mut g = vec![0.0; w];
                for x in 0..w {
                    let i = y * w + x;
                    let (s0, s1, d) = (s.bg[i], s.fg[i], self.degree[i]);
                    loss += s0 * u[x] + s1 * (d - u[x]);
                    // g1 - g0 = W(1 - 2 S_1) - W(1 - 2 S_0), chained through the softmax
                    g[x] = s0 * s1 * 2.0 * (d - 2.0 * u[x]);
                }
                (loss, g)
            })
            .collect();
        let mut grad = MapLogits::zeros(self.width, self.height);
        let mut loss = 0.0;
        for (y, (l, g)) in rows.into_iter().enumerate() {
            loss += l;
            for (x, v) in g.into_iter().enumerate() {
                grad.fg[y * w + x] = v;
                grad.bg[y * w + x] = -v;
            }
        }
        Ok((loss, grad))
    }
}

/// CRF regularizer of `s` under the affinity of `img`.
pub fn crf_loss(s: &LocalizationMap, img: &Image, params: &AffinityParams) -> Result<(f64, MapLogits)> {
    check_dims(s.dims(), img.dims())?;
    Affinity::new(img, params)?.crf_loss(s)
}

/// Loss terms of one evaluation, kept apart for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub partial_ce: f64,
    pub crf: f64,
    pub total: f64,
}

/// `lambda_pce * partial_ce + lambda_crf * crf` with a precomputed affinity.
///
/// The CRF term is skipped entirely when `lambda_crf == 0`.
pub fn total_loss_with(
    y: &PseudoLabelMask,
    s: &LocalizationMap,
    affinity: Option<&Affinity>,
    lambda_pce: f64,
    lambda_crf: f64,
) -> Result<(LossParts, MapLogits)> {
    let (pce, mut grad) = partial_ce(y, s)?;
    grad.bg.iter_mut().chain(grad.fg.iter_mut()).for_each(|g| *g *= lambda_pce);
    let mut crf = 0.0;
    if lambda_crf != 0.0 {
        let aff = affinity.ok_or_else(|| Error::InvalidArgument("CRF weight set without an affinity".into()))?;
        let (c, g) = aff.crf_loss(s)?;
        crf = c;
        grad.add_scaled(&g, lambda_crf);
    }
    let parts = LossParts {
        partial_ce: pce,
        crf,
        total: lambda_pce * pce + lambda_crf * crf,
    };
    Ok((parts, grad))
}

/// Full localization loss and its logit gradient.
pub fn total_loss(
    y: &PseudoLabelMask,
    s: &LocalizationMap,
    img: &Image,
    lambda_pce: f64,
    lambda_crf: f64,
    params: &AffinityParams,
) -> Result<(f64, MapLogits)> {
    check_dims(s.dims(), img.dims())?;
    let aff = if lambda_crf != 0.0 {
        Some(Affinity::new(img, params)?)
    } else {
        None
    };
    let (parts, grad) = total_loss_with(y, s, aff.as_ref(), lambda_pce, lambda_crf)?;
    Ok((parts.total, grad))
}
