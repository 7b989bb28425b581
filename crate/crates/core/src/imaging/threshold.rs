use super::{BinaryMask, GrayMap};
use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 256;

/// Result of Otsu's method on a min-max normalized 256-bin histogram.
///
/// Pixels whose normalized value rounds to a bin `<= bin` form the low class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    pub bin: usize,
    /// Boundary between `bin` and `bin + 1`, in the map's own value scale.
    pub threshold: f64,
    pub between_class_variance: f64,
}

pub(crate) fn normalized_bin(v: f64, lo: f64, span: f64) -> usize {
    let t = (v - lo) / span;
    ((t * (OTSU_BINS - 1) as f64).round() as usize).min(OTSU_BINS - 1)
}

pub fn otsu_split(map: &GrayMap) -> Result<OtsuSplit> {
    let (lo, hi) = map.min_max();
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::ConstantMap);
    }
    let mut hist = [0u64; OTSU_BINS];
    for &v in map.values() {
        hist[normalized_bin(v, lo, span)] += 1;
    }
    let total = map.values().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();

    let mut best = OtsuSplit {
        bin: 0,
        threshold: 0.0,
        between_class_variance: -1.0,
    };
    let (mut count_lo, mut sum_lo) = (0u64, 0.0);
    for (t, &c) in hist.iter().enumerate() {
        count_lo += c;
        sum_lo += t as f64 * c as f64;
        let n_lo = count_lo as f64;
        let n_hi = total - n_lo;
        let var = if count_lo == 0 || n_hi <= 0.0 {
            0.0
        } else {
            let w_lo = n_lo / total;
            let w_hi = n_hi / total;
            let mu_lo = sum_lo / n_lo;
            let mu_hi = (sum_all - sum_lo) / n_hi;
            w_lo * w_hi * (mu_lo - mu_hi) * (mu_lo - mu_hi)
        };
        if var > best.between_class_variance {
            best = OtsuSplit {
                bin: t,
                threshold: 0.0,
                between_class_variance: var,
            };
        }
    }
    best.threshold = lo + (best.bin as f64 + 0.5) / (OTSU_BINS - 1) as f64 * span;
    Ok(best)
}

/// Otsu threshold in the map's value scale.
pub fn otsu_threshold(map: &GrayMap) -> Result<f64> {
    otsu_split(map).map(|s| s.threshold)
}

/// `true` where the value is strictly above `threshold`.
pub fn binarize(map: &GrayMap, threshold: f64) -> BinaryMask {
    let bits = map.values().iter().map(|&v| v > threshold).collect();
    BinaryMask::new(map.width(), map.height(), bits).expect("dimensions come from a valid map")
}
