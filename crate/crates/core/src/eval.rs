//! Localization metrics: PxAP, MaxBoxAccV2, Top-k localization and the
//! part / more / multi-instance error decomposition.
//!
//! All box metrics share one sweep: for every threshold in `{0, 1/255, ..., 1}`
//! each map is binarized, split into 8-connected components, and every component
//! box is matched against every ground-truth box.

use crate::error::{Error, Result};
use crate::imaging::{self, io, BBox, BinaryMask};
use crate::losses::LocalizationMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const NUM_THRESHOLDS: usize = 256;
pub const DELTAS: [f64; 3] = [0.3, 0.5, 0.7];

/// `{0, 1/255, ..., 1}`.
pub fn default_thresholds() -> Vec<f64> {
    (0..NUM_THRESHOLDS).map(|i| i as f64 / (NUM_THRESHOLDS - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtAnnotation {
    pub image_id: String,
    pub label: usize,
    pub boxes: Vec<BBox>,
    pub mask: Option<BinaryMask>,
}

/// One line of a ground-truth JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_id: String,
    pub label: usize,
    pub boxes: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

/// Reads ground truth; mask paths are relative to the file's directory.
pub fn load_ground_truth(path: &Path) -> Result<Vec<GtAnnotation>> {
    let text = String::from_utf8(io::read_bytes(path)?).map_err(|e| Error::parse(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GtRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        let mask = rec
            .mask_path
            .as_deref()
            .map(|m| io::read_mask_pgm(&base.join(m)))
            .transpose()?;
        out.push(GtAnnotation {
            image_id: rec.image_id,
            label: rec.label,
            boxes: rec.boxes,
            mask,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRatios {
    pub iou: f64,
    /// Intersection over the predicted box.
    pub iop: f64,
    /// Intersection over the annotated box.
    pub ioa: f64,
    /// Intersection over the ground-truth box (same normalizer as `ioa`).
    pub iog: f64,
}

pub fn box_ratios(pred: &BBox, gt: &BBox) -> BoxRatios {
    let inter = pred.intersection_area(gt) as f64;
    let (pa, ga) = (pred.area() as f64, gt.area() as f64);
    BoxRatios {
        iou: inter / (pa + ga - inter),
        iop: inter / pa,
        ioa: inter / ga,
        iog: inter / ga,
    }
}

/// Tight boxes of the 8-connected components of `fg > tau`, largest first.
pub fn boxes_from_map(s: &LocalizationMap, tau: f64) -> Vec<BBox> {
    let bits = s.fg().iter().map(|&v| v > tau).collect();
    let mask = BinaryMask::new(s.width(), s.height(), bits).expect("map dims");
    imaging::connected_components(&mask).into_iter().map(|c| c.bbox).collect()
}

fn check_pairing(maps: &[LocalizationMap], gts: &[GtAnnotation]) -> Result<()> {
    if maps.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} maps for {} annotations", maps.len(), gts.len())));
    }
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no images to evaluate".into()));
    }
    Ok(())
}

/// Number of thresholds strictly below `v`, for an ascending threshold list.
fn thresholds_below(v: f64, thresholds: &[f64]) -> usize {
    thresholds.partition_point(|&t| t < v)
}

/// Area under the dataset-pooled pixel precision-recall curve.
pub fn pxap(maps: &[LocalizationMap], gts: &[GtAnnotation]) -> Result<f64> {
    pxap_with_thresholds(maps, gts, &default_thresholds())
}

/// PxAP over an explicit ascending threshold list.
///
/// Operating points are visited from the highest threshold down and closed by the
/// predict-everything point; precision with no predictions is 1.
pub fn pxap_with_thresholds(maps: &[LocalizationMap], gts: &[GtAnnotation], thresholds: &[f64]) -> Result<f64> {
    check_pairing(maps, gts)?;
    let nt = thresholds.len();
    // hist[k]: pixels exceeding exactly the k lowest thresholds
    let mut pos_hist = vec![0u64; nt + 1];
    let mut neg_hist = vec![0u64; nt + 1];
    for (s, gt) in maps.iter().zip(gts) {
        let mask = gt.mask.as_ref().ok_or_else(|| Error::MissingMask(gt.image_id.clone()))?;
        if mask.dims() != s.dims() {
            return Err(Error::DimensionMismatch {
                expected: mask.dims(),
                got: s.dims(),
            });
        }
        for (&v, &on) in s.fg().iter().zip(mask.bits()) {
            let k = thresholds_below(v, thresholds);
            if on {
                pos_hist[k] += 1;
            } else {
                neg_hist[k] += 1;
            }
        }
    }
    let total_pos: u64 = pos_hist.iter().sum();
    let total_neg: u64 = neg_hist.iter().sum();
    if total_pos == 0 {
        return Err(Error::InvalidArgument("ground-truth masks have no foreground".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let (mut tp, mut fp) = (0u64, 0u64);
    // threshold index i predicts pixels with k > i
    for i in (0..nt).rev() {
        tp += pos_hist[i + 1];
        fp += neg_hist[i + 1];
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / total_pos as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    let all_precision = total_pos as f64 / (total_pos + total_neg) as f64;
    ap += all_precision * (1.0 - prev_recall);
    Ok(ap)
}

/// Per-image, per-threshold box matching results.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSweep {
    pub thresholds: Vec<f64>,
    /// `best_iou[image][t]`: best IoU over all (component box, gt box) pairs; 0 without components.
    pub best_iou: Vec<Vec<f64>>,
    /// `primary[image][t]`: largest component box.
    pub primary: Vec<Vec<Option<BBox>>>,
}

pub fn box_sweep(maps: &[LocalizationMap], gts: &[GtAnnotation]) -> Result<BoxSweep> {
    box_sweep_with_thresholds(maps, gts, &default_thresholds())
}

pub fn box_sweep_with_thresholds(
    maps: &[LocalizationMap],
    gts: &[GtAnnotation],
    thresholds: &[f64],
) -> Result<BoxSweep> {
    check_pairing(maps, gts)?;
    if let Some(gt) = gts.iter().find(|g| g.boxes.is_empty()) {
        return Err(Error::MissingGtBox(gt.image_id.clone()));
    }
    let per_image: Vec<(Vec<f64>, Vec<Option<BBox>>)> = maps
        .par_iter()
        .zip(gts.par_iter())
        .map(|(s, gt)| {
            thresholds
                .iter()
                .map(|&tau| {
                    let boxes = boxes_from_map(s, tau);
                    let best = boxes
                        .iter()
                        .flat_map(|p| gt.boxes.iter().map(move |g| box_ratios(p, g).iou))
                        .fold(0.0, f64::max);
                    (best, boxes.first().copied())
                })
                .unzip()
        })
        .collect();
    let (best_iou, primary) = per_image.into_iter().unzip();
    Ok(BoxSweep {
        thresholds: thresholds.to_vec(),
        best_iou,
        primary,
    })
}

impl BoxSweep {
    pub fn num_images(&self) -> usize {
        self.best_iou.len()
    }

    /// Percentage of images with best IoU `>= delta` at threshold index `t`.
    pub fn accuracy(&self, t: usize, delta: f64) -> f64 {
        let hits = self.best_iou.iter().filter(|ious| ious[t] >= delta).count();
        100.0 * hits as f64 / self.num_images() as f64
    }

    pub fn accuracy_curve(&self, delta: f64) -> Vec<f64> {
        (0..self.thresholds.len()).map(|t| self.accuracy(t, delta)).collect()
    }

    /// First threshold index reaching the maximum accuracy at `delta`.
    pub fn best_threshold(&self, delta: f64) -> usize {
        let curve = self.accuracy_curve(delta);
        let mut best = 0;
        for (t, &a) in curve.iter().enumerate() {
            if a > curve[best] {
                best = t;
            }
        }
        best
    }

    pub fn max_accuracy(&self, delta: f64) -> f64 {
        self.accuracy(self.best_threshold(delta), delta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxBoxAcc {
    /// `(delta, percentage)` pairs.
    pub per_delta: Vec<(f64, f64)>,
    pub mean: f64,
}

pub fn maxboxacc(maps: &[LocalizationMap], gts: &[GtAnnotation], deltas: &[f64]) -> Result<MaxBoxAcc> {
    Ok(maxboxacc_from_sweep(&box_sweep(maps, gts)?, deltas))
}

pub fn maxboxacc_from_sweep(sweep: &BoxSweep, deltas: &[f64]) -> MaxBoxAcc {
    let per_delta: Vec<(f64, f64)> = deltas.iter().map(|&d| (d, sweep.max_accuracy(d))).collect();
    let mean = per_delta.iter().map(|(_, a)| a).sum::<f64>() / per_delta.len().max(1) as f64;
    MaxBoxAcc { per_delta, mean }
}

/// Top-`k` localization accuracy at `delta` (default protocol: 0.5), using the
/// dataset-wide threshold that maximizes box accuracy at that `delta`.
pub fn topk_loc_from_sweep(
    sweep: &BoxSweep,
    preds: &[Vec<usize>],
    gts: &[GtAnnotation],
    k: usize,
    delta: f64,
) -> Result<f64> {
    if preds.len() != gts.len() || gts.len() != sweep.num_images() {
        return Err(Error::InvalidArgument("prediction count does not match images".into()));
    }
    let t = sweep.best_threshold(delta);
    let mut hits = 0;
    for (i, (p, gt)) in preds.iter().zip(gts).enumerate() {
        if p.len() < k {
            return Err(Error::ShortPredictionList {
                image: gt.image_id.clone(),
                len: p.len(),
                k,
            });
        }
        if p[..k].contains(&gt.label) && sweep.best_iou[i][t] >= delta {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / gts.len() as f64)
}

pub fn topk_loc(maps: &[LocalizationMap], preds: &[Vec<usize>], gts: &[GtAnnotation], k: usize) -> Result<f64> {
    topk_loc_from_sweep(&box_sweep(maps, gts)?, preds, gts, k, 0.5)
}

/// Per-image error flags for one primary predicted box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ErrorFlags {
    /// Best IoU with any gt box reaches 0.5.
    pub localized: bool,
    /// IoP > 0.5 against the best-matching gt box.
    pub part: bool,
    /// IoA > 0.7 against the best-matching gt box.
    pub more: bool,
    /// IoG > 0.3 with at least two gt boxes.
    pub multi: bool,
}

pub fn error_flags(pred: Option<&BBox>, gt_boxes: &[BBox]) -> ErrorFlags {
    let Some(pred) = pred else {
        return ErrorFlags::default();
    };
    let ratios: Vec<BoxRatios> = gt_boxes.iter().map(|g| box_ratios(pred, g)).collect();
    let mut best = 0;
    for (j, r) in ratios.iter().enumerate() {
        if r.iou > ratios[best].iou {
            best = j;
        }
    }
    let Some(m) = ratios.get(best) else {
        return ErrorFlags::default();
    };
    ErrorFlags {
        localized: m.iou >= 0.5,
        part: m.iop > 0.5,
        more: m.ioa > 0.7,
        multi: ratios.iter().filter(|r| r.iog > 0.3).count() >= 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub lpe: f64,
    pub lme: f64,
    pub mie: f64,
}

/// Error percentages over all images. Part and more errors are only counted on
/// images whose primary box misses the IoU 0.5 criterion; multi-instance errors
/// are counted on every image.
pub fn error_metrics(pred_boxes: &[Option<BBox>], gts: &[GtAnnotation]) -> Result<ErrorRates> {
    if pred_boxes.len() != gts.len() || gts.is_empty() {
        return Err(Error::InvalidArgument("prediction count does not match images".into()));
    }
    let (mut part, mut more, mut multi) = (0, 0, 0);
    for (p, gt) in pred_boxes.iter().zip(gts) {
        if gt.boxes.is_empty() {
            return Err(Error::MissingGtBox(gt.image_id.clone()));
        }
        let f = error_flags(p.as_ref(), &gt.boxes);
        if !f.localized {
            part += usize::from(f.part);
            more += usize::from(f.more);
        }
        multi += usize::from(f.multi);
    }
    let pct = |c: usize| 100.0 * c as f64 / gts.len() as f64;
    Ok(ErrorRates {
        lpe: pct(part),
        lme: pct(more),
        mie: pct(multi),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pxap: Option<f64>,
    pub maxboxacc_per_delta: BTreeMap<String, f64>,
    pub maxboxacc_mean: f64,
    pub top1_loc: Option<f64>,
    pub top5_loc: Option<f64>,
    pub lpe: f64,
    pub lme: f64,
    pub mie: f64,
    /// Threshold maximizing box accuracy at delta 0.5.
    pub best_threshold: f64,
    pub num_images: usize,
}

/// Full report plus the per-threshold box-accuracy curves.
///
/// PxAP is reported only when every annotation carries a mask. Top-5 uses
/// `min(5, list length)` predictions so small label sets still get a value.
pub fn evaluate(
    maps: &[LocalizationMap],
    gts: &[GtAnnotation],
    preds: Option<&[Vec<usize>]>,
) -> Result<(MetricsReport, BoxSweep)> {
    let sweep = box_sweep(maps, gts)?;
    let acc = maxboxacc_from_sweep(&sweep, &DELTAS);
    let pxap = if gts.iter().all(|g| g.mask.is_some()) {
        Some(pxap(maps, gts)?)
    } else {
        None
    };
    let (top1, top5) = match preds {
        Some(p) => {
            let k5 = p.iter().map(Vec::len).min().unwrap_or(0).min(5);
            (
                Some(topk_loc_from_sweep(&sweep, p, gts, 1, 0.5)?),
                Some(topk_loc_from_sweep(&sweep, p, gts, k5.max(1), 0.5)?),
            )
        }
        None => (None, None),
    };
    let t = sweep.best_threshold(0.5);
    let primary: Vec<Option<BBox>> = sweep.primary.iter().map(|p| p[t]).collect();
    let errors = error_metrics(&primary, gts)?;
    let report = MetricsReport {
        pxap,
        maxboxacc_per_delta: acc.per_delta.iter().map(|(d, a)| (format!("{d:.1}"), *a)).collect(),
        maxboxacc_mean: acc.mean,
        top1_loc: top1,
        top5_loc: top5,
        lpe: errors.lpe,
        lme: errors.lme,
        mie: errors.mie,
        best_threshold: sweep.thresholds[t],
        num_images: gts.len(),
    };
    Ok((report, sweep))
}

/// `tau,acc@0.3,acc@0.5,acc@0.7` rows.
pub fn curve_csv(sweep: &BoxSweep) -> String {
    let mut out = String::from("tau");
    for d in DELTAS {
        out.push_str(&format!(",acc@{d:.1}"));
    }
    out.push('\n');
    for (t, tau) in sweep.thresholds.iter().enumerate() {
        out.push_str(&format!("{tau:.6}"));
        for d in DELTAS {
            out.push_str(&format!(",{:.4}", sweep.accuracy(t, d)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(boxes: &[[usize; 4]], mask: Option<BinaryMask>) -> GtAnnotation {
        GtAnnotation {
            image_id: "img".into(),
            label: 0,
            boxes: boxes.iter().map(|&b| BBox::try_from(b).unwrap()).collect(),
            mask,
        }
    }

    fn bx(a: [usize; 4]) -> BBox {
        BBox::try_from(a).unwrap()
    }

    #[test]
    fn ratio_examples() {
        let r = box_ratios(&bx([1, 1, 4, 4]), &bx([1, 1, 4, 4]));
        assert_eq!((r.iou, r.iop, r.ioa, r.iog), (1.0, 1.0, 1.0, 1.0));
        let r = box_ratios(&bx([0, 0, 2, 2]), &bx([3, 3, 5, 5]));
        assert_eq!((r.iou, r.iop, r.ioa, r.iog), (0.0, 0.0, 0.0, 0.0));
        let r = box_ratios(&bx([0, 0, 10, 5]), &bx([0, 0, 10, 10]));
        assert_eq!((r.iou, r.iop, r.ioa, r.iog), (0.5, 1.0, 0.5, 0.5));
    }

    #[test]
    fn boxes_from_map_examples() {
        let b = bx([2, 1, 6, 4]);
        let s = LocalizationMap::from_mask(&BinaryMask::from_box(8, 8, &b), false);
        assert_eq!(boxes_from_map(&s, 0.5), vec![b]);
        assert!(boxes_from_map(&s, 1.0).is_empty());
        let mut m = BinaryMask::from_box(10, 10, &bx([0, 0, 2, 2]));
        for y in 5..9 {
            for x in 5..9 {
                m.set(x, y, true);
            }
        }
        let s = LocalizationMap::from_mask(&m, true);
        assert_eq!(boxes_from_map(&s, 0.5), vec![bx([5, 5, 9, 9]), bx([0, 0, 2, 2])]);
    }

    #[test]
    fn threshold_counting() {
        let t = default_thresholds();
        assert_eq!(thresholds_below(0.0, &t), 0);
        assert_eq!(thresholds_below(1.0, &t), 255);
        assert_eq!(thresholds_below(1.0 / 255.0, &t), 1);
        assert_eq!(thresholds_below(0.5, &t), 128);
    }

    #[test]
    fn missing_mask_and_box_errors() {
        let s = LocalizationMap::from_foreground(2, 2, vec![0.5; 4]).unwrap();
        assert!(matches!(pxap(&[s.clone()], &[gt(&[[0, 0, 1, 1]], None)]), Err(Error::MissingMask(_))));
        assert!(matches!(maxboxacc(&[s], &[gt(&[], None)], &DELTAS), Err(Error::MissingGtBox(_))));
    }

    #[test]
    fn error_flag_examples() {
        let g = [bx([0, 0, 10, 10])];
        // strictly inside at 60% of the gt area
        let f = error_flags(Some(&bx([0, 0, 10, 6])), &g);
        assert!(f.part && !f.more && f.localized);
        let f = error_flags(Some(&bx([0, 0, 10, 10])), &g);
        assert!(f.localized && !f.multi);
        let two = [bx([0, 0, 10, 10]), bx([10, 0, 20, 10])];
        let f = error_flags(Some(&bx([6, 0, 14, 10])), &two);
        assert!(f.multi);
        assert_eq!(error_flags(None, &g), ErrorFlags::default());
    }

    #[test]
    fn dataset_error_rates_condition_on_failures() {
        let gts = vec![gt(&[[0, 0, 10, 10]], None), gt(&[[0, 0, 10, 10]], None), gt(&[[0, 0, 10, 10]], None)];
        let preds = vec![
            Some(bx([0, 0, 10, 4])),  // IoU 0.4, IoP 1: part error
            Some(bx([0, 0, 10, 6])),  // IoU 0.6: localized, not an error
            Some(bx([0, 0, 20, 20])), // IoU 0.25, IoA 1: more error
        ];
        let e = error_metrics(&preds, &gts).unwrap();
        assert!((e.lpe - 100.0 / 3.0).abs() < 1e-9);
        assert!((e.lme - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(e.mie, 0.0);
    }

    #[test]
    fn curve_csv_shape() {
        let b = bx([1, 1, 3, 3]);
        let s = LocalizationMap::from_mask(&BinaryMask::from_box(4, 4, &b), false);
        let sweep = box_sweep(&[s], &[gt(&[[1, 1, 3, 3]], None)]).unwrap();
        let csv = curve_csv(&sweep);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 257);
        assert_eq!(lines[0], "tau,acc@0.3,acc@0.5,acc@0.7");
        assert_eq!(lines[1], "0.000000,100.0000,100.0000,100.0000");
        assert_eq!(lines[256], "1.000000,0.0000,0.0000,0.0000");
    }
}
