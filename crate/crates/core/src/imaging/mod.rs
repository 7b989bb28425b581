//! Pixel grids and the image-processing primitives shared by every stage.

mod components;
mod filter;
pub mod io;
mod threshold;

pub use components::{connected_components, Component};
pub use filter::{blur_outside_box, gaussian_blur, gaussian_kernel, resize_bilinear, resize_image};
pub(crate) use filter::downsample_channels as filter_downsample;
pub use threshold::{binarize, otsu_split, otsu_threshold, OtsuSplit, OTSU_BINS};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major image with 1 or 3 channels, every sample in `[0, 1]`.
///
/// Samples of one pixel are stored contiguously: index `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty {width}x{height} image")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// All channel samples of pixel `idx = y * width + x`.
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// One channel as a gray map.
    pub fn channel(&self, c: usize) -> GrayMap {
        let values = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        GrayMap {
            width: self.width,
            height: self.height,
            values,
        }
    }

    /// Interleaves per-channel maps back into an image, clamping into `[0, 1]`.
    pub fn from_channels(maps: &[GrayMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidImage("no channels".into()))?;
        let (w, h) = first.dims();
        if maps.iter().any(|m| m.dims() != (w, h)) {
            return Err(Error::InvalidImage("channel sizes differ".into()));
        }
        let c = maps.len();
        let mut data = vec![0.0; w * h * c];
        for (ci, m) in maps.iter().enumerate() {
            for (i, v) in m.values.iter().enumerate() {
                data[i * c + ci] = v.clamp(0.0, 1.0);
            }
        }
        Self::new(w, h, c, data)
    }

    pub fn full_box(&self) -> BBox {
        BBox::full(self.width, self.height)
    }

    /// One of the eight flips/transposes of the pixel grid, selected by the low
    /// three bits of `k`: bit 2 transposes, bit 0 mirrors x, bit 1 mirrors y.
    pub fn dihedral(&self, k: u8) -> Image {
        let transpose = k & 4 != 0;
        let (w, h) = if transpose { (self.height, self.width) } else { self.dims() };
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in 0..w {
                let (mut sx, mut sy) = (if k & 1 != 0 { w - 1 - x } else { x }, if k & 2 != 0 { h - 1 - y } else { y });
                if transpose {
                    std::mem::swap(&mut sx, &mut sy);
                }
                data.extend_from_slice(&self.data[(sy * self.width + sx) * c..][..c]);
            }
        }
        Image {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }
}

/// Single-channel real-valued map; the range is unbounded but every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl GrayMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMap(format!("empty {width}x{height} map")));
        }
        if values.len() != width * height {
            return Err(Error::InvalidMap(format!(
                "length {} != {width}x{height}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMap("non-finite value".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Rescales into `[0, 1]`; a constant map becomes all zeros.
    pub fn min_max_normalized(&self) -> GrayMap {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let values = if span > 0.0 {
            self.values.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        GrayMap {
            width: self.width,
            height: self.height,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidMap(format!(
                "mask length {} != {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_box(width: usize, height: usize, b: &BBox) -> Self {
        let mut m = Self::empty(width, height);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                m.bits[y * width + x] = true;
            }
        }
        m
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Axis-aligned box with inclusive `(x0, y0)` and exclusive `(x1, y1)` corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    /// Checks only `x0 < x1` and `y0 < y1`; see [`BBox::within`] for image bounds.
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidBox {
                x0,
                y0,
                x1,
                y1,
                width: x1,
                height: y1,
            });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn within(&self, width: usize, height: usize) -> Result<()> {
        if self.x1 > width || self.y1 > height {
            return Err(Error::InvalidBox {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
                width,
                height,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl TryFrom<[usize; 4]> for BBox {
    type Error = Error;

    fn try_from(a: [usize; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn dihedral_transforms() {
        let img = Image::new(3, 2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.dihedral(0), img);
        assert_eq!(img.dihedral(1).data(), &[0.3, 0.2, 0.1, 0.6, 0.5, 0.4]);
        assert_eq!(img.dihedral(2).data(), &[0.4, 0.5, 0.6, 0.1, 0.2, 0.3]);
        let t = img.dihedral(4);
        assert_eq!(t.dims(), (2, 3));
        assert_eq!(t.data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
        for k in 0..8 {
            let mut sorted = img.dihedral(k).data().to_vec();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(sorted, img.data());
        }
    }

    use super::*;

    #[test]
    fn image_rejects_out_of_range_samples() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(2, 1, 3, vec![0.0; 5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0; 2]).is_err());
    }

    #[test]
    fn gray_map_rejects_non_finite() {
        assert!(GrayMap::new(2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(GrayMap::new(2, 1, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn box_geometry() {
        let b = BBox::new(2, 1, 5, 3).unwrap();
        assert_eq!(b.area(), 6);
        assert!(b.contains(2, 1));
        assert!(!b.contains(5, 1));
        assert!(BBox::new(3, 0, 3, 1).is_err());
        assert!(b.within(5, 3).is_ok());
        assert!(b.within(4, 3).is_err());
        let c = BBox::new(4, 0, 8, 2).unwrap();
        assert_eq!(b.intersection_area(&c), 1);
    }

    #[test]
    fn box_serializes_as_array() {
        let b = BBox::new(0, 1, 2, 3).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0,1,2,3]");
        let back: BBox = serde_json::from_str("[0,1,2,3]").unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox>("[2,1,2,3]").is_err());
    }

    #[test]
    fn channel_split_roundtrip() {
        let img = Image::new(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let chans: Vec<_> = (0..3).map(|c| img.channel(c)).collect();
        assert_eq!(chans[1].values(), &[0.2, 0.5]);
        assert_eq!(Image::from_channels(&chans).unwrap(), img);
    }
}
