use super::{BBox, GrayMap, Image};
use crate::error::{Error, Result};

/// Normalized 1-D Gaussian taps over `[-r, r]` with `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::NonPositiveSigma(sigma));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

fn convolve_rows(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += t * row[sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn convolve_cols(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let sy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
            let src_row = &src[sy * w..(sy + 1) * w];
            let dst_row = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += t * s;
            }
        }
    }
    out
}

/// Separable Gaussian blur with edge-clamped borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let taps = gaussian_kernel(sigma)?;
    let (w, h) = img.dims();
    let chans: Vec<GrayMap> = (0..img.channels())
        .map(|c| {
            let plane = img.channel(c).into_values();
            let tmp = convolve_rows(&plane, w, h, &taps);
            let out = convolve_cols(&tmp, w, h, &taps);
            GrayMap::new(w, h, out).expect("blur keeps values finite")
        })
        .collect();
    Image::from_channels(&chans)
}

/// Blurs everything outside `bbox`; pixels inside the box are copied unchanged.
pub fn blur_outside_box(img: &Image, bbox: &BBox, sigma: f64) -> Result<Image> {
    bbox.within(img.width(), img.height())?;
    let blurred = gaussian_blur(img, sigma)?;
    let c = img.channels();
    let w = img.width();
    let mut data = blurred.data().to_vec();
    for y in bbox.y0..bbox.y1 {
        let a = (y * w + bbox.x0) * c;
        let b = (y * w + bbox.x1) * c;
        data[a..b].copy_from_slice(&img.data()[a..b]);
    }
    Image::new(img.width(), img.height(), c, data)
}

fn source_coord(i: usize, out_n: usize, in_n: usize) -> f64 {
    if out_n == 1 {
        0.0
    } else {
        i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
    }
}

/// Corner-aligned bilinear resampling; identical sizes return an exact copy.
pub fn resize_bilinear(map: &GrayMap, out_w: usize, out_h: usize) -> Result<GrayMap> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!("resize to {out_w}x{out_h}")));
    }
    let (w, h) = map.dims();
    if (w, h) == (out_w, out_h) {
        return Ok(map.clone());
    }
    let v = map.values();
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let sy = source_coord(oy, out_h, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = source_coord(ox, out_w, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = v[y0 * w + x0] * (1.0 - fx) + v[y0 * w + x1] * fx;
            let bot = v[y1 * w + x0] * (1.0 - fx) + v[y1 * w + x1] * fx;
            // keep within the source range despite rounding
            let (lo, hi) = minmax4(v[y0 * w + x0], v[y0 * w + x1], v[y1 * w + x0], v[y1 * w + x1]);
            out.push((top * (1.0 - fy) + bot * fy).clamp(lo, hi));
        }
    }
    GrayMap::new(out_w, out_h, out)
}

fn minmax4(a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    (a.min(b).min(c).min(d), a.max(b).max(c).max(d))
}

pub fn resize_image(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if img.dims() == (out_w, out_h) {
        return Ok(img.clone());
    }
    let chans = (0..img.channels())
        .map(|c| resize_bilinear(&img.channel(c), out_w, out_h))
        .collect::<Result<Vec<_>>>()?;
    Image::from_channels(&chans)
}

/// Area-average downsampling to `d x d` cells per channel (bilinear when upsampling).
pub(crate) fn downsample_channels(img: &Image, d: usize) -> Vec<GrayMap> {
    let (w, h) = img.dims();
    (0..img.channels())
        .map(|c| {
            let plane = img.channel(c);
            if w < d || h < d {
                return resize_bilinear(&plane, d, d).expect("d >= 1");
            }
            let mut out = vec![0.0; d * d];
            for cy in 0..d {
                let (ya, yb) = (cy * h / d, (cy + 1) * h / d);
                for cx in 0..d {
                    let (xa, xb) = (cx * w / d, (cx + 1) * w / d);
                    let mut acc = 0.0;
                    for y in ya..yb {
                        for x in xa..xb {
                            acc += plane.get(x, y);
                        }
                    }
                    out[cy * d + cx] = acc / ((yb - ya) * (xb - xa)) as f64;
                }
            }
            GrayMap::new(d, d, out).expect("finite averages")
        })
        .collect()
}
