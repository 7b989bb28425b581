//! Synthetic WSOL corpus.
//!
//! Every image holds one class object (a saturated rectangle or ellipse whose
//! color encodes the class) plus achromatic distractor shapes on a value-noise
//! background. Each image also gets a stack of low-resolution attention maps,
//! each highlighting one scene object: even maps the class object, odd maps the
//! distractors in turn.

use crate::error::{Error, Result};
use crate::eval::{GtAnnotation, GtRecord};
use crate::imaging::{self, io, BBox, BinaryMask, GrayMap, Image};
use crate::pipeline::{Manifest, ManifestEntry, RunConfig};
use crate::proposals::AttentionStack;
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Pixels per attention token along each axis.
pub const TOKEN_SIZE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_images: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub distractors_per_image: usize,
    pub attention_maps_per_image: usize,
    /// Standard deviation of the additive attention noise, relative to the peak.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_images: 100,
            num_classes: 4,
            image_size: 64,
            distractors_per_image: 3,
            attention_maps_per_image: 6,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_images == 0 {
            return bad("num_images must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.image_size < 32 || self.image_size % TOKEN_SIZE != 0 {
            return bad(format!("image_size must be a multiple of {TOKEN_SIZE} and at least 32"));
        }
        if self.attention_maps_per_image < 2 {
            return bad("attention_maps_per_image must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(format!("noise_level {} outside [0, 1]", self.noise_level));
        }
        Ok(())
    }

    pub fn image_id(&self, index: usize) -> String {
        format!("img_{index:05}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub shape: Shape,
    pub bbox: BBox,
    pub mask: BinaryMask,
    pub is_class_object: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image_id: String,
    pub label: usize,
    pub image: Image,
    /// `objects[0]` is the class object.
    pub objects: Vec<SynthObject>,
    pub stack: AttentionStack,
    /// Object index highlighted by each attention map.
    pub highlighted: Vec<usize>,
}

impl SynthSample {
    pub fn class_object(&self) -> &SynthObject {
        &self.objects[0]
    }

    pub fn ground_truth(&self) -> GtAnnotation {
        let obj = self.class_object();
        GtAnnotation {
            image_id: self.image_id.clone(),
            label: self.label,
            boxes: vec![obj.bbox],
            mask: Some(obj.mask.clone()),
        }
    }
}

/// RGB color identifying `class`.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 4] = [[0.9, 0.12, 0.12], [0.12, 0.8, 0.2], [0.15, 0.3, 0.95], [0.92, 0.85, 0.12]];
    if num_classes <= PALETTE.len() {
        return PALETTE[class];
    }
    hsv_to_rgb(class as f64 / num_classes as f64, 0.85, 0.92)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn shape_mask(size: usize, shape: Shape, frame: &BBox) -> BinaryMask {
    let mut mask = BinaryMask::empty(size, size);
    let (cx, cy) = (
        (frame.x0 + frame.x1) as f64 / 2.0,
        (frame.y0 + frame.y1) as f64 / 2.0,
    );
    let (rx, ry) = (frame.width() as f64 / 2.0, frame.height() as f64 / 2.0);
    for y in frame.y0..frame.y1 {
        for x in frame.x0..frame.x1 {
            let inside = match shape {
                Shape::Rectangle => true,
                Shape::Ellipse => {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                }
            };
            mask.set(x, y, inside);
        }
    }
    mask
}

fn tight_box(mask: &BinaryMask) -> BBox {
    let (w, h) = mask.dims();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    BBox { x0, y0, x1, y1 }
}

fn random_frame<R: Rng>(rng: &mut R, size: usize, lo: usize, hi: usize) -> BBox {
    let w = rng.random_range(lo..=hi);
    let h = rng.random_range(lo..=hi);
    let x0 = rng.random_range(1..size - w);
    let y0 = rng.random_range(1..size - h);
    BBox {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    }
}

fn separated(a: &BBox, b: &BBox, gap: usize) -> bool {
    a.x1 + gap <= b.x0 || b.x1 + gap <= a.x0 || a.y1 + gap <= b.y0 || b.y1 + gap <= a.y0
}

/// Smooth gray value noise in roughly `[0.1, 0.3]`.
fn value_noise<R: Rng>(rng: &mut R, size: usize) -> Vec<f64> {
    let cell = (size / 4).max(1);
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.1..0.3)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (gx, gy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
            let at = |i: usize, j: usize| lattice[j * n + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty + rng.random_range(-0.02..0.02));
        }
    }
    out
}

/// One attention map at token resolution highlighting `mask`.
fn attention_map<R: Rng>(rng: &mut R, mask: &BinaryMask, noise_level: f64) -> Result<GrayMap> {
    let (size, _) = mask.dims();
    let indicator = Image::new(
        size,
        size,
        1,
        mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let blurred = imaging::gaussian_blur(&indicator, 1.0)?;
    let grid = imaging::filter_downsample(&blurred, size / TOKEN_SIZE).remove(0);
    let amplitude = rng.random_range(0.6..1.0);
    let noise = Normal::new(0.0, noise_level.max(1e-12)).expect("finite std");
    let (gw, gh) = grid.dims();
    let values = grid
        .into_values()
        .into_iter()
        .map(|v| amplitude * v + if noise_level > 0.0 { noise.sample(rng) } else { 0.0 })
        .collect();
    GrayMap::new(gw, gh, values)
}

/// Generates sample `index`; depends only on the spec and the index.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> Result<SynthSample> {
    let image_id = spec.image_id(index);
    let mut rng = rng::image_stream(spec.seed, &image_id);
    let size = spec.image_size;
    let scale = size as f64 / 64.0;
    let px = |v: f64| ((v * scale).round() as usize).max(3);
    let label = index % spec.num_classes;

    let mut objects = Vec::new();
    let shape = |rng: &mut rng::Rng| if rng.random_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
    let s = shape(&mut rng);
    let frame = random_frame(&mut rng, size, px(14.0), px(22.0));
    let mask = shape_mask(size, s, &frame);
    objects.push(SynthObject {
        shape: s,
        bbox: tight_box(&mask),
        mask,
        is_class_object: true,
    });
    for _ in 0..spec.distractors_per_image {
        let s = shape(&mut rng);
        let placed = (0..200).find_map(|_| {
            let f = random_frame(&mut rng, size, px(10.0), px(18.0));
            objects.iter().all(|o| separated(&o.bbox, &f, px(3.0))).then_some(f)
        });
        let Some(frame) = placed else {
            log::warn!("{image_id}: no room for another distractor");
            break;
        };
        let mask = shape_mask(size, s, &frame);
        objects.push(SynthObject {
            shape: s,
            bbox: tight_box(&mask),
            mask,
            is_class_object: false,
        });
    }

    let mut planes: Vec<Vec<f64>> = vec![value_noise(&mut rng, size); 3];
    let base_color = class_color(label, spec.num_classes);
    for obj in &objects {
        let color = if obj.is_class_object {
            base_color.map(|c| c + rng.random_range(-0.05..0.05))
        } else {
            [rng.random_range(0.5..0.75); 3]
        };
        for (i, _) in obj.mask.bits().iter().enumerate().filter(|(_, &b)| b) {
            for (plane, c) in planes.iter_mut().zip(color) {
                plane[i] = c + rng.random_range(-0.03..0.03);
            }
        }
    }
    let channels = planes
        .into_iter()
        .map(|p| GrayMap::new(size, size, p))
        .collect::<Result<Vec<_>>>()?;
    let image = Image::from_channels(&channels)?;

    let n_distractors = objects.len() - 1;
    let highlighted: Vec<usize> = (0..spec.attention_maps_per_image)
        .map(|m| {
            if n_distractors == 0 || m % 2 == 0 {
                0
            } else {
                1 + (m / 2) % n_distractors
            }
        })
        .collect();
    let maps = highlighted
        .iter()
        .map(|&o| attention_map(&mut rng, &objects[o].mask, spec.noise_level))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthSample {
        image_id,
        label,
        image,
        objects,
        stack: AttentionStack::new(maps)?,
        highlighted,
    })
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    (0..spec.num_images).into_par_iter().map(|i| generate_sample(spec, i)).collect()
}

/// Largest Otsu component box of an attention map lifted to `size x size`.
pub fn recover_box(map: &GrayMap, size: usize) -> Result<Option<BBox>> {
    let lifted = imaging::resize_bilinear(map, size, size)?;
    let t = imaging::otsu_threshold(&lifted)?;
    let comps = imaging::connected_components(&imaging::binarize(&lifted, t));
    Ok(comps.first().map(|c| c.bbox))
}

/// Writes `samples` under `out`:
///
/// ```text
/// manifest.json  gt.jsonl  synth_spec.json  run_config.json
/// images/<id>.ppm  attention/<id>.f32 (+ .json)  masks/<id>.pgm
/// ```
pub fn write_dataset(spec: &SynthSpec, samples: &[SynthSample], out: &Path) -> Result<Manifest> {
    samples.par_iter().try_for_each(|s| -> Result<()> {
        io::write_pnm(&out.join(format!("images/{}.ppm", s.image_id)), &s.image)?;
        s.stack.save(&out.join(format!("attention/{}.f32", s.image_id)))?;
        io::write_mask_pgm(&out.join(format!("masks/{}.pgm", s.image_id)), &s.class_object().mask)
    })?;
    let mut gt = String::new();
    for s in samples {
        let rec = GtRecord {
            image_id: s.image_id.clone(),
            label: s.label,
            boxes: vec![s.class_object().bbox],
            mask_path: Some(format!("masks/{}.pgm", s.image_id)),
        };
        gt.push_str(&serde_json::to_string(&rec).map_err(|e| Error::parse(out, e))?);
        gt.push('\n');
    }
    io::write_atomic(&out.join("gt.jsonl"), gt.as_bytes())?;
    let manifest = Manifest {
        width: spec.image_size,
        height: spec.image_size,
        num_classes: spec.num_classes,
        gt: Some("gt.jsonl".into()),
        images: samples
            .iter()
            .map(|s| ManifestEntry {
                image_id: s.image_id.clone(),
                label: s.label,
                image: format!("images/{}.ppm", s.image_id),
                attention: format!("attention/{}.f32", s.image_id),
            })
            .collect(),
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    io::write_json(&out.join("synth_spec.json"), spec)?;
    io::write_json(&out.join("run_config.json"), &RunConfig::for_synthetic(spec))?;
    Ok(manifest)
}

pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    let samples = generate(spec)?;
    write_dataset(spec, &samples, out)
}
