//! Images, the synthetic-shapes dataset and the training-time augmentations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{BoxCxcywh, GroundTruthObject};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense `H x W x C` image with float channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major (row, col, channel).
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            data: vec![value; height * width * channels],
            height,
            width,
            channels,
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, value: &[f64]) {
        let i = (row * self.width + col) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(value);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.height, self.width, self.channels], self.data.clone())
            .expect("image dims")
    }

    /// Bilinear resample to a new size.
    pub fn resize(&self, new_h: usize, new_w: usize) -> Image {
        let mut out = Image::new(new_h, new_w, self.channels);
        let sy = if new_h > 1 { (self.height - 1) as f64 / (new_h - 1) as f64 } else { 0.0 };
        let sx = if new_w > 1 { (self.width - 1) as f64 / (new_w - 1) as f64 } else { 0.0 };
        for r in 0..new_h {
            let y = r as f64 * sy;
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = y - y0 as f64;
            for c in 0..new_w {
                let x = c as f64 * sx;
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = x - x0 as f64;
                for ch in 0..self.channels {
                    let v = self.pixel(y0, x0)[ch] * (1.0 - wy) * (1.0 - wx)
                        + self.pixel(y0, x1)[ch] * (1.0 - wy) * wx
                        + self.pixel(y1, x0)[ch] * wy * (1.0 - wx)
                        + self.pixel(y1, x1)[ch] * wy * wx;
                    let i = (r * new_w + c) * self.channels + ch;
                    out.data[i] = v;
                }
            }
        }
        out
    }

    /// Zero-pads on the bottom/right to the next multiple of `p`.
    pub fn pad_to_multiple(&self, p: usize) -> Image {
        let new_h = self.height.div_ceil(p) * p;
        let new_w = self.width.div_ceil(p) * p;
        if new_h == self.height && new_w == self.width {
            return self.clone();
        }
        let mut out = Image::new(new_h, new_w, self.channels);
        for r in 0..self.height {
            let src = &self.data[r * self.width * self.channels..(r + 1) * self.width * self.channels];
            let dst_start = r * new_w * self.channels;
            out.data[dst_start..dst_start + src.len()].copy_from_slice(src);
        }
        out
    }
}

/// One dataset element: pixels plus normalized ground-truth objects.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Image,
    pub objects: Vec<GroundTruthObject>,
    pub id: u64,
}

const MIN_SHAPE_PX: usize = 8;

#[derive(Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Square,
    Disc,
    Triangle,
}

/// Deterministic synthetic dataset: each image holds 1..=max_objects
/// axis-aligned shapes with exact bounding boxes. Class id selects the shape
/// kind (square / disc / triangle, cycling for larger class counts) and the
/// color family, so classes stay visually separable.
pub fn gen_shapes(
    seed: u64,
    count: usize,
    canvas: (usize, usize),
    max_objects: usize,
    k_classes: usize,
) -> Result<Vec<LabeledImage>> {
    gen_shapes_with_offset(seed, 0, count, canvas, max_objects, k_classes)
}

/// As [`gen_shapes`] with an id offset, for disjoint train/validation splits
/// drawn from one seed.
pub fn gen_shapes_with_offset(
    seed: u64,
    first_id: u64,
    count: usize,
    canvas: (usize, usize),
    max_objects: usize,
    k_classes: usize,
) -> Result<Vec<LabeledImage>> {
    let (h, w) = canvas;
    if k_classes == 0 {
        return Err(Error::invalid("gen_shapes", "at least one class required"));
    }
    if max_objects == 0 {
        return Err(Error::invalid("gen_shapes", "max_objects must be at least 1"));
    }
    if h < 2 * MIN_SHAPE_PX || w < 2 * MIN_SHAPE_PX {
        return Err(Error::invalid(
            "gen_shapes",
            format!("canvas {h}x{w} smaller than the minimum shape size"),
        ));
    }
    (0..count as u64)
        .map(|i| {
            let id = first_id + i;
            // Per-image stream so generation order never matters.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            Ok(render_one(&mut rng, id, h, w, max_objects, k_classes))
        })
        .collect()
}

fn render_one(
    rng: &mut ChaCha8Rng,
    id: u64,
    h: usize,
    w: usize,
    max_objects: usize,
    k_classes: usize,
) -> LabeledImage {
    let bg = rng.random_range(0.05..0.25);
    let mut image = Image::filled(h, w, 3, bg);
    let n_objects = rng.random_range(1..=max_objects);
    let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(n_objects);
    let mut placed: Vec<BoxCxcywh> = Vec::new();

    for _ in 0..n_objects {
        // Rejection-sample positions so shapes stay mostly unoccluded.
        let mut attempt = 0;
        let bbox = loop {
            attempt += 1;
            let side_w = rng.random_range(MIN_SHAPE_PX..=(w / 2).max(MIN_SHAPE_PX));
            let side_h = rng.random_range(MIN_SHAPE_PX..=(h / 2).max(MIN_SHAPE_PX));
            let x0 = rng.random_range(0..=w - side_w);
            let y0 = rng.random_range(0..=h - side_h);
            let candidate = BoxCxcywh {
                cx: (x0 as f64 + side_w as f64 / 2.0) / w as f64,
                cy: (y0 as f64 + side_h as f64 / 2.0) / h as f64,
                w: side_w as f64 / w as f64,
                h: side_h as f64 / h as f64,
            };
            let overlaps = placed.iter().any(|p| {
                crate::boxes::intersection_area(&p.corners(), &candidate.corners())
                    > 0.25 * candidate.area().min(p.area())
            });
            if !overlaps || attempt > 40 {
                break candidate;
            }
        };
        if placed
            .iter()
            .any(|p| crate::boxes::intersection_area(&p.corners(), &bbox.corners()) > 0.25 * bbox.area().min(p.area()))
            && !placed.is_empty()
        {
            continue; // could not find space; keep the image sparser
        }
        let class_id = rng.random_range(0..k_classes);
        let color = class_color(class_id, rng);
        let kind = match class_id % 3 {
            0 => ShapeKind::Square,
            1 => ShapeKind::Disc,
            _ => ShapeKind::Triangle,
        };
        draw_shape(&mut image, kind, &bbox, &color);
        placed.push(bbox);
        objects.push(GroundTruthObject { class_id, bbox });
    }
    LabeledImage { image, objects, id }
}

/// Stable color family per class with a little per-instance jitter.
fn class_color(class_id: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base: [f64; 3] = match class_id % 6 {
        0 => [0.85, 0.2, 0.2],
        1 => [0.2, 0.8, 0.25],
        2 => [0.25, 0.35, 0.9],
        3 => [0.85, 0.8, 0.2],
        4 => [0.8, 0.25, 0.8],
        _ => [0.2, 0.8, 0.8],
    };
    let mut c = base;
    for v in &mut c {
        *v = (*v + rng.random_range(-0.08..0.08)).clamp(0.05, 1.0);
    }
    c
}

fn draw_shape(image: &mut Image, kind: ShapeKind, bbox: &BoxCxcywh, color: &[f64; 3]) {
    let (h, w) = (image.height as f64, image.width as f64);
    let c = bbox.corners();
    let (x0, y0) = ((c.x1 * w).round() as usize, (c.y1 * h).round() as usize);
    let (x1, y1) = ((c.x2 * w).round() as usize, (c.y2 * h).round() as usize);
    let (x1, y1) = (x1.min(image.width), y1.min(image.height));
    let (bw, bh) = ((x1 - x0) as f64, (y1 - y0) as f64);
    for r in y0..y1 {
        for col in x0..x1 {
            let fx = (col - x0) as f64 + 0.5;
            let fy = (r - y0) as f64 + 0.5;
            let inside = match kind {
                ShapeKind::Square => true,
                ShapeKind::Disc => {
                    let dx = fx / bw - 0.5;
                    let dy = fy / bh - 0.5;
                    dx * dx + dy * dy <= 0.25
                }
                ShapeKind::Triangle => {
                    // Upward isoceles triangle filling the box.
                    let u = fx / bw;
                    let v = fy / bh;
                    v >= (1.0 - 2.0 * u).max(2.0 * u - 1.0)
                }
            };
            if inside {
                image.set_pixel(r, col, color);
            }
        }
    }
}

/// Resizes so the shorter side hits `short_target` unless that would push
/// the longer side past `long_max`; pads bottom/right with zeros to the next
/// patch multiple and renormalizes boxes to the padded size.
pub fn resize_shortest(sample: &LabeledImage, short_target: usize, long_max: usize, patch: usize) -> LabeledImage {
    let (h, w) = (sample.image.height, sample.image.width);
    let (short, long) = (h.min(w), h.max(w));
    // The binding side lands exactly on its target; the other side floors.
    let cap_binds = long as f64 * (short_target as f64 / short as f64) > long_max as f64 + 1e-9;
    let (new_short, new_long) = if cap_binds {
        let scale = long_max as f64 / long as f64;
        ((short as f64 * scale).floor() as usize, long_max)
    } else {
        let scale = short_target as f64 / short as f64;
        (short_target, (long as f64 * scale).floor() as usize)
    };
    let (new_h, new_w) = if h <= w { (new_short, new_long) } else { (new_long, new_short) };

    let resized = sample.image.resize(new_h, new_w);
    let padded = resized.pad_to_multiple(patch);
    // Normalized coordinates survive the uniform resize; padding rescales them.
    let fx = new_w as f64 / padded.width as f64;
    let fy = new_h as f64 / padded.height as f64;
    let objects = sample
        .objects
        .iter()
        .map(|o| GroundTruthObject {
            class_id: o.class_id,
            bbox: BoxCxcywh {
                cx: o.bbox.cx * fx,
                cy: o.bbox.cy * fy,
                w: o.bbox.w * fx,
                h: o.bbox.h * fy,
            },
        })
        .collect();
    LabeledImage {
        image: padded,
        objects,
        id: sample.id,
    }
}

/// Uniform draw over the patch-multiple side lengths in `[short_min, short_max]`.
pub fn multi_scale_sample(rng: &mut impl Rng, short_min: usize, short_max: usize, patch: usize) -> usize {
    let lo = short_min.div_ceil(patch);
    let hi = short_max / patch;
    if hi <= lo {
        return lo * patch;
    }
    rng.random_range(lo..=hi) * patch
}

/// With probability 1/2, crops a window covering 60-100% of each dimension.
/// Objects are clipped to the window and dropped when the visible area falls
/// below one square pixel.
pub fn random_crop(rng: &mut impl Rng, sample: &LabeledImage) -> LabeledImage {
    if rng.random_range(0.0..1.0) >= 0.5 {
        return sample.clone();
    }
    crop_fraction(
        rng.random_range(0.6..=1.0),
        rng.random_range(0.6..=1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        sample,
    )
}

/// Deterministic crop core: window fractions plus relative offsets in [0, 1].
pub fn crop_fraction(fh: f64, fw: f64, oy: f64, ox: f64, sample: &LabeledImage) -> LabeledImage {
    let (h, w) = (sample.image.height, sample.image.width);
    let ch = ((h as f64 * fh).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fw).round() as usize).clamp(1, w);
    if ch == h && cw == w {
        return sample.clone();
    }
    let y0 = ((h - ch) as f64 * oy).round() as usize;
    let x0 = ((w - cw) as f64 * ox).round() as usize;

    let mut image = Image::new(ch, cw, sample.image.channels);
    for r in 0..ch {
        let src = (r + y0) * w * sample.image.channels + x0 * sample.image.channels;
        let dst = r * cw * sample.image.channels;
        image.data[dst..dst + cw * sample.image.channels]
            .copy_from_slice(&sample.image.data[src..src + cw * sample.image.channels]);
    }

    let mut objects = Vec::new();
    for o in &sample.objects {
        let c = o.bbox.corners();
        // To pixels, clip to the window, back to normalized window coords.
        let px1 = (c.x1 * w as f64).max(x0 as f64);
        let py1 = (c.y1 * h as f64).max(y0 as f64);
        let px2 = (c.x2 * w as f64).min((x0 + cw) as f64);
        let py2 = (c.y2 * h as f64).min((y0 + ch) as f64);
        if px2 - px1 < 1.0 || py2 - py1 < 1.0 || (px2 - px1) * (py2 - py1) < 1.0 {
            continue;
        }
        let bbox = crate::boxes::BoxCorners {
            x1: (px1 - x0 as f64) / cw as f64,
            y1: (py1 - y0 as f64) / ch as f64,
            x2: (px2 - x0 as f64) / cw as f64,
            y2: (py2 - y0 as f64) / ch as f64,
        }
        .center_form();
        objects.push(GroundTruthObject {
            class_id: o.class_id,
            bbox,
        });
    }
    LabeledImage {
        image,
        objects,
        id: sample.id,
    }
}
