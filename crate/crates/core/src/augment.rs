//! Stochastic image augmentation.
//!
//! Two families: a spatial-only pipeline for paired-sensor pre-training
//! (crop-resize plus flips; the second sensor already provides the
//! photometric variation), and the single-sensor baselines that add color
//! jitter, color drop, and gaussian blur.
//!
//! Images are HWC f32 with pixel values in [0, 255]; every photometric op
//! clamps back to that range. All randomness comes from a caller-owned rng
//! stream, so a pipeline is bitwise deterministic given the stream state.

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// One augmentation step with its trigger probability and parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentOp {
    CropResize {
        /// Relative area of the sampled box, subset of (0, 1].
        area_range: (f64, f64),
        /// Width/height ratio bounds of the sampled box.
        aspect_range: (f64, f64),
        out_hw: (usize, usize),
    },
    FlipH { probability: f64 },
    FlipV { probability: f64 },
    ColorJitter { probability: f64, strength: f64 },
    ColorDrop { probability: f64 },
    GaussianBlur { probability: f64, strength: f64 },
}

/// Default crop box ranges: SimCLR-convention area and aspect bounds.
pub const DEFAULT_AREA_RANGE: (f64, f64) = (0.2, 1.0);
pub const DEFAULT_ASPECT_RANGE: (f64, f64) = (0.75, 4.0 / 3.0);

/// Strength value that maps to factor scale 1; the strongest published
/// jitter setting ("strength 5") lands exactly on it.
pub const JITTER_STRENGTH_REF: f64 = 5.0;

impl AugmentOp {
    pub fn validate(&self) -> Result<()> {
        let check_p = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} probability {p} outside [0, 1]")))
            }
        };
        match *self {
            AugmentOp::CropResize { area_range, aspect_range, out_hw } => {
                let (alo, ahi) = area_range;
                if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
                    return Err(Error::Config(format!(
                        "crop area range ({alo}, {ahi}) not a subset of (0, 1]"
                    )));
                }
                let (rlo, rhi) = aspect_range;
                if !(rlo > 0.0 && rlo <= rhi) {
                    return Err(Error::Config(format!(
                        "crop aspect range ({rlo}, {rhi}) invalid"
                    )));
                }
                if out_hw.0 == 0 || out_hw.1 == 0 {
                    return Err(Error::Config("crop output size must be positive".into()));
                }
                Ok(())
            }
            AugmentOp::FlipH { probability } => check_p(probability, "flip_h"),
            AugmentOp::FlipV { probability } => check_p(probability, "flip_v"),
            AugmentOp::ColorJitter { probability, strength } => {
                check_p(probability, "color_jitter")?;
                if strength < 0.0 {
                    return Err(Error::Config(format!("jitter strength {strength} negative")));
                }
                Ok(())
            }
            AugmentOp::ColorDrop { probability } => check_p(probability, "color_drop"),
            AugmentOp::GaussianBlur { probability, strength } => {
                check_p(probability, "gaussian_blur")?;
                if strength < 0.0 {
                    return Err(Error::Config(format!("blur strength {strength} negative")));
                }
                Ok(())
            }
        }
    }
}

/// Named ordered sequence of augmentation ops.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub name: String,
    pub ops: Vec<AugmentOp>,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            op.validate()?;
        }
        Ok(())
    }

    /// Run every op in order against one rng stream.
    pub fn apply(&self, img: &Array3<f32>, rng: &mut ChaCha8Rng) -> Result<Array3<f32>> {
        let mut cur = img.clone();
        for op in &self.ops {
            cur = match *op {
                AugmentOp::CropResize { area_range, aspect_range, out_hw } => {
                    distorted_bbox_crop(&cur, area_range, aspect_range, out_hw, rng)?
                }
                AugmentOp::FlipH { probability } => random_flip(&cur, probability, 0.0, rng),
                AugmentOp::FlipV { probability } => random_flip(&cur, 0.0, probability, rng),
                AugmentOp::ColorJitter { probability, strength } => {
                    color_jitter(&cur, strength, probability, rng)?
                }
                AugmentOp::ColorDrop { probability } => color_drop(&cur, probability, rng)?,
                AugmentOp::GaussianBlur { probability, strength } => {
                    gaussian_blur(&cur, strength, probability, rng)?
                }
            };
        }
        Ok(cur)
    }
}

/// Build a preset pipeline producing `out_hw` crops.
///
/// `multimodal_spatial` is crop plus flips only. `simclr_s2` is the full
/// single-sensor recipe; `simclr_s1` leaves out color drop, which needs
/// three channels; `simclr_s1_improved` halves the jitter trigger rate and
/// reduces its strength, keeping everything else.
pub fn build_pipeline(name: &str, out_hw: (usize, usize)) -> Result<PipelineSpec> {
    let crop = AugmentOp::CropResize {
        area_range: DEFAULT_AREA_RANGE,
        aspect_range: DEFAULT_ASPECT_RANGE,
        out_hw,
    };
    let flips = [AugmentOp::FlipH { probability: 0.5 }, AugmentOp::FlipV { probability: 0.5 }];
    let blur = AugmentOp::GaussianBlur { probability: 0.5, strength: 4.0 };
    let ops = match name {
        "multimodal_spatial" => vec![crop, flips[0].clone(), flips[1].clone()],
        "simclr_s2" => vec![
            crop,
            flips[0].clone(),
            flips[1].clone(),
            AugmentOp::ColorJitter { probability: 0.8, strength: 8.0 },
            AugmentOp::ColorDrop { probability: 0.2 },
            blur,
        ],
        "simclr_s1" => vec![
            crop,
            flips[0].clone(),
            flips[1].clone(),
            AugmentOp::ColorJitter { probability: 0.8, strength: 8.0 },
            blur,
        ],
        "simclr_s1_improved" => vec![
            crop,
            flips[0].clone(),
            flips[1].clone(),
            AugmentOp::ColorJitter { probability: 0.5, strength: 5.0 },
            blur,
        ],
        other => return Err(Error::Config(format!("unknown augmentation preset {other:?}"))),
    };
    let spec = PipelineSpec { name: name.to_string(), ops };
    spec.validate()?;
    Ok(spec)
}

// ---- crop and resize ----

/// Sample a crop box: up to 10 tries at (area, log-aspect) rejection, then
/// a largest-valid-aspect center crop. Returns (top, left, height, width).
pub fn sample_crop_box(
    in_hw: (usize, usize),
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let (h, w) = (in_hw.0 as f64, in_hw.1 as f64);
    let total = h * w;
    let (ln_lo, ln_hi) = (aspect_range.0.ln(), aspect_range.1.ln());
    for _ in 0..10 {
        let target = rng.random_range(area_range.0..=area_range.1) * total;
        let aspect = rng.random_range(ln_lo..=ln_hi).exp();
        let bw = (target * aspect).sqrt().round();
        let bh = (target / aspect).sqrt().round();
        if bw >= 1.0 && bh >= 1.0 && bw <= w && bh <= h {
            let (bh, bw) = (bh as usize, bw as usize);
            let top = rng.random_range(0..=in_hw.0 - bh);
            let left = rng.random_range(0..=in_hw.1 - bw);
            return (top, left, bh, bw);
        }
    }
    // Fallback: center crop at the nearest in-range aspect.
    let in_ratio = w / h;
    let (bh, bw) = if in_ratio < aspect_range.0 {
        let bw = w;
        (
            ((bw / aspect_range.0).round() as usize).min(in_hw.0),
            bw as usize,
        )
    } else if in_ratio > aspect_range.1 {
        let bh = h;
        (
            bh as usize,
            ((bh * aspect_range.1).round() as usize).min(in_hw.1),
        )
    } else {
        (in_hw.0, in_hw.1)
    };
    ((in_hw.0 - bh) / 2, (in_hw.1 - bw) / 2, bh, bw)
}

/// Bilinear resample to `out_hw`, sample points at pixel centers.
pub fn bilinear_resize(img: &Array3<f32>, out_hw: (usize, usize)) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let (oh, ow) = out_hw;
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Array3::<f32>::zeros((oh, ow, c));
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v00 = img[(y0, x0, ch)] as f64;
                let v01 = img[(y0, x1, ch)] as f64;
                let v10 = img[(y1, x0, ch)] as f64;
                let v11 = img[(y1, x1, ch)] as f64;
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out[(oy, ox, ch)] = (top + (bot - top) * wy) as f32;
            }
        }
    }
    out
}

/// Crop a randomly distorted box and resize it to `out_hw`.
pub fn distorted_bbox_crop(
    img: &Array3<f32>,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    out_hw: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f32>> {
    AugmentOp::CropResize { area_range, aspect_range, out_hw }.validate()?;
    let (h, w, _) = img.dim();
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("image {h}x{w} too small to crop")));
    }
    let (top, left, bh, bw) = sample_crop_box((h, w), area_range, aspect_range, rng);
    let view = img.slice(s![top..top + bh, left..left + bw, ..]).to_owned();
    Ok(bilinear_resize(&view, out_hw))
}

// ---- flips ----

/// Mirror horizontally with probability `p_h`, vertically with `p_v`; the
/// two trigger draws always happen, keeping the stream layout fixed.
pub fn random_flip(img: &Array3<f32>, p_h: f64, p_v: f64, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let do_h = rng.random::<f64>() < p_h;
    let do_v = rng.random::<f64>() < p_v;
    let mut out = img.clone();
    if do_h {
        out = out.slice(s![.., ..;-1, ..]).to_owned();
    }
    if do_v {
        out = out.slice(s![..;-1, .., ..]).to_owned();
    }
    out
}

// ---- color jitter ----

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let v = max;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luminance(img: &Array3<f32>) -> Array2<f64> {
    let (h, w, _) = img.dim();
    let mut lum = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            lum[(y, x)] = LUMA[0] * img[(y, x, 0)] as f64
                + LUMA[1] * img[(y, x, 1)] as f64
                + LUMA[2] * img[(y, x, 2)] as f64;
        }
    }
    lum
}

fn clamp_px(img: &mut Array3<f32>) {
    img.mapv_inplace(|v| v.clamp(0.0, 255.0));
}

/// Photometric jitter at factor scale `strength / 5`.
///
/// With probability `p`, applies brightness and contrast (any channel
/// count), plus saturation and hue for 3-channel images, in a random
/// order; factors multiply in [max(0, 1-0.8s'), 1+0.8s'] and hue shifts by
/// up to 0.2s' of the full circle. Each component clamps its output.
/// Non-RGB channels get one shared brightness/contrast factor so channel
/// ratios stay meaningful.
pub fn color_jitter(
    img: &Array3<f32>,
    strength: f64,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f32>> {
    AugmentOp::ColorJitter { probability: p, strength }.validate()?;
    let triggered = rng.random::<f64>() < p;
    if !triggered || strength == 0.0 {
        return Ok(img.clone());
    }
    let s = strength / JITTER_STRENGTH_REF;
    let f_lo = (1.0 - 0.8 * s).max(0.0);
    let f_hi = 1.0 + 0.8 * s;
    let (h, w, c) = img.dim();
    let n_components = if c == 3 { 4 } else { 2 };
    // Component ids: 0 brightness, 1 contrast, 2 saturation, 3 hue.
    let mut order: Vec<usize> = (0..n_components).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut out = img.clone();
    for comp in order {
        match comp {
            0 => {
                let f = rng.random_range(f_lo..=f_hi) as f32;
                out.mapv_inplace(|v| v * f);
            }
            1 => {
                let f = rng.random_range(f_lo..=f_hi);
                // Contrast pivots on the mean intensity: luminance mean for
                // RGB, plain mean over everything otherwise.
                let pivot = if c == 3 {
                    luminance(&out).mean().unwrap_or(0.0)
                } else {
                    out.mapv(|v| v as f64).mean().unwrap_or(0.0)
                };
                out.mapv_inplace(|v| (pivot + (v as f64 - pivot) * f) as f32);
            }
            2 => {
                let f = rng.random_range(f_lo..=f_hi);
                let lum = luminance(&out);
                for y in 0..h {
                    for x in 0..w {
                        let l = lum[(y, x)];
                        for ch in 0..3 {
                            let v = out[(y, x, ch)] as f64;
                            out[(y, x, ch)] = (l + (v - l) * f) as f32;
                        }
                    }
                }
            }
            _ => {
                let shift = rng.random_range(-0.2 * s..=0.2 * s);
                for y in 0..h {
                    for x in 0..w {
                        let r = out[(y, x, 0)] as f64 / 255.0;
                        let g = out[(y, x, 1)] as f64 / 255.0;
                        let b = out[(y, x, 2)] as f64 / 255.0;
                        let (hh, ss, vv) = rgb_to_hsv(r, g, b);
                        let (r2, g2, b2) = hsv_to_rgb(hh + shift, ss, vv);
                        out[(y, x, 0)] = (r2 * 255.0) as f32;
                        out[(y, x, 1)] = (g2 * 255.0) as f32;
                        out[(y, x, 2)] = (b2 * 255.0) as f32;
                    }
                }
            }
        }
        clamp_px(&mut out);
    }
    Ok(out)
}

/// With probability `p`, collapse RGB to its luminance in every channel.
pub fn color_drop(img: &Array3<f32>, p: f64, rng: &mut ChaCha8Rng) -> Result<Array3<f32>> {
    AugmentOp::ColorDrop { probability: p }.validate()?;
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("color_drop needs 3 channels, got {c}")));
    }
    if rng.random::<f64>() >= p {
        return Ok(img.clone());
    }
    let lum = luminance(img);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let l = lum[(y, x)] as f32;
            for ch in 0..3 {
                out[(y, x, ch)] = l;
            }
        }
    }
    Ok(out)
}

// ---- gaussian blur ----

/// Normalized 1-d Gaussian taps at offsets -r..=r with r = ceil(2 sigma).
pub fn gaussian_kernel(sigma: f64) -> Array1<f64> {
    let r = (2.0 * sigma).ceil() as usize;
    let mut k = Array1::<f64>::zeros(2 * r + 1);
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r as f64;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let sum = k.sum();
    k.mapv_inplace(|v| v / sum);
    k
}

#[inline]
pub(crate) fn reflect(i: i64, n: i64) -> i64 {
    // Reflection without edge repeat; valid while |i| < n.
    if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    }
}

/// Separable Gaussian blur at a fixed sigma with reflect padding.
pub fn blur_with_sigma(img: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let k = gaussian_kernel(sigma);
    // Reflection indexing breaks past the image size; cap the radius.
    let r = (k.len() / 2).min(h.saturating_sub(1)).min(w.saturating_sub(1)) as i64;
    let k0 = k.len() as i64 / 2;
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for d in -r..=r {
                    let xx = reflect(x as i64 + d, w as i64) as usize;
                    acc += k[(k0 + d) as usize] * img[(y, xx, ch)] as f64;
                }
                tmp[(y, x, ch)] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for d in -r..=r {
                    let yy = reflect(y as i64 + d, h as i64) as usize;
                    acc += k[(k0 + d) as usize] * tmp[(yy, x, ch)];
                }
                out[(y, x, ch)] = acc as f32;
            }
        }
    }
    out
}

/// With probability `p`, blur with sigma drawn uniform in
/// [0.1, max(0.1, 0.5 strength)]; strength 0 short-circuits to identity.
pub fn gaussian_blur(
    img: &Array3<f32>,
    strength: f64,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f32>> {
    AugmentOp::GaussianBlur { probability: p, strength }.validate()?;
    let triggered = rng.random::<f64>() < p;
    if !triggered || strength == 0.0 {
        return Ok(img.clone());
    }
    let hi = (0.5 * strength).max(0.1);
    let sigma = rng.random_range(0.1..=hi);
    Ok(blur_with_sigma(img, sigma))
}
