//! Stochastic view generation for pre-training batches.
//!
//! A policy is sampled into a concrete [`Transform`] (crop box, flip, jitter
//! factors) which is then applied deterministically. Every transform keeps the
//! image shape and clamps values into `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, ImageShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    /// Fraction of the source area kept by the random resized crop.
    pub crop_scale: (f32, f32),
    /// Aspect ratio range of the crop box.
    pub crop_ratio: (f32, f32),
    pub flip_prob: f32,
    pub brightness: f32,
    pub contrast: f32,
    /// Ignored for single channel images.
    pub saturation: f32,
    /// Ignored for single channel images.
    pub hue: f32,
    /// No-op on single channel images.
    pub grayscale_prob: f32,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.5, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentationPolicy {
    /// Character images: mirroring changes the glyph, so flips are disabled.
    pub fn omniglot() -> Self {
        Self {
            flip_prob: 0.0,
            ..Self::default()
        }
    }

    /// The identity policy (useful to check plumbing).
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got {lo}..{hi}"));
        }
        let (lo, hi) = self.crop_ratio;
        if !(lo > 0.0 && lo <= hi) {
            return Err(format!("crop_ratio must satisfy 0 < lo <= hi, got {lo}..{hi}"));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be a probability, got {p}"));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("{name} must lie in [0, 1], got {s}"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(format!("hue must lie in [0, 0.5], got {}", self.hue));
        }
        Ok(())
    }

    /// Draws one concrete transform for an image of the given shape.
    pub fn sample<R: Rng + ?Sized>(&self, shape: ImageShape, rng: &mut R) -> Transform {
        let crop = sample_crop(self, shape, rng);
        let flip = self.flip_prob > 0.0 && rng.random::<f32>() < self.flip_prob;
        let brightness = jitter_factor(self.brightness, rng);
        let contrast = jitter_factor(self.contrast, rng);
        let saturation = jitter_factor(self.saturation, rng);
        let hue = if self.hue > 0.0 {
            rng.random_range(-self.hue..=self.hue)
        } else {
            0.0
        };
        let grayscale = self.grayscale_prob > 0.0 && rng.random::<f32>() < self.grayscale_prob;
        Transform {
            crop,
            flip,
            brightness,
            contrast,
            saturation,
            hue,
            grayscale,
        }
    }
}

fn jitter_factor<R: Rng + ?Sized>(strength: f32, rng: &mut R) -> f32 {
    if strength > 0.0 {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
    } else {
        1.0
    }
}

/// Crop window in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub top: f32,
    pub left: f32,
    pub height: f32,
    pub width: f32,
}

fn sample_crop<R: Rng + ?Sized>(policy: &AugmentationPolicy, shape: ImageShape, rng: &mut R) -> CropBox {
    let h = shape.height as f32;
    let w = shape.width as f32;
    let area = h * w;
    let (log_lo, log_hi) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, policy.crop_scale.0, policy.crop_scale.1);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w && ch <= h && cw >= 1.0 && ch >= 1.0 {
            let top = uniform(rng, 0.0, h - ch);
            let left = uniform(rng, 0.0, w - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    CropBox {
        top: 0.0,
        left: 0.0,
        height: h,
        width: w,
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// A fully determined view transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub crop: CropBox,
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub grayscale: bool,
}

impl Transform {
    pub fn apply(&self, image: &Image) -> Image {
        let shape = image.shape();
        let (h, w) = (shape.height, shape.width);
        let plane = h * w;
        let mut out = vec![0.0f32; shape.len()];

        let sy = self.crop.height / h as f32;
        let sx = self.crop.width / w as f32;
        for c in 0..shape.channels {
            for y in 0..h {
                let src_y = self.crop.top + (y as f32 + 0.5) * sy - 0.5;
                for x in 0..w {
                    let xo = if self.flip { w - 1 - x } else { x };
                    let src_x = self.crop.left + (xo as f32 + 0.5) * sx - 0.5;
                    out[c * plane + y * w + x] = image.sample_bilinear(c, src_y, src_x);
                }
            }
        }

        for v in &mut out {
            *v = (*v * self.brightness).clamp(0.0, 1.0);
        }

        let gray = luminance(&out, shape);
        let mean = gray.iter().sum::<f32>() / plane as f32;
        for v in &mut out {
            *v = ((*v - mean) * self.contrast + mean).clamp(0.0, 1.0);
        }

        if shape.channels == 3 {
            let gray = luminance(&out, shape);
            for c in 0..3 {
                for (i, g) in gray.iter().enumerate() {
                    let v = &mut out[c * plane + i];
                    *v = ((*v - g) * self.saturation + g).clamp(0.0, 1.0);
                }
            }
            if self.hue != 0.0 {
                shift_hue(&mut out, plane, self.hue);
            }
            if self.grayscale {
                let gray = luminance(&out, shape);
                for c in 0..3 {
                    out[c * plane..(c + 1) * plane].copy_from_slice(&gray);
                }
            }
        }

        Image::from_raw_clamped(shape, out)
    }
}

fn luminance(data: &[f32], shape: ImageShape) -> Vec<f32> {
    let plane = shape.height * shape.width;
    if shape.channels == 3 {
        (0..plane)
            .map(|i| 0.299 * data[i] + 0.587 * data[plane + i] + 0.114 * data[2 * plane + i])
            .collect()
    } else {
        let mut g = vec![0.0; plane];
        for c in 0..shape.channels {
            for (i, v) in data[c * plane..(c + 1) * plane].iter().enumerate() {
                g[i] += v / shape.channels as f32;
            }
        }
        g
    }
}

fn shift_hue(data: &mut [f32], plane: usize, shift: f32) {
    for i in 0..plane {
        let (r, g, b) = (data[i], data[plane + i], data[2 * plane + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let h = (h + shift).rem_euclid(1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        data[i] = r.clamp(0.0, 1.0);
        data[plane + i] = g.clamp(0.0, 1.0);
        data[2 * plane + i] = b.clamp(0.0, 1.0);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
