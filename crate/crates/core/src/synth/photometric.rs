use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::features::Image;
use crate::geometry::{Homography, Point2};

/// Inverse-warps `img` by `h` with bilinear sampling. Pixels whose preimage
/// falls outside the source are zero and flagged `false` in the mask.
pub fn warp_image(img: &Image, h: &Homography) -> Result<(Image, Vec<bool>), SynthError> {
    let inv = h.invert()?;
    let (w, hh) = (img.orig_width, img.orig_height);
    let mut mask = Vec::with_capacity(w * hh);
    let mut pixels = Vec::with_capacity(w * hh);
    for y in 0..hh {
        for x in 0..w {
            let v = inv
                .warp_point(Point2::new(x as f64, y as f64))
                .ok()
                .and_then(|p| img.sample_bilinear(p.x, p.y));
            mask.push(v.is_some());
            pixels.push(v.unwrap_or(0.0));
        }
    }
    Ok((Image::new(w, hh, pixels).expect("bilinear stays in range"), mask))
}

/// Magnitudes for appearance changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricConfig {
    /// Offset drawn from `[-brightness, brightness]`.
    pub brightness: f32,
    /// Gain drawn from `[1 - contrast, 1 + contrast]`, applied about 0.5.
    pub contrast: f32,
    /// Longest motion-blur kernel in pixels (≤ 1 disables blur).
    pub max_blur: usize,
    pub noise_std: f32,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.2,
            max_blur: 3,
            noise_std: 0.02,
        }
    }
}

impl PhotometricConfig {
    pub fn zero() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            max_blur: 0,
            noise_std: 0.0,
        }
    }
}

/// One concrete draw of the distortion parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub brightness: f32,
    pub contrast: f32,
    pub blur_len: usize,
    pub blur_angle: f64,
    pub noise_std: f32,
}

impl Photometric {
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &PhotometricConfig) -> Self {
        let sym = |rng: &mut ChaCha8Rng, r: f32| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let brightness = sym(rng, cfg.brightness);
        let contrast = 1.0 + sym(rng, cfg.contrast);
        let blur_len = if cfg.max_blur > 1 {
            rng.random_range(1..=cfg.max_blur)
        } else {
            1
        };
        let blur_angle = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            brightness,
            contrast,
            blur_len,
            blur_angle,
            noise_std: cfg.noise_std,
        }
    }

    /// Brightness, contrast, motion blur, then noise; clamped to `[0, 1]`.
    /// Neutral settings leave pixels untouched.
    pub fn apply(&self, img: &Image, rng: &mut ChaCha8Rng) -> Image {
        let mut out = img.clone();
        if self.brightness != 0.0 {
            out.pixels.iter_mut().for_each(|p| *p += self.brightness);
        }
        if self.contrast != 1.0 {
            out.pixels
                .iter_mut()
                .for_each(|p| *p = (*p - 0.5) * self.contrast + 0.5);
        }
        out.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        if self.blur_len > 1 {
            out = motion_blur(&out, self.blur_len, self.blur_angle);
        }
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0f32, self.noise_std).expect("positive std");
            out.pixels
                .iter_mut()
                .for_each(|p| *p = (*p + normal.sample(rng)).clamp(0.0, 1.0));
        }
        out
    }
}

/// Average of `len` bilinear samples along a line through each pixel.
fn motion_blur(img: &Image, len: usize, angle: f64) -> Image {
    let (dx, dy) = (angle.cos(), angle.sin());
    let half = (len as f64 - 1.0) / 2.0;
    let (w, h) = (img.orig_width as f64, img.orig_height as f64);
    let mut out = img.clone();
    for y in 0..img.orig_height {
        for x in 0..img.orig_width {
            let mut acc = 0.0f64;
            for k in 0..len {
                let t = k as f64 - half;
                let sx = (x as f64 + t * dx).clamp(0.0, w - 1.0);
                let sy = (y as f64 + t * dy).clamp(0.0, h - 1.0);
                acc += img.sample_bilinear(sx, sy).unwrap_or(0.0) as f64;
            }
            out.pixels[y * img.width + x] = (acc / len as f64).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

pub fn photometric_distort(img: &Image, rng: &mut ChaCha8Rng, cfg: &PhotometricConfig) -> Image {
    let params = Photometric::sample(rng, cfg);
    params.apply(img, rng)
}
