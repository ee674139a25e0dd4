use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::geometry::{fit_dlt, image_corners, is_degenerate_sample, Correspondence, Homography, Point2};

const MAX_ATTEMPTS: usize = 100;

/// Ranges for random homographies. Fractions are of the larger image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomographySamplerConfig {
    /// Upper bound on any corner's displacement; samples beyond it are redrawn.
    pub max_corner_shift: f64,
    pub rotation_deg: f64,
    /// Scale is log-uniform in `[min, max]`.
    pub scale_range: (f64, f64),
    pub translation: f64,
    /// Independent per-corner jitter.
    pub perspective: f64,
}

impl Default for HomographySamplerConfig {
    fn default() -> Self {
        Self {
            max_corner_shift: 0.2,
            rotation_deg: 15.0,
            scale_range: (0.8, 1.25),
            translation: 0.1,
            perspective: 0.05,
        }
    }
}

impl HomographySamplerConfig {
    pub fn zero() -> Self {
        Self {
            max_corner_shift: 0.0,
            rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            translation: 0.0,
            perspective: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.scale_range;
        let ok = self.max_corner_shift >= 0.0
            && self.rotation_deg >= 0.0
            && self.translation >= 0.0
            && self.perspective >= 0.0
            && lo > 0.0
            && lo <= hi;
        if ok {
            Ok(())
        } else {
            Err(SynthError::Config(format!("invalid sampler ranges {self:?}")))
        }
    }
}

fn symmetric(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

fn convex(q: &[Point2; 4]) -> bool {
    let mut sign = 0.0;
    for k in 0..4 {
        let (a, b, c) = (q[k], q[(k + 1) % 4], q[(k + 2) % 4]);
        let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cross == 0.0 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

/// Moves the image corners by a random similarity plus per-corner jitter and
/// fits the homography through the four corner pairs.
pub fn sample_homography(
    rng: &mut ChaCha8Rng,
    cfg: &HomographySamplerConfig,
    width: usize,
    height: usize,
) -> Result<Homography, SynthError> {
    cfg.validate()?;
    let (w, h) = (width as f64, height as f64);
    let side = w.max(h);
    let bound = cfg.max_corner_shift * side;
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let src = image_corners(w, h);
    for _ in 0..MAX_ATTEMPTS {
        let angle = symmetric(rng, cfg.rotation_deg).to_radians();
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo {
            rng.random_range(lo.ln()..=hi.ln()).exp()
        } else {
            lo
        };
        let (tx, ty) = (
            symmetric(rng, cfg.translation) * side,
            symmetric(rng, cfg.translation) * side,
        );
        let (cs, sn) = (angle.cos() * scale, angle.sin() * scale);
        let mut dst = [Point2::origin(); 4];
        for (d, p) in dst.iter_mut().zip(&src) {
            let (dx, dy) = (p.x - cx, p.y - cy);
            let jx = symmetric(rng, cfg.perspective) * side;
            let jy = symmetric(rng, cfg.perspective) * side;
            *d = Point2::new(cs * dx - sn * dy + cx + tx + jx, sn * dx + cs * dy + cy + ty + jy);
        }
        if src.iter().zip(&dst).any(|(p, q)| (q - p).norm() > bound + 1e-9) || !convex(&dst) {
            continue;
        }
        let corrs: Vec<Correspondence> = src.iter().zip(&dst).map(|(&p, &q)| Correspondence::new(p, q)).collect();
        if is_degenerate_sample(&corrs) {
            continue;
        }
        if let Ok(hm) = fit_dlt(&corrs) {
            return Ok(hm);
        }
    }
    Err(SynthError::Sampling(MAX_ATTEMPTS))
}
