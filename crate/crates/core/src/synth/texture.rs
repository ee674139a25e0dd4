use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::features::Image;

/// Smooth value noise: bilinearly interpolated random lattice with a
/// smoothstep fade.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = cells + 1;
        Self {
            cells,
            lattice: (0..n * n).map(|_| rng.random::<f32>()).collect(),
        }
    }

    /// `u, v` in `[0, 1]`.
    fn at(&self, u: f32, v: f32) -> f32 {
        let n = self.cells + 1;
        let (x, y) = (u * self.cells as f32, v * self.cells as f32);
        let (x0, y0) = ((x as usize).min(self.cells - 1), (y as usize).min(self.cells - 1));
        let fade = |t: f32| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (fade(x - x0 as f32), fade(y - y0 as f32));
        let l = |r: usize, c: usize| self.lattice[r * n + c];
        let top = l(y0, x0) * (1.0 - fx) + l(y0, x0 + 1) * fx;
        let bot = l(y0 + 1, x0) * (1.0 - fx) + l(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Random textured image: multi-octave value noise, a few soft blobs, a
/// gradient and one rotated checkerboard patch.
pub fn procedural_texture(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Image {
    let octaves: Vec<(ValueNoise, f32)> = [(3usize, 0.45f32), (6, 0.3), (12, 0.25)]
        .into_iter()
        .map(|(cells, amp)| (ValueNoise::new(rng, cells), amp))
        .collect();
    let blobs: Vec<(f32, f32, f32, f32)> = (0..rng.random_range(3..7))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.04..0.15),
                rng.random_range(-0.6..0.6),
            )
        })
        .collect();
    let (gx, gy) = (rng.random_range(-0.3f32..0.3), rng.random_range(-0.3f32..0.3));
    let checker_center = (rng.random_range(0.2f32..0.8), rng.random_range(0.2f32..0.8));
    let checker_radius = rng.random_range(0.1f32..0.25);
    let checker_angle = rng.random_range(0.0f32..std::f32::consts::PI);
    let checker_period = rng.random_range(0.04f32..0.1);
    let (ca, sa) = (checker_angle.cos(), checker_angle.sin());

    let raw: Vec<f32> = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let u = x as f32 / (width.max(2) - 1) as f32;
            let v = y as f32 / (height.max(2) - 1) as f32;
            let mut val: f32 = octaves.iter().map(|(n, a)| n.at(u, v) * a).sum();
            for &(bx, by, r, a) in &blobs {
                let d2 = (u - bx).powi(2) + (v - by).powi(2);
                val += a * (-d2 / (2.0 * r * r)).exp();
            }
            val += gx * (u - 0.5) + gy * (v - 0.5);
            let (du, dv) = (u - checker_center.0, v - checker_center.1);
            if du * du + dv * dv < checker_radius * checker_radius {
                let (ru, rv) = (ca * du - sa * dv, sa * du + ca * dv);
                let cell = ((ru / checker_period).floor() + (rv / checker_period).floor()) as i64;
                val = if cell.rem_euclid(2) == 0 { 0.15 } else { 0.85 };
            }
            val
        })
        .collect();
    // Stretch to the full range.
    let (lo, hi) = raw.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = (hi - lo).max(1e-6);
    Image::new(
        width,
        height,
        raw.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect(),
    )
    .expect("clamped")
}
