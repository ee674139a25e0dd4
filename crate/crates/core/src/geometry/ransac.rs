use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fit_dlt, is_degenerate_sample, Correspondence, GeometryError, Homography};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Symmetric transfer error threshold in pixels.
    pub inlier_threshold: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 3.0,
            max_iters: 2000,
            confidence: 0.9999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
    pub num_inliers: usize,
    /// Hypotheses drawn before the adaptive bound (or `max_iters`) stopped the loop.
    pub iterations: usize,
}

const MIN_SAMPLE: usize = 4;
const REFIT_ROUNDS: usize = 3;

/// Mean of the forward and backward reprojection distances; infinite when
/// either direction maps to infinity.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, c: &Correspondence) -> f64 {
    let fwd = h.warp_point(c.p).map(|q| (q - c.q).norm());
    let bwd = h_inv.warp_point(c.q).map(|p| (p - c.p).norm());
    match (fwd, bwd) {
        (Ok(f), Ok(b)) => 0.5 * (f + b),
        _ => f64::INFINITY,
    }
}

fn score(h: &Homography, corrs: &[Correspondence], thr: f64) -> Option<(Vec<bool>, usize)> {
    let h_inv = h.invert().ok()?;
    let mask: Vec<bool> = corrs
        .iter()
        .map(|c| symmetric_transfer_error(h, &h_inv, c) < thr)
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    Some((mask, count))
}

fn adaptive_bound(inlier_ratio: f64, confidence: f64, max_iters: usize) -> usize {
    let w4 = inlier_ratio.powi(MIN_SAMPLE as i32);
    if w4 >= 1.0 {
        return 1;
    }
    if w4 <= 0.0 {
        return max_iters;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w4).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, max_iters)
    } else {
        max_iters
    }
}

/// Draws four distinct indices from the hypothesis' own counter-based stream.
fn sample_indices(seed: u64, hypothesis: u64, n: usize) -> [usize; MIN_SAMPLE] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(hypothesis);
    let mut idx = [0usize; MIN_SAMPLE];
    let mut filled = 0;
    while filled < MIN_SAMPLE {
        let k = rng.random_range(0..n);
        if !idx[..filled].contains(&k) {
            idx[filled] = k;
            filled += 1;
        }
    }
    idx
}

/// Robust homography fit: minimal 4-point hypotheses scored by symmetric
/// transfer error, adaptive stopping, then DLT refits on the consensus set.
pub fn ransac_homography(corrs: &[Correspondence], cfg: &RansacConfig) -> Result<RansacResult, GeometryError> {
    let n = corrs.len();
    if n < MIN_SAMPLE {
        return Err(GeometryError::InsufficientData {
            needed: MIN_SAMPLE,
            got: n,
        });
    }
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut bound = cfg.max_iters;
    let mut iterations = 0;
    while iterations < bound.min(cfg.max_iters) {
        let idx = sample_indices(cfg.seed, iterations as u64, n);
        iterations += 1;
        let sample = idx.map(|i| corrs[i]);
        if is_degenerate_sample(&sample) {
            continue;
        }
        let Ok(h) = fit_dlt(&sample) else { continue };
        let Some((mask, count)) = score(&h, corrs, cfg.inlier_threshold) else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, _, c)| count > *c) {
            bound = adaptive_bound(count as f64 / n as f64, cfg.confidence, cfg.max_iters);
            best = Some((h, mask, count));
        }
    }

    let (mut h, mut mask, mut count) = best
        .filter(|(_, _, c)| *c >= MIN_SAMPLE)
        .ok_or_else(|| GeometryError::EstimationFailure("no hypothesis with at least 4 inliers".into()))?;

    for _ in 0..REFIT_ROUNDS {
        let inliers: Vec<Correspondence> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
        let Ok(refit) = fit_dlt(&inliers) else { break };
        let Some((new_mask, new_count)) = score(&refit, corrs, cfg.inlier_threshold) else {
            break;
        };
        if new_count < count.max(MIN_SAMPLE) {
            break;
        }
        let stable = new_mask == mask;
        h = refit;
        mask = new_mask;
        count = new_count;
        if stable {
            break;
        }
    }

    Ok(RansacResult {
        homography: h,
        inliers: mask,
        num_inliers: count,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{corner_error, Point2};
    use rand_distr::{Distribution, Normal};

    fn planted(rng: &mut ChaCha8Rng) -> Homography {
        Homography::from_row_slice(&[
            rng.random_range(0.8..1.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-20.0..20.0),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.8..1.2),
            rng.random_range(-20.0..20.0),
            rng.random_range(-5e-4..5e-4),
            rng.random_range(-5e-4..5e-4),
            1.0,
        ])
        .unwrap()
    }

    fn contaminated(
        rng: &mut ChaCha8Rng,
        h: &Homography,
        inliers: usize,
        outliers: usize,
        sigma: f64,
    ) -> Vec<Correspondence> {
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut out = Vec::new();
        for _ in 0..inliers {
            let p = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let q = h.warp_point(p).unwrap();
            out.push(Correspondence::new(
                p,
                Point2::new(q.x + noise.sample(rng), q.y + noise.sample(rng)),
            ));
        }
        for _ in 0..outliers {
            let p = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let q = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            out.push(Correspondence::new(p, q));
        }
        out
    }

    #[test]
    fn exact_data_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = planted(&mut rng);
        let corrs = contaminated(&mut rng, &h, 30, 0, 0.0);
        let res = ransac_homography(&corrs, &RansacConfig::default()).unwrap();
        assert!(res.homography.distance(&h) < 1e-6);
        assert!(res.inliers.iter().all(|&m| m));
    }

    #[test]
    fn three_points_is_insufficient() {
        let c = Correspondence::new(Point2::origin(), Point2::origin());
        assert!(matches!(
            ransac_homography(&[c; 3], &RansacConfig::default()),
            Err(GeometryError::InsufficientData { .. })
        ));
    }

    #[test]
    fn pure_noise_with_few_points_fails_cleanly() {
        let pts = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        let corrs: Vec<_> = pts
            .iter()
            .map(|&(x, y)| Correspondence::new(Point2::new(x, y), Point2::new(y, x)))
            .collect();
        assert!(matches!(
            ransac_homography(&corrs, &RansacConfig::default()),
            Err(GeometryError::EstimationFailure(_))
        ));
    }

    #[test]
    fn deterministic_and_inliers_respect_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = planted(&mut rng);
        let corrs = contaminated(&mut rng, &h, 60, 60, 0.5);
        let cfg = RansacConfig {
            seed: 42,
            ..Default::default()
        };
        let a = ransac_homography(&corrs, &cfg).unwrap();
        let b = ransac_homography(&corrs, &cfg).unwrap();
        assert_eq!(a, b);
        let inv = a.homography.invert().unwrap();
        for (c, &m) in corrs.iter().zip(&a.inliers) {
            if m {
                assert!(symmetric_transfer_error(&a.homography, &inv, c) < cfg.inlier_threshold);
            }
        }
        assert!(corner_error(&a.homography, &h, 640.0, 480.0) < 1.0);
    }

    #[test]
    fn adaptive_bound_shrinks_with_inlier_ratio() {
        assert_eq!(adaptive_bound(1.0, 0.9999, 2000), 1);
        assert_eq!(adaptive_bound(0.0, 0.9999, 2000), 2000);
        let hi = adaptive_bound(0.9, 0.9999, 2000);
        let lo = adaptive_bound(0.5, 0.9999, 2000);
        assert!(hi < lo);
        // ln(1e-4)/ln(1 - 0.5^4) = 142.7
        assert_eq!(lo, 143);
    }
}
