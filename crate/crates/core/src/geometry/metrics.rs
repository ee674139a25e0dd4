use super::{GeometryError, Homography, Point2};

/// The four reference-image corners `(0,0), (w-1,0), (w-1,h-1), (0,h-1)`.
pub fn image_corners(width: f64, height: f64) -> [Point2; 4] {
    [
        Point2::new(0.0, 0.0),
        Point2::new(width - 1.0, 0.0),
        Point2::new(width - 1.0, height - 1.0),
        Point2::new(0.0, height - 1.0),
    ]
}

/// Mean distance between the corners warped by `est` and by `gt`.
/// A corner that maps to infinity under either transform yields `+∞`.
pub fn corner_error(est: &Homography, gt: &Homography, width: f64, height: f64) -> f64 {
    let mut total = 0.0;
    for c in image_corners(width, height) {
        match (est.warp_point(c), gt.warp_point(c)) {
            (Ok(a), Ok(b)) => total += (a - b).norm(),
            _ => return f64::INFINITY,
        }
    }
    total / 4.0
}

/// Corner error where a failed estimate counts as `+∞`.
pub fn corner_error_opt(est: Option<&Homography>, gt: &Homography, width: f64, height: f64) -> f64 {
    est.map_or(f64::INFINITY, |e| corner_error(e, gt, width, height))
}

/// Normalized area under the cumulative recall-vs-error curve on
/// `[0, threshold]`.
///
/// The recall curve is the empirical step function `r(e) = #{e_k <= e} / n`.
/// Its vertices (including the vertical jumps) are integrated with the
/// trapezoid rule, which is exact for a step function. Infinite errors are
/// never recalled.
pub fn auc(errors: &[f64], threshold: f64) -> Result<f64, GeometryError> {
    if errors.is_empty() {
        return Err(GeometryError::EmptyErrors);
    }
    // Written negated so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(threshold > 0.0) {
        return Err(GeometryError::Parse(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let n = errors.len() as f64;
    let mut sorted: Vec<f64> = errors.iter().copied().filter(|e| *e < threshold).collect();
    sorted.sort_by(f64::total_cmp);

    // Vertices of the step curve: (e_k, r_{k-1}) -> (e_k, r_k), then (t, r_last).
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for (k, &e) in sorted.iter().enumerate() {
        let e = e.max(0.0);
        xs.push(e);
        ys.push(k as f64 / n);
        xs.push(e);
        ys.push((k + 1) as f64 / n);
    }
    xs.push(threshold);
    ys.push(sorted.len() as f64 / n);

    let area: f64 = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * 0.5 * (y[0] + y[1]))
        .sum();
    Ok(area / threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Closed form of the step-curve integral: mean of max(0, 1 - e/t).
    fn auc_oracle(errors: &[f64], t: f64) -> f64 {
        errors.iter().map(|&e| (1.0 - e / t).max(0.0)).sum::<f64>() / errors.len() as f64
    }

    #[test]
    fn corner_error_cases() {
        let gt = Homography::from_row_slice(&[1.1, 0.05, 3.0, -0.02, 0.95, 1.0, 1e-4, -2e-4, 1.0]).unwrap();
        assert_eq!(corner_error(&gt, &gt, 64.0, 48.0), 0.0);
        let shifted = Homography::translation(1.0, 0.0).compose(&gt).unwrap();
        assert!((corner_error(&shifted, &gt, 64.0, 48.0) - 1.0).abs() < 1e-9);
        assert_eq!(corner_error_opt(None, &gt, 64.0, 48.0), f64::INFINITY);
    }

    #[test]
    fn corner_error_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mk = |rng: &mut ChaCha8Rng| {
                Homography::from_row_slice(&[
                    rng.random_range(0.8..1.2),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(0.8..1.2),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-1e-3..1e-3),
                    rng.random_range(-1e-3..1e-3),
                    1.0,
                ])
                .unwrap()
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let (w, h) = (120.0, 90.0);
            let mut direct = 0.0;
            for (x, y) in [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)] {
                let pa = a.matrix() * nalgebra::Vector3::new(x, y, 1.0);
                let pb = b.matrix() * nalgebra::Vector3::new(x, y, 1.0);
                let dx = pa.x / pa.z - pb.x / pb.z;
                let dy = pa.y / pa.z - pb.y / pb.z;
                direct += (dx * dx + dy * dy).sqrt() / 4.0;
            }
            assert!((corner_error(&a, &b, w, h) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn auc_examples() {
        for t in [1.0, 3.0, 5.0, 10.0] {
            assert_eq!(auc(&[0.0; 7], t).unwrap(), 1.0);
            assert_eq!(auc(&[t, t + 1.0, f64::INFINITY], t).unwrap(), 0.0);
            assert!((auc(&[0.0, t / 2.0], t).unwrap() - 0.75).abs() < 1e-12);
        }
        assert!(matches!(auc(&[], 3.0), Err(GeometryError::EmptyErrors)));
    }

    proptest! {
        #[test]
        fn auc_matches_oracle_and_is_monotone(
            errs in prop::collection::vec(prop_oneof![0.0f64..20.0, Just(f64::INFINITY)], 1..40),
            t1 in 0.1f64..15.0,
            dt in 0.0f64..5.0,
        ) {
            let a1 = auc(&errs, t1).unwrap();
            prop_assert!((a1 - auc_oracle(&errs, t1)).abs() < 1e-9);
            prop_assert!(auc(&errs, t1 + dt).unwrap() + 1e-12 >= a1);
            let mut rev = errs.clone();
            rev.reverse();
            prop_assert!((auc(&rev, t1).unwrap() - a1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a1));
        }
    }
}
