use nalgebra::{DMatrix, Matrix3};

use super::{Correspondence, GeometryError, Homography, Point2};

/// Triangle-area tolerance below which three points count as collinear.
const COLLINEAR_AREA: f64 = 1e-6;
/// Ratio of the two smallest singular values' gap used to flag rank loss.
const RANK_TOL: f64 = 1e-10;

fn triangle_area(a: Point2, b: Point2, c: Point2) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs()
}

fn any_three_collinear(pts: &[Point2]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if triangle_area(pts[i], pts[j], pts[k]) < COLLINEAR_AREA {
                    return true;
                }
            }
        }
    }
    false
}

/// A minimal sample is degenerate if any three of its source or target
/// points are collinear.
pub fn is_degenerate_sample(corrs: &[Correspondence]) -> bool {
    let src: Vec<Point2> = corrs.iter().map(|c| c.p).collect();
    let dst: Vec<Point2> = corrs.iter().map(|c| c.q).collect();
    any_three_collinear(&src) || any_three_collinear(&dst)
}

/// Centroid shift plus isotropic scaling to mean distance √2.
fn hartley(pts: impl Iterator<Item = Point2> + Clone) -> Matrix3<f64> {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts.clone().fold((0.0, 0.0), |(ax, ay), p| (ax + p.x, ay + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = pts
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-15 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: Point2) -> (f64, f64) {
    (t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

/// Normalized DLT over all correspondences (smallest right singular vector
/// of the stacked `2N×9` system).
pub fn fit_dlt(corrs: &[Correspondence]) -> Result<Homography, GeometryError> {
    let n = corrs.len();
    if n < 4 {
        return Err(GeometryError::InsufficientData { needed: 4, got: n });
    }
    if n == 4 && is_degenerate_sample(corrs) {
        return Err(GeometryError::RankDeficient(
            "three of four points are collinear".into(),
        ));
    }
    let t_src = hartley(corrs.iter().map(|c| c.p));
    let t_dst = hartley(corrs.iter().map(|c| c.q));

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in corrs.iter().enumerate() {
        let (x, y) = apply(&t_src, c.p);
        let (u, v) = apply(&t_dst, c.q);
        let r0 = 2 * i;
        a[(r0, 3)] = -x;
        a[(r0, 4)] = -y;
        a[(r0, 5)] = -1.0;
        a[(r0, 6)] = v * x;
        a[(r0, 7)] = v * y;
        a[(r0, 8)] = v;
        let r1 = r0 + 1;
        a[(r1, 0)] = x;
        a[(r1, 1)] = y;
        a[(r1, 2)] = 1.0;
        a[(r1, 6)] = -u * x;
        a[(r1, 7)] = -u * y;
        a[(r1, 8)] = -u;
    }

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::EstimationFailure("SVD did not converge".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    let largest = sv[order[sv.len() - 1]];
    if sv[second] <= RANK_TOL * largest {
        return Err(GeometryError::RankDeficient(format!(
            "null space has dimension > 1 (σ = {:e}, {:e})",
            sv[smallest], sv[second]
        )));
    }
    let h: Vec<f64> = (0..9).map(|j| v_t[(smallest, j)]).collect();
    let h_norm = Matrix3::from_row_slice(&h);
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| GeometryError::EstimationFailure("normalizer not invertible".into()))?;
    Homography::new(t_dst_inv * h_norm * t_src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corrs_from(h: &Homography, pts: &[Point2]) -> Vec<Correspondence> {
        pts.iter()
            .map(|&p| Correspondence::new(p, h.warp_point(p).unwrap()))
            .collect()
    }

    #[test]
    fn unit_square_with_perspective_row() {
        let planted = Homography::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.001, 0.0, 1.0]).unwrap();
        let square = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ];
        let h = fit_dlt(&corrs_from(&planted, &square)).unwrap();
        assert!(h.distance(&planted) < 1e-6, "{}", h.distance(&planted));
    }

    #[test]
    fn identity_correspondences() {
        let pts = [
            Point2::new(3.0, 1.0),
            Point2::new(40.0, 2.0),
            Point2::new(37.0, 55.0),
            Point2::new(-4.0, 30.0),
            Point2::new(12.0, 12.5),
        ];
        let h = fit_dlt(&corrs_from(&Homography::identity(), &pts)).unwrap();
        assert!(h.distance(&Homography::identity()) < 1e-9);
    }

    #[test]
    fn too_few_points() {
        let c = Correspondence::new(Point2::origin(), Point2::origin());
        assert!(matches!(
            fit_dlt(&[c, c, c]),
            Err(GeometryError::InsufficientData { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn collinear_minimal_sample() {
        let pts = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(2.0, 2.0),
            Point2::new(0.0, 5.0),
        ];
        let corrs = corrs_from(&Homography::translation(1.0, 2.0), &pts);
        assert!(is_degenerate_sample(&corrs));
        assert!(matches!(fit_dlt(&corrs), Err(GeometryError::RankDeficient(_))));
    }

    #[test]
    fn all_points_collinear_is_rank_deficient() {
        let pts: Vec<Point2> = (0..8).map(|i| Point2::new(i as f64, 2.0 * i as f64 + 1.0)).collect();
        let corrs = corrs_from(&Homography::translation(1.0, 2.0), &pts);
        assert!(matches!(fit_dlt(&corrs), Err(GeometryError::RankDeficient(_))));
    }

    #[test]
    fn random_planted_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let planted = Homography::from_row_slice(&[
                rng.random_range(0.7..1.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-30.0..30.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.7..1.3),
                rng.random_range(-30.0..30.0),
                rng.random_range(-1e-3..1e-3),
                rng.random_range(-1e-3..1e-3),
                1.0,
            ])
            .unwrap();
            let pts: Vec<Point2> = (0..8)
                .map(|_| Point2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0)))
                .collect();
            let h = fit_dlt(&corrs_from(&planted, &pts)).unwrap();
            assert!(h.distance(&planted) < 1e-6);
        }
    }
}
