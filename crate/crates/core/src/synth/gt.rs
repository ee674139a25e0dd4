use crate::features::cell_center;
use crate::geometry::{Homography, Point2};

/// A cell grid over an image: `rows × cols` cells of `stride` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, stride: usize) -> Self {
        Self { rows, cols, stride }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, idx: usize) -> Point2 {
        let (x, y) = cell_center(idx % self.cols, idx / self.cols, 1.0 / self.stride as f64);
        Point2::new(x, y)
    }

    /// Nearest cell to a pixel coordinate, with its distance to that center.
    pub fn nearest(&self, p: Point2) -> Option<(usize, f64)> {
        let s = self.stride as f64;
        let c = ((p.x + 0.5) / s - 0.5).round();
        let r = ((p.y + 0.5) / s - 0.5).round();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        let idx = r as usize * self.cols + c as usize;
        Some((idx, (self.center(idx) - p).norm()))
    }
}

/// Pixel validity of the target image (e.g. the warp mask).
#[derive(Debug, Clone, Copy)]
pub struct PixelMask<'a> {
    pub width: usize,
    pub height: usize,
    pub valid: &'a [bool],
}

impl PixelMask<'_> {
    pub fn allows(&self, p: Point2) -> bool {
        let (x, y) = (p.x.round(), p.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return false;
        }
        self.valid[y as usize * self.width + x as usize]
    }
}

/// Source → target cell pairs whose warped source center lands within half a
/// cell of the target center. Each target keeps only its closest source
/// (ties to the smaller index), so the result is one-to-one.
pub fn gt_cell_pairs(
    h: &Homography,
    src: Grid,
    src_cells: impl IntoIterator<Item = usize>,
    dst: Grid,
    dst_allowed: impl Fn(usize) -> bool,
    mask: Option<&PixelMask>,
) -> Vec<(usize, usize)> {
    let half = dst.stride as f64 / 2.0;
    let mut best: Vec<Option<(usize, f64)>> = vec![None; dst.len()];
    for i in src_cells {
        let Ok(q) = h.warp_point(src.center(i)) else { continue };
        if mask.is_some_and(|m| !m.allows(q)) {
            continue;
        }
        let Some((j, d)) = dst.nearest(q) else { continue };
        if d > half || !dst_allowed(j) {
            continue;
        }
        if best[j].is_none_or(|(_, bd)| d < bd) {
            best[j] = Some((i, d));
        }
    }
    let mut pairs: Vec<(usize, usize)> = best
        .iter()
        .enumerate()
        .filter_map(|(j, b)| b.map(|(i, _)| (i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Fine ground truth inside one window pair, in window-local cell indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowGt {
    /// Index of the coarse GT pair the windows belong to.
    pub coarse: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// Ground truth at both levels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GtSet {
    pub coarse: Vec<(usize, usize)>,
    pub fine: Vec<WindowGt>,
}

impl GtSet {
    pub fn num_fine(&self) -> usize {
        self.fine.iter().map(|w| w.pairs.len()).sum()
    }
}

/// Fine-grid cells of a `size × size` window centered at `4 ×` a coarse cell;
/// `None` marks cells outside the grid.
pub fn window_cells(fine: Grid, coarse_idx: usize, coarse_cols: usize, size: usize) -> Vec<Option<usize>> {
    let (cr, cc) = (
        (coarse_idx / coarse_cols * 4) as isize,
        (coarse_idx % coarse_cols * 4) as isize,
    );
    let half = (size / 2) as isize;
    let mut out = Vec::with_capacity(size * size);
    for dr in -half..=half {
        for dc in -half..=half {
            let (r, c) = (cr + dr, cc + dc);
            let inside = r >= 0 && c >= 0 && (r as usize) < fine.rows && (c as usize) < fine.cols;
            out.push(inside.then(|| r as usize * fine.cols + c as usize));
        }
    }
    out
}

/// Coarse and fine ground truth for a pair related by `h` (image 0 → 1).
pub fn gt_matches(
    h: &Homography,
    coarse0: Grid,
    coarse1: Grid,
    fine0: Grid,
    fine1: Grid,
    window: usize,
    mask1: Option<&PixelMask>,
) -> GtSet {
    let coarse = gt_cell_pairs(h, coarse0, 0..coarse0.len(), coarse1, |_| true, mask1);
    let mut fine = Vec::new();
    for (k, &(i, j)) in coarse.iter().enumerate() {
        let w0 = window_cells(fine0, i, coarse0.cols, window);
        let w1 = window_cells(fine1, j, coarse1.cols, window);
        let src: Vec<usize> = w0.iter().flatten().copied().collect();
        let pairs = gt_cell_pairs(h, fine0, src, fine1, |b| w1.contains(&Some(b)), mask1);
        let local = |w: &[Option<usize>], cell: usize| w.iter().position(|c| *c == Some(cell)).expect("in window");
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(a, b)| (local(&w0, a), local(&w1, b))).collect();
        pairs.sort_unstable();
        if !pairs.is_empty() {
            fine.push(WindowGt { coarse: k, pairs });
        }
    }
    GtSet { coarse, fine }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grids() -> (Grid, Grid) {
        (Grid::new(8, 8, 8), Grid::new(32, 32, 2))
    }

    #[test]
    fn identity_full_diagonal() {
        let (c, f) = grids();
        let gt = gt_matches(&Homography::identity(), c, c, f, f, 5, None);
        assert_eq!(gt.coarse, (0..64).map(|i| (i, i)).collect::<Vec<_>>());
        for w in &gt.fine {
            assert!(w.pairs.iter().all(|(a, b)| a == b));
        }
        // An interior window keeps all 25 cells.
        assert_eq!(gt.fine[9].pairs.len(), 25);
    }

    #[test]
    fn one_cell_translation() {
        let (c, f) = grids();
        let h = Homography::translation(8.0, 0.0);
        let gt = gt_matches(&h, c, c, f, f, 5, None);
        let want: Vec<(usize, usize)> = (0..64).filter(|i| i % 8 != 7).map(|i| (i, i + 1)).collect();
        assert_eq!(gt.coarse, want);
    }

    #[test]
    fn mask_drops_targets() {
        let (c, f) = grids();
        let valid: Vec<bool> = (0..64 * 64).map(|k| k % 64 >= 32).collect();
        let mask = PixelMask {
            width: 64,
            height: 64,
            valid: &valid,
        };
        let gt = gt_matches(&Homography::identity(), c, c, f, f, 5, Some(&mask));
        assert!(gt.coarse.iter().all(|&(_, j)| j % 8 >= 4));
        assert_eq!(gt.coarse.len(), 32);
    }

    #[test]
    fn random_pairs_satisfy_half_cell_bound() {
        let (c, f) = grids();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let h = Homography::from_row_slice(&[
                rng.random_range(0.85..1.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-6.0..6.0),
                rng.random_range(-0.15..0.15),
                rng.random_range(0.85..1.15),
                rng.random_range(-6.0..6.0),
                rng.random_range(-1e-3..1e-3),
                rng.random_range(-1e-3..1e-3),
                1.0,
            ])
            .unwrap();
            let gt = gt_matches(&h, c, c, f, f, 5, None);
            let mut seen_src = std::collections::HashSet::new();
            let mut seen_dst = std::collections::HashSet::new();
            for &(i, j) in &gt.coarse {
                let q = h.warp_point(c.center(i)).unwrap();
                assert!((q - c.center(j)).norm() <= 4.0);
                assert!(seen_src.insert(i) && seen_dst.insert(j));
            }
            for w in &gt.fine {
                let (i, j) = gt.coarse[w.coarse];
                let w0 = window_cells(f, i, 8, 5);
                let w1 = window_cells(f, j, 8, 5);
                for &(a, b) in &w.pairs {
                    let q = h.warp_point(f.center(w0[a].unwrap())).unwrap();
                    assert!((q - f.center(w1[b].unwrap())).norm() <= 1.0);
                }
            }
        }
    }
}
