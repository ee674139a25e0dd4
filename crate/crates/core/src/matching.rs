//! Coarse matching (dual-softmax + mutual nearest neighbours) and fine
//! matching inside cropped windows.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{cell_center, FeatureMap};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("channel mismatch: {0} vs {1}")]
    Channels(usize, usize),
    #[error("every score is masked")]
    AllMasked,
    #[error("window size {0} must be odd and positive")]
    WindowSize(usize),
    #[error("window sizes differ: {0} vs {1}")]
    WindowMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineMode {
    /// Mutual nearest neighbours over every unmasked window cell.
    Overlap,
    /// One match per window: the center cell of the first window and its
    /// best partner in the second.
    CenterOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub temperature: f64,
    pub coarse_threshold: f64,
    pub window: usize,
    pub fine_temperature: f64,
    pub fine_threshold: f64,
    pub fine_mode: FineMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            coarse_threshold: 0.2,
            window: 5,
            fine_temperature: 0.1,
            fine_threshold: 0.2,
            fine_mode: FineMode::Overlap,
        }
    }
}

/// Dense `rows × cols` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Raw scores; masked entries are `-∞`.
pub type ScoreMatrix = Matrix;
/// Dual-softmax output with entries in `[0, 1]`.
pub type ConfidenceMatrix = Matrix;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scores `⟨a_i, b_j⟩ / τ` over raw token rows; rows/cols flagged invalid are
/// set to `-∞`.
pub fn similarity_raw(
    a: &[f32],
    a_valid: &[bool],
    b: &[f32],
    b_valid: &[bool],
    dim: usize,
    temperature: f64,
) -> ScoreMatrix {
    let (n, m) = (a_valid.len(), b_valid.len());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = &a[i * dim..(i + 1) * dim];
        for j in 0..m {
            data.push(if a_valid[i] && b_valid[j] {
                dot(ai, &b[j * dim..(j + 1) * dim]) / temperature
            } else {
                f64::NEG_INFINITY
            });
        }
    }
    Matrix::new(n, m, data)
}

pub fn similarity_matrix(a: &FeatureMap, b: &FeatureMap, temperature: f64) -> Result<ScoreMatrix, MatchError> {
    if a.channels != b.channels {
        return Err(MatchError::Channels(a.channels, b.channels));
    }
    Ok(similarity_raw(
        &a.values,
        &a.valid,
        &b.values,
        &b.valid,
        a.channels,
        temperature,
    ))
}

/// Row-softmax times column-softmax. Fully masked rows/columns give zeros.
pub fn dual_softmax(s: &ScoreMatrix) -> Result<ConfidenceMatrix, MatchError> {
    let (n, m) = (s.rows, s.cols);
    if n == 0 || m == 0 || s.data.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(MatchError::AllMasked);
    }
    let mut row = vec![0.0; n * m];
    for i in 0..n {
        let r = &s.data[i * m..(i + 1) * m];
        let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let z: f64 = r.iter().map(|&v| (v - mx).exp()).sum();
        for j in 0..m {
            row[i * m + j] = (r[j] - mx).exp() / z;
        }
    }
    let mut out = vec![0.0; n * m];
    for j in 0..m {
        let mx = (0..n).map(|i| s.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let z: f64 = (0..n).map(|i| (s.at(i, j) - mx).exp()).sum();
        for i in 0..n {
            out[i * m + j] = row[i * m + j] * (s.at(i, j) - mx).exp() / z;
        }
    }
    Ok(Matrix::new(n, m, out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

/// Index of the first maximum.
fn argmax(it: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in it.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Pairs that clear `threshold` and are each other's row/column argmax
/// (ties go to the smaller index). Sorted by row.
pub fn mnn_select(p: &ConfidenceMatrix, threshold: f64) -> Vec<CoarseMatch> {
    let (n, m) = (p.rows, p.cols);
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let col_best: Vec<usize> = (0..m)
        .map(|j| argmax((0..n).map(|i| p.at(i, j))).expect("non-empty"))
        .collect();
    let mut out = Vec::new();
    for i in 0..n {
        let j = argmax((0..m).map(|j| p.at(i, j))).expect("non-empty");
        let c = p.at(i, j);
        if col_best[j] == i && c >= threshold {
            out.push(CoarseMatch { i, j, confidence: c });
        }
    }
    out
}

/// `size × size` block of fine tokens around a center cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub size: usize,
    /// Center on the fine grid, `(row, col)`; may sit on the border.
    pub center: (usize, usize),
    /// Fine-grid `(row, col)` of each cell; `None` outside the grid or padded.
    pub cells: Vec<Option<(usize, usize)>>,
    pub dim: usize,
    /// Zero-filled where masked.
    pub features: Vec<f32>,
    /// Scale of the fine grid relative to the image.
    pub scale: f64,
}

impl Window {
    pub fn valid(&self) -> Vec<bool> {
        self.cells.iter().map(|c| c.is_some()).collect()
    }

    /// Image-pixel coordinate of window cell `k`.
    pub fn pixel(&self, k: usize) -> Option<(f64, f64)> {
        self.cells[k].map(|(r, c)| cell_center(c, r, self.scale))
    }
}

/// Fine-grid window centered at `4 ×` the coarse cell coordinates.
pub fn crop_window(f: &FeatureMap, coarse_row: usize, coarse_col: usize, size: usize) -> Result<Window, MatchError> {
    if size.is_multiple_of(2) {
        return Err(MatchError::WindowSize(size));
    }
    let (cr, cc) = (coarse_row * 4, coarse_col * 4);
    let half = (size / 2) as isize;
    let mut cells = Vec::with_capacity(size * size);
    let mut features = Vec::with_capacity(size * size * f.channels);
    for dr in -half..=half {
        for dc in -half..=half {
            let (r, c) = (cr as isize + dr, cc as isize + dc);
            let inside = r >= 0 && c >= 0 && (r as usize) < f.grid_h && (c as usize) < f.grid_w;
            let cell = inside
                .then_some((r as usize, c as usize))
                .filter(|&(r, c)| f.valid[r * f.grid_w + c]);
            match cell {
                Some((r, c)) => features.extend_from_slice(f.at(r, c)),
                None => features.extend(std::iter::repeat_n(0.0, f.channels)),
            }
            cells.push(cell);
        }
    }
    Ok(Window {
        size,
        center: (cr, cc),
        cells,
        dim: f.channels,
        features,
        scale: f.scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatch {
    /// Image-0 pixel coordinate `(x, y)`.
    pub p0: (f64, f64),
    pub p1: (f64, f64),
    pub confidence: f64,
    /// Window cell indices the match came from.
    pub cell0: usize,
    pub cell1: usize,
}

pub fn window_confidence(w0: &Window, w1: &Window, temperature: f64) -> Result<ConfidenceMatrix, MatchError> {
    if w0.size != w1.size {
        return Err(MatchError::WindowMismatch(w0.size, w1.size));
    }
    if w0.dim != w1.dim {
        return Err(MatchError::Channels(w0.dim, w1.dim));
    }
    let s = similarity_raw(
        &w0.features,
        &w0.valid(),
        &w1.features,
        &w1.valid(),
        w0.dim,
        temperature,
    );
    dual_softmax(&s)
}

fn to_fine(w0: &Window, w1: &Window, m: CoarseMatch) -> FineMatch {
    FineMatch {
        p0: w0.pixel(m.i).expect("unmasked"),
        p1: w1.pixel(m.j).expect("unmasked"),
        confidence: m.confidence,
        cell0: m.i,
        cell1: m.j,
    }
}

/// Mutual nearest neighbours of the windows' dual-softmax above `threshold`.
pub fn fine_match_overlap(
    w0: &Window,
    w1: &Window,
    temperature: f64,
    threshold: f64,
) -> Result<(Vec<FineMatch>, ConfidenceMatrix), MatchError> {
    let p = window_confidence(w0, w1, temperature)?;
    // Masked cells have zero confidence everywhere; the threshold keeps
    // them out unless it is non-positive.
    let valid0 = w0.valid();
    let valid1 = w1.valid();
    let matches = mnn_select(&p, threshold)
        .into_iter()
        .filter(|m| valid0[m.i] && valid1[m.j])
        .map(|m| to_fine(w0, w1, m))
        .collect();
    Ok((matches, p))
}

/// Center cell of `w0` and its highest-confidence partner in `w1`.
pub fn fine_match_center(
    w0: &Window,
    w1: &Window,
    temperature: f64,
) -> Result<(Option<FineMatch>, ConfidenceMatrix), MatchError> {
    let p = window_confidence(w0, w1, temperature)?;
    let c = w0.cells.len() / 2;
    let valid1 = w1.valid();
    let best = argmax((0..p.cols).map(|j| if valid1[j] { p.at(c, j) } else { f64::NEG_INFINITY }));
    let m = match (w0.cells[c], best) {
        (Some(_), Some(j)) if valid1[j] => Some(to_fine(
            w0,
            w1,
            CoarseMatch {
                i: c,
                j,
                confidence: p.at(c, j),
            },
        )),
        _ => None,
    };
    Ok((m, p))
}

/// Text dump: one `x0 y0 x1 y1 confidence` line per match.
pub fn write_matches(w: &mut impl Write, matches: &[FineMatch]) -> std::io::Result<()> {
    for m in matches {
        writeln!(
            w,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            m.p0.0, m.p0.1, m.p1.0, m.p1.1, m.confidence
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::MapKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(rows: &[&[f64]]) -> ScoreMatrix {
        Matrix::new(
            rows.len(),
            rows[0].len(),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    #[test]
    fn dual_softmax_examples() {
        let p = dual_softmax(&scores(&[&[3.7]])).unwrap();
        assert_eq!(p.data, vec![1.0]);

        let p = dual_softmax(&scores(&[&[10.0, 0.0], &[0.0, 10.0]])).unwrap();
        let s = 1.0 / (1.0 + (-10f64).exp());
        let o = (-10f64).exp() / (1.0 + (-10f64).exp());
        assert!((p.at(0, 0) - s * s).abs() < 1e-12);
        assert!((p.at(0, 1) - o * o).abs() < 1e-12);
        assert!(p.at(0, 0) > 0.9999 && p.at(1, 0) < 1e-8);

        let p = dual_softmax(&Matrix::new(4, 4, vec![2.5; 16])).unwrap();
        assert!(p.data.iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));

        assert!(matches!(
            dual_softmax(&Matrix::new(2, 2, vec![f64::NEG_INFINITY; 4])),
            Err(MatchError::AllMasked)
        ));
    }

    #[test]
    fn similarity_examples() {
        let a = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0], 0.125, MapKind::Fused).unwrap();
        let s = similarity_matrix(&a, &a, 0.1).unwrap();
        assert_eq!(s.data, vec![10.0, 0.0, 0.0, 10.0]);
        let masked = a.clone().with_valid(vec![true, false]);
        let s = similarity_matrix(&masked, &a, 1.0).unwrap();
        assert_eq!(s.at(1, 0), f64::NEG_INFINITY);
        let p = dual_softmax(&s).unwrap();
        assert!(mnn_select(&p, 0.0).iter().all(|m| m.i != 1));
        let other = FeatureMap::new(1, 2, 3, vec![0.0; 6], 0.125, MapKind::Fused).unwrap();
        assert!(matches!(
            similarity_matrix(&a, &other, 1.0),
            Err(MatchError::Channels(2, 3))
        ));
    }

    #[test]
    fn mnn_examples() {
        let p = Matrix::new(3, 3, vec![0.8, 0.1, 0.0, 0.1, 0.7, 0.1, 0.0, 0.1, 0.9]);
        let m = mnn_select(&p, 0.2);
        assert_eq!(
            m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(),
            vec![(0, 0), (1, 1), (2, 2)]
        );
        assert!(mnn_select(&p, 1.1).is_empty());

        let p = Matrix::new(3, 2, vec![0.9, 0.05, 0.0, 0.5, 0.95, 0.01]);
        let m = mnn_select(&p, 0.0);
        assert_eq!(m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(1, 1), (2, 0)]);

        // Ties go to the smaller index on both axes.
        let p = Matrix::new(2, 2, vec![0.5; 4]);
        assert_eq!(mnn_select(&p, 0.0).len(), 1);
        assert_eq!((mnn_select(&p, 0.0)[0].i, mnn_select(&p, 0.0)[0].j), (0, 0));
    }

    fn fine_map(h: usize, w: usize, dim: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..h * w * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureMap::new(h, w, dim, v, 0.5, MapKind::Fine).unwrap()
    }

    #[test]
    fn crop_window_examples() {
        let f = fine_map(16, 16, 3, 0);
        let w = crop_window(&f, 2, 3, 5).unwrap();
        assert_eq!(w.center, (8, 12));
        for (k, cell) in w.cells.iter().enumerate() {
            let (r, c) = (8 + k / 5 - 2, 12 + k % 5 - 2);
            assert_eq!(*cell, Some((r, c)));
            assert_eq!(&w.features[k * 3..k * 3 + 3], f.at(r, c));
        }
        let corner = crop_window(&f, 0, 0, 5).unwrap();
        assert_eq!(corner.cells.len(), 25);
        assert_eq!(corner.cells.iter().filter(|c| c.is_none()).count(), 16);
        assert!(corner.features[..3].iter().all(|&v| v == 0.0));
        assert!(matches!(crop_window(&f, 0, 0, 4), Err(MatchError::WindowSize(4))));
    }

    #[test]
    fn fine_overlap_self_window() {
        // Distinct unit-norm cells: every cell is its own mutual best.
        let mut f = fine_map(12, 12, 32, 1);
        for r in f.values.chunks_mut(32) {
            let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
        }
        let w = crop_window(&f, 1, 1, 5).unwrap();
        let (m, _) = fine_match_overlap(&w, &w, 0.1, 0.2).unwrap();
        assert_eq!(m.len(), 25);
        assert!(m.iter().all(|m| m.cell0 == m.cell1 && m.p0 == m.p1));
        assert_eq!(m[0].p0, (4.5, 4.5));
    }

    #[test]
    fn fine_center_variant() {
        let f = fine_map(12, 12, 8, 2);
        let w = crop_window(&f, 1, 1, 5).unwrap();
        let (m, p) = fine_match_center(&w, &w, 0.1).unwrap();
        let m = m.unwrap();
        assert_eq!(m.cell0, 12);
        let best = (0..25).max_by(|&a, &b| p.at(12, a).total_cmp(&p.at(12, b))).unwrap();
        assert_eq!(m.cell1, best);
    }

    #[test]
    fn match_dump_format() {
        let m = FineMatch {
            p0: (1.0, 2.5),
            p1: (3.25, 4.0),
            confidence: 0.123456789,
            cell0: 0,
            cell1: 0,
        };
        let mut buf = Vec::new();
        write_matches(&mut buf, &[m]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "1.000000 2.500000 3.250000 4.000000 0.123457\n"
        );
    }
}
