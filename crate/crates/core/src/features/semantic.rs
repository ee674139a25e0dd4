use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cell_validity, FeatureError, FeatureMap, Image, MapKind};
use crate::tensor::read_blob;

const PATCH: usize = 8;
const HIST_BINS: usize = 16;
const DCT_COEFFS: usize = 8;
pub const RAW_DESCRIPTOR_LEN: usize = HIST_BINS + DCT_COEFFS;

/// First eight (u, v) frequencies in zigzag order.
const ZIGZAG: [(usize, usize); DCT_COEFFS] = [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2), (0, 3), (1, 2)];

/// Histogram (fraction of pixels per bin) followed by the lowest orthonormal
/// DCT-II coefficients of an 8×8 patch given row-major.
pub fn raw_descriptor(patch: &[f32; PATCH * PATCH]) -> [f32; RAW_DESCRIPTOR_LEN] {
    let mut out = [0.0f32; RAW_DESCRIPTOR_LEN];
    for &p in patch {
        let bin = ((p * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
        out[bin] += 1.0 / (PATCH * PATCH) as f32;
    }
    let alpha = |k: usize| {
        if k == 0 {
            (1.0 / 8.0f64).sqrt()
        } else {
            (2.0 / 8.0f64).sqrt()
        }
    };
    for (slot, &(u, v)) in ZIGZAG.iter().enumerate() {
        let mut acc = 0.0f64;
        for y in 0..PATCH {
            let cy = ((2 * y + 1) as f64 * u as f64 * PI / 16.0).cos();
            for x in 0..PATCH {
                let cx = ((2 * x + 1) as f64 * v as f64 * PI / 16.0).cos();
                acc += patch[y * PATCH + x] as f64 * cy * cx;
            }
        }
        out[HIST_BINS + slot] = (alpha(u) * alpha(v) * acc) as f32;
    }
    out
}

/// Training-free patch descriptor standing in for a frozen vision model.
/// The projection is fixed at construction and never registered as a
/// trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySemantic {
    dim: usize,
    /// `RAW_DESCRIPTOR_LEN × dim`, row-major.
    projection: Vec<f32>,
}

impl ToySemantic {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (3.0 / RAW_DESCRIPTOR_LEN as f32).sqrt();
        let projection = (0..RAW_DESCRIPTOR_LEN * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { dim, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One descriptor per 8×8 patch of the padded image.
    pub fn extract(&self, img: &Image) -> FeatureMap {
        let (gh, gw) = (img.height / PATCH, img.width / PATCH);
        let mut values = Vec::with_capacity(gh * gw * self.dim);
        let mut patch = [0.0f32; PATCH * PATCH];
        for r in 0..gh {
            for c in 0..gw {
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        patch[y * PATCH + x] = img.get(c * PATCH + x, r * PATCH + y);
                    }
                }
                let raw = raw_descriptor(&patch);
                for d in 0..self.dim {
                    let mut acc = 0.0f32;
                    for (k, &v) in raw.iter().enumerate() {
                        acc += v * self.projection[k * self.dim + d];
                    }
                    values.push(acc);
                }
            }
        }
        FeatureMap::new(gh, gw, self.dim, values, 1.0 / PATCH as f64, MapKind::Semantic)
            .expect("finite descriptors")
            .with_valid(cell_validity(img, gh, gw, PATCH))
    }
}

/// Bilinear resampling of a grid to `th × tw` cells. Cell centers are
/// aligned (half-cell offset); samples beyond the outer centers clamp.
pub fn resample_bilinear(s: &FeatureMap, th: usize, tw: usize) -> Result<FeatureMap, FeatureError> {
    if th == 0 || tw == 0 {
        return Err(FeatureError::Shape(format!("zero target grid {th}×{tw}")));
    }
    if s.channels == 0 || s.grid_h == 0 || s.grid_w == 0 {
        return Err(FeatureError::Shape("empty source map".into()));
    }
    if (th, tw) == (s.grid_h, s.grid_w) {
        return Ok(s.clone());
    }
    let coord = |t: usize, n_t: usize, n_s: usize| -> f64 {
        ((t as f64 + 0.5) * n_s as f64 / n_t as f64 - 0.5).clamp(0.0, n_s as f64 - 1.0)
    };
    let ch = s.channels;
    let mut values = Vec::with_capacity(th * tw * ch);
    for ty in 0..th {
        let y = coord(ty, th, s.grid_h);
        let y0 = (y.floor() as usize).min(s.grid_h - 1);
        let y1 = (y0 + 1).min(s.grid_h - 1);
        let fy = y - y0 as f64;
        for tx in 0..tw {
            let x = coord(tx, tw, s.grid_w);
            let x0 = (x.floor() as usize).min(s.grid_w - 1);
            let x1 = (x0 + 1).min(s.grid_w - 1);
            let fx = x - x0 as f64;
            let (a, b, c, d) = (s.at(y0, x0), s.at(y0, x1), s.at(y1, x0), s.at(y1, x1));
            for k in 0..ch {
                let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
                let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
                values.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    let scale = s.scale * th as f64 / s.grid_h as f64;
    FeatureMap::new(th, tw, ch, values, scale, MapKind::Semantic)
}

/// Loads `<dir>/<image_id>.srmt` (shape `h × w × D`) and resamples it to the
/// `target_h × target_w` coarse grid.
pub fn semantic_from_file(
    dir: &Path,
    image_id: &str,
    target_h: usize,
    target_w: usize,
) -> Result<FeatureMap, FeatureError> {
    let path = dir.join(format!("{image_id}.srmt"));
    let t = read_blob(&path)?;
    let &[h, w, d] = t.shape() else {
        return Err(FeatureError::Shape(format!(
            "{}: expected a rank-3 blob, found shape {:?}",
            path.display(),
            t.shape()
        )));
    };
    if h == 0 || w == 0 || d == 0 {
        return Err(FeatureError::Shape(format!(
            "{}: empty blob {:?}",
            path.display(),
            t.shape()
        )));
    }
    let native = FeatureMap::new(
        h,
        w,
        d,
        t.into_data(),
        1.0 / 8.0 * h as f64 / target_h.max(1) as f64,
        MapKind::Semantic,
    )?;
    resample_bilinear(&native, target_h, target_w)
}

/// Source of semantic maps `S_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticProvider {
    Toy(ToySemantic),
    /// Directory of `<image_id>.srmt` blobs written by an external exporter.
    File {
        dir: PathBuf,
        dim: usize,
    },
}

impl SemanticProvider {
    pub fn dim(&self) -> usize {
        match self {
            Self::Toy(t) => t.dim(),
            Self::File { dim, .. } => *dim,
        }
    }

    /// Semantic map on the coarse grid of `img`.
    pub fn semantic(&self, img: &Image, image_id: &str) -> Result<FeatureMap, FeatureError> {
        let (gh, gw) = (img.height / PATCH, img.width / PATCH);
        match self {
            Self::Toy(t) => Ok(t.extract(img)),
            Self::File { dir, dim } => {
                let m = semantic_from_file(dir, image_id, gh, gw)?;
                if m.channels != *dim {
                    return Err(FeatureError::Shape(format!(
                        "semantic blob for {image_id} has {} channels, model expects {dim}",
                        m.channels
                    )));
                }
                Ok(m.with_valid(cell_validity(img, gh, gw, PATCH)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{write_blob, Tensor};

    #[test]
    fn constant_patch_descriptor() {
        let raw = raw_descriptor(&[0.5; 64]);
        for (b, &v) in raw[..HIST_BINS].iter().enumerate() {
            assert_eq!(v, if b == 8 { 1.0 } else { 0.0 });
        }
        // DC of an orthonormal 8×8 DCT is 8 × mean.
        assert!((raw[HIST_BINS] - 4.0).abs() < 1e-5);
        assert!(raw[HIST_BINS + 1..].iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn dct_matches_separable_oracle() {
        let patch: [f32; 64] = std::array::from_fn(|i| ((i * 37) % 17) as f32 / 17.0);
        let raw = raw_descriptor(&patch);
        // 1-D DCT on rows then columns.
        let basis = |k: usize, n: usize| {
            let a = if k == 0 { (0.125f64).sqrt() } else { (0.25f64).sqrt() };
            a * ((2 * n + 1) as f64 * k as f64 * PI / 16.0).cos()
        };
        let mut rows = [[0.0f64; 8]; 8];
        for (y, row) in rows.iter_mut().enumerate() {
            for (v, out) in row.iter_mut().enumerate() {
                *out = (0..8).map(|x| patch[y * 8 + x] as f64 * basis(v, x)).sum();
            }
        }
        for (slot, &(u, v)) in ZIGZAG.iter().enumerate() {
            let want: f64 = (0..8).map(|y| rows[y][v] * basis(u, y)).sum();
            assert!((raw[HIST_BINS + slot] as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_patches_identical_descriptors() {
        let img = Image::from_fn(32, 16, |x, y| (((x % 8) * 3 + (y % 8) * 5) % 11) as f32 / 10.0);
        let s = ToySemantic::new(24, 1).extract(&img);
        assert_eq!((s.grid_h, s.grid_w, s.channels), (2, 4, 24));
        for i in 1..8 {
            assert_eq!(s.token(i), s.token(0));
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = Image::from_fn(24, 24, |x, y| ((x * y) % 7) as f32 / 6.0);
        let p = ToySemantic::new(24, 9);
        let first = p.extract(&img);
        for _ in 0..100 {
            assert_eq!(p.extract(&img), first);
        }
        let brighter = Image::from_fn(24, 24, |x, y| ((x * y) % 7) as f32 / 6.0 * 0.8 + 0.1);
        let other = p.extract(&brighter);
        assert_eq!(other.values.len(), first.values.len());
        assert_ne!(other, first);
    }

    fn grid(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        let mut v = Vec::new();
        for r in 0..h {
            for q in 0..w {
                for k in 0..c {
                    v.push(f(r, q, k));
                }
            }
        }
        FeatureMap::new(h, w, c, v, 0.125, MapKind::Semantic).unwrap()
    }

    #[test]
    fn resample_two_to_four() {
        let s = grid(2, 2, 1, |r, c, _| [[0.0, 3.0], [6.0, 9.0]][r][c]);
        let t = resample_bilinear(&s, 4, 4).unwrap();
        assert_eq!(t.at(0, 0), &[0.0]);
        assert_eq!(t.at(0, 3), &[3.0]);
        assert_eq!(t.at(3, 0), &[6.0]);
        assert_eq!(t.at(3, 3), &[9.0]);
        // The field is 6y + 3x; (1,2) sits at source (y, x) = (0.25, 0.75).
        assert!((t.at(1, 2)[0] - 3.75).abs() < 1e-6);
        assert!((t.at(2, 1)[0] - 5.25).abs() < 1e-6);
        assert!((t.at(0, 1)[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn resample_identity_constant_and_mean() {
        let s = grid(5, 3, 2, |r, c, k| (r * 3 + c + k) as f32);
        assert_eq!(resample_bilinear(&s, 5, 3).unwrap().values, s.values);
        let k = grid(3, 3, 2, |_, _, k| 1.5 + k as f32);
        let big = resample_bilinear(&k, 7, 11).unwrap();
        assert!(big
            .values
            .chunks(2)
            .all(|c| (c[0] - 1.5).abs() < 1e-6 && (c[1] - 2.5).abs() < 1e-6));
        let smooth = grid(16, 16, 1, |r, c, _| (r as f32 * 0.05).sin() + (c as f32 * 0.04).cos());
        let mean = |m: &FeatureMap| m.values.iter().map(|&v| v as f64).sum::<f64>() / m.values.len() as f64;
        for (h, w) in [(8, 8), (32, 24)] {
            let r = resample_bilinear(&smooth, h, w).unwrap();
            assert!(
                (mean(&smooth) - mean(&r)).abs() < 1e-3,
                "{} vs {}",
                mean(&smooth),
                mean(&r)
            );
        }
        assert!(resample_bilinear(&s, 0, 3).is_err());
    }

    #[test]
    fn file_provider_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_fn(&[16, 16, 5], |i| (i as f32 * 0.37).sin());
        write_blob(&dir.path().join("img.srmt"), &t).unwrap();
        let m = semantic_from_file(dir.path(), "img", 16, 16).unwrap();
        assert_eq!(m.values, t.data());
        assert_eq!(semantic_from_file(dir.path(), "img", 8, 8).unwrap().grid_h, 8);
        assert!(matches!(
            semantic_from_file(dir.path(), "missing", 8, 8),
            Err(FeatureError::Blob(_))
        ));
        write_blob(&dir.path().join("flat.srmt"), &Tensor::<f32>::zeros(&[4, 5])).unwrap();
        assert!(matches!(
            semantic_from_file(dir.path(), "flat", 8, 8),
            Err(FeatureError::Shape(_))
        ));
        let mut bytes = std::fs::read(dir.path().join("img.srmt")).unwrap();
        bytes[0] = b'X';
        std::fs::write(dir.path().join("bad.srmt"), bytes).unwrap();
        assert!(matches!(
            semantic_from_file(dir.path(), "bad", 8, 8),
            Err(FeatureError::Blob(_))
        ));
    }
}
