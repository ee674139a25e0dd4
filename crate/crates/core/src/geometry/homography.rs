use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::GeometryError;

pub type Point2 = nalgebra::Point2<f64>;

const H33_EPS: f64 = 1e-9;
const DET_EPS: f64 = 1e-12;
const DEPTH_EPS: f64 = 1e-12;

/// Normalized, invertible 3×3 projective transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

/// A point pair `p` (source) ↔ `q` (target) with a non-negative weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p: Point2,
    pub q: Point2,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(p: Point2, q: Point2) -> Self {
        Self { p, q, weight: 1.0 }
    }
}

fn normalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let h33 = m[(2, 2)];
    if h33.abs() > H33_EPS {
        return m / h33;
    }
    let n = m.norm();
    let sign = if m.trace() < 0.0 { -1.0 } else { 1.0 };
    if sign > 0.0 && (n - 1.0).abs() < 1e-12 {
        return m;
    }
    m * (sign / n)
}

impl Homography {
    /// Normalizes `m` and rejects singular matrices.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) || m.norm() == 0.0 {
            return Err(GeometryError::Singular(0.0));
        }
        let m = normalize(m);
        let det = m.determinant();
        if det.abs() <= DET_EPS {
            return Err(GeometryError::Singular(det));
        }
        Ok(Self(m))
    }

    pub fn from_row_slice(v: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self, GeometryError> {
        Self::new(Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn warp_point(&self, p: Point2) -> Result<Point2, GeometryError> {
        let v = self.0 * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() <= DEPTH_EPS {
            return Err(GeometryError::DegeneratePoint(v.z));
        }
        Ok(Point2::new(v.x / v.z, v.y / v.z))
    }

    pub fn invert(&self) -> Result<Self, GeometryError> {
        let inv = self
            .0
            .try_inverse()
            .ok_or(GeometryError::Singular(self.0.determinant()))?;
        Self::new(inv)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Self, GeometryError> {
        Self::new(self.0 * other.0)
    }

    /// Frobenius distance between the normalized matrices.
    pub fn distance(&self, other: &Homography) -> f64 {
        (self.0 - other.0).norm()
    }

    /// Parses nine whitespace-separated floats in row-major order.
    pub fn parse_text(text: &str) -> Result<Self, GeometryError> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| GeometryError::Parse(format!("{t:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != 9 {
            return Err(GeometryError::Parse(format!("expected 9 values, found {}", vals.len())));
        }
        let arr: [f64; 9] = vals.try_into().expect("length checked");
        Self::from_row_slice(&arr)
    }

    pub fn to_text(&self) -> String {
        let a = self.to_row_array();
        let mut s = String::new();
        for row in a.chunks(3) {
            let _ = writeln!(s, "{:.12e} {:.12e} {:.12e}", row[0], row[1], row[2]);
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| GeometryError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }
}
