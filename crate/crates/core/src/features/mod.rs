//! Image ingestion, the convolutional feature pyramid and semantic providers.

mod backbone;
mod image;
mod semantic;

use thiserror::Error;

use crate::tensor::{BlobError, Real, Tensor, TensorError};

pub use backbone::{Backbone, BackboneConfig, PyramidVars};
pub use image::{decode_pnm, load_image, save_pgm, Image};
pub use semantic::{
    raw_descriptor, resample_bilinear, semantic_from_file, SemanticProvider, ToySemantic, RAW_DESCRIPTOR_LEN,
};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image: {0}")]
    Format(String),
    #[error("unsupported maxval {0} (only 255)")]
    Maxval(u32),
    #[error("semantic blob: {0}")]
    Blob(#[from] BlobError),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which stage of the pipeline produced a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Coarse,
    Enhanced,
    Fused,
    Fine,
    Semantic,
}

/// Dense `grid_h × grid_w × channels` grid, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    /// Ratio of grid resolution to source image resolution (1/8, 1/2, ...).
    pub scale: f64,
    pub kind: MapKind,
    /// `false` for cells that lie entirely in ingestion padding.
    pub valid: Vec<bool>,
}

impl FeatureMap {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        values: Vec<f32>,
        scale: f64,
        kind: MapKind,
    ) -> Result<Self, FeatureError> {
        if values.len() != grid_h * grid_w * channels {
            return Err(FeatureError::Shape(format!(
                "{} values for a {grid_h}×{grid_w}×{channels} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Shape("non-finite feature value".into()));
        }
        Ok(Self {
            grid_h,
            grid_w,
            channels,
            values,
            scale,
            kind,
            valid: vec![true; grid_h * grid_w],
        })
    }

    /// Wraps an `N×C` tensor taken off a tape.
    pub fn from_tensor<T: Real>(
        t: &Tensor<T>,
        grid_h: usize,
        grid_w: usize,
        scale: f64,
        kind: MapKind,
    ) -> Result<Self, FeatureError> {
        let (n, c) = t.dims2("feature_map")?;
        if n != grid_h * grid_w {
            return Err(FeatureError::Shape(format!("{n} tokens for a {grid_h}×{grid_w} grid")));
        }
        let values = t.data().iter().map(|v| v.as_f64() as f32).collect();
        Self::new(grid_h, grid_w, c, values, scale, kind)
    }

    pub fn with_valid(mut self, valid: Vec<bool>) -> Self {
        assert_eq!(valid.len(), self.num_tokens());
        self.valid = valid;
        self
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        self.token(row * self.grid_w + col)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.num_tokens(), self.channels],
            self.values.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("shape invariant")
    }

    /// Center of cell `(row, col)` in full-image pixel coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        cell_center(col, row, self.scale)
    }
}

/// Pixel-space center of a grid cell at `scale` (pixel centers are integers).
pub fn cell_center(col: usize, row: usize, scale: f64) -> (f64, f64) {
    let stride = 1.0 / scale;
    ((col as f64 + 0.5) * stride - 0.5, (row as f64 + 0.5) * stride - 0.5)
}

/// Validity of grid cells: a cell is valid when it covers at least one
/// original (unpadded) pixel.
pub fn cell_validity(img: &Image, grid_h: usize, grid_w: usize, stride: usize) -> Vec<bool> {
    let mut valid = Vec::with_capacity(grid_h * grid_w);
    for r in 0..grid_h {
        for c in 0..grid_w {
            valid.push(r * stride < img.orig_height && c * stride < img.orig_width);
        }
    }
    valid
}
