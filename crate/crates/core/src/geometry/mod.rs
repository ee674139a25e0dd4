//! Projective geometry: homographies, DLT, RANSAC and corner-error metrics.
//!
//! Pixel coordinates follow the convention where the center of pixel
//! `(x, y)` sits at integer coordinates `(x, y)`.

mod dlt;
mod homography;
mod metrics;
mod ransac;

use thiserror::Error;

pub use dlt::{fit_dlt, is_degenerate_sample};
pub use homography::{Correspondence, Homography, Point2};
pub use metrics::{auc, corner_error, corner_error_opt, image_corners};
pub use ransac::{ransac_homography, symmetric_transfer_error, RansacConfig, RansacResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point maps to infinity (homogeneous depth {0:e})")]
    DegeneratePoint(f64),
    #[error("homography is singular (det {0:e})")]
    Singular(f64),
    #[error("insufficient data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    RankDeficient(String),
    #[error("estimation failed: {0}")]
    EstimationFailure(String),
    #[error("metric undefined for an empty error list")]
    EmptyErrors,
    #[error("cannot parse homography: {0}")]
    Parse(String),
}
