//! Self-supervised training pairs: random homographies, warping, appearance
//! changes and ground-truth cell correspondences.

mod gt;
mod photometric;
mod sampler;
mod texture;

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{load_image, FeatureError, Image};
use crate::geometry::{GeometryError, Homography};

pub use gt::{gt_cell_pairs, gt_matches, window_cells, Grid, GtSet, PixelMask, WindowGt};
pub use photometric::{photometric_distort, warp_image, Photometric, PhotometricConfig};
pub use sampler::{sample_homography, HomographySamplerConfig};
pub use texture::procedural_texture;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no valid homography after {0} attempts")]
    Sampling(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Independent 64-bit seed for item `index` under `master`.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Side length of generated (or resized) source images.
    pub size: usize,
    pub sampler: HomographySamplerConfig,
    pub photometric: PhotometricConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            sampler: HomographySamplerConfig::default(),
            photometric: PhotometricConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub image0: Image,
    pub image1: Image,
    /// Maps image-0 pixels to image-1 pixels.
    pub h_gt: Homography,
    /// Image-1 pixels whose preimage lies inside image 0.
    pub mask: Vec<bool>,
}

/// Warps `source` by a sampled homography and distorts both views. Geometry
/// and appearance use separate random streams of `seed`.
pub fn make_pair(source: &Image, seed: u64, cfg: &SynthConfig) -> Result<SyntheticPair, SynthError> {
    let h_gt = sample_homography(
        &mut stream_rng(seed, 0),
        &cfg.sampler,
        source.orig_width,
        source.orig_height,
    )?;
    let (warped, mask) = warp_image(source, &h_gt)?;
    let image0 = photometric_distort(&source.unpadded(), &mut stream_rng(seed, 1), &cfg.photometric).padded_to(8);
    let image1 = photometric_distort(&warped, &mut stream_rng(seed, 2), &cfg.photometric).padded_to(8);
    Ok(SyntheticPair {
        image0,
        image1,
        h_gt,
        mask,
    })
}

/// Procedural pair `index` of a synthetic set.
pub fn synthetic_pair(master_seed: u64, index: u64, cfg: &SynthConfig) -> Result<SyntheticPair, SynthError> {
    let seed = stream_seed(master_seed, index);
    let source = procedural_texture(&mut stream_rng(seed, 3), cfg.size, cfg.size);
    make_pair(&source, seed, cfg)
}

/// Training data description.
#[derive(Debug, Clone, PartialEq)]
pub enum Manifest {
    /// `image_path seed` lines.
    Images(Vec<(PathBuf, u64)>),
    /// `synthetic N master_seed`.
    Synthetic { n: usize, master_seed: u64 },
}

impl Manifest {
    /// Parses manifest text; relative image paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, SynthError> {
        let mut images = Vec::new();
        let mut synthetic = None;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SynthError::Manifest { line: k + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["synthetic", n, seed] => {
                    if synthetic.is_some() || !images.is_empty() {
                        return Err(err("a synthetic line must be the only entry".into()));
                    }
                    let n = n.parse().map_err(|_| err(format!("bad count {n:?}")))?;
                    let master_seed = seed.parse().map_err(|_| err(format!("bad seed {seed:?}")))?;
                    synthetic = Some(Manifest::Synthetic { n, master_seed });
                }
                [path, seed] => {
                    if synthetic.is_some() {
                        return Err(err("image lines cannot follow a synthetic line".into()));
                    }
                    let seed = seed.parse().map_err(|_| err(format!("bad seed {seed:?}")))?;
                    images.push((base.join(path), seed));
                }
                _ => return Err(err(format!("expected `path seed` or `synthetic N seed`, got {line:?}"))),
            }
        }
        match synthetic {
            Some(m) => Ok(m),
            None if images.is_empty() => Err(SynthError::Manifest {
                line: 0,
                msg: "manifest is empty".into(),
            }),
            None => Ok(Manifest::Images(images)),
        }
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn len(&self) -> usize {
        match self {
            Manifest::Images(v) => v.len(),
            Manifest::Synthetic { n, .. } => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pair(&self, index: usize, cfg: &SynthConfig) -> Result<SyntheticPair, SynthError> {
        match self {
            Manifest::Synthetic { master_seed, .. } => synthetic_pair(*master_seed, index as u64, cfg),
            Manifest::Images(items) => {
                let (path, seed) = &items[index];
                let img = load_image(path)?;
                let src = if (img.orig_width, img.orig_height) == (cfg.size, cfg.size) {
                    img
                } else {
                    img.resized(cfg.size, cfg.size)
                };
                make_pair(&src, *seed, cfg)
            }
        }
    }
}
