use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_dim: usize,
    pub mid_dim: usize,
    pub coarse_dim: usize,
    pub fine_dim: usize,
    pub fine_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_dim: 16,
            mid_dim: 32,
            coarse_dim: 64,
            fine_dim: 32,
            fine_kernel: 5,
        }
    }
}

/// Three stride-2 3×3 stages down to 1/8, plus a single stride-2 branch for
/// the 1/2 map.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stage1: Conv2d,
    stage2: Conv2d,
    stage3: Conv2d,
    fine: Conv2d,
}

/// Tape handles for one image's pyramid, both `tokens × channels`.
#[derive(Debug, Clone, Copy)]
pub struct PyramidVars {
    pub coarse: Var,
    pub coarse_hw: (usize, usize),
    pub fine: Var,
    pub fine_hw: (usize, usize),
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let fk = config.fine_kernel;
        Self {
            config,
            stage1: Conv2d::new(store, "backbone.stage1", 1, config.stem_dim, 3, 2, 1, rng),
            stage2: Conv2d::new(store, "backbone.stage2", config.stem_dim, config.mid_dim, 3, 2, 1, rng),
            stage3: Conv2d::new(
                store,
                "backbone.stage3",
                config.mid_dim,
                config.coarse_dim,
                3,
                2,
                1,
                rng,
            ),
            fine: Conv2d::new(store, "backbone.fine", 1, config.fine_dim, fk, 2, fk / 2, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, img: &Image) -> Result<PyramidVars, TensorError> {
        if !img.width.is_multiple_of(8) || !img.height.is_multiple_of(8) {
            return Err(TensorError::Contract(format!(
                "image {}×{} is not padded to a multiple of 8",
                img.width, img.height
            )));
        }
        let (h, w) = (img.height, img.width);
        let x = tape.constant(Tensor::new(
            vec![h * w, 1],
            img.pixels.iter().map(|&v| T::lit(v as f64)).collect(),
        )?);
        let (a, h1, w1) = self.stage1.forward(tape, p, x, h, w)?;
        let a = tape.relu(a)?;
        let (b, h2, w2) = self.stage2.forward(tape, p, a, h1, w1)?;
        let b = tape.relu(b)?;
        let (coarse, h3, w3) = self.stage3.forward(tape, p, b, h2, w2)?;
        let (fine, hf, wf) = self.fine.forward(tape, p, x, h, w)?;
        Ok(PyramidVars {
            coarse,
            coarse_hw: (h3, w3),
            fine,
            fine_hw: (hf, wf),
        })
    }
}
