//! The full matcher: parameters, the differentiable encoder and the
//! inference pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    cell_validity, resample_bilinear, Backbone, BackboneConfig, FeatureMap, Image, MapKind, SemanticProvider,
};
use crate::fusion::{Enhancer, FusionMode, Sfb, SfbInputs};
use crate::matching::{
    crop_window, dual_softmax, fine_match_center, fine_match_overlap, mnn_select, similarity_matrix, CoarseMatch,
    ConfidenceMatrix, FineMatch, FineMode, MatchConfig, MatchError,
};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Coarse and fine maps are L2-normalized per token before matching, so
/// `1/τ` bounds the similarity logits.
const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Channels of the semantic maps fed in (toy descriptor: 24).
    pub semantic_dim: usize,
    pub enhancer_depth: usize,
    pub sfb_repeats: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            semantic_dim: 24,
            enhancer_depth: 4,
            sfb_repeats: 1,
            init_seed: 0,
        }
    }
}

/// Pipeline wiring chosen by the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub fusion: FusionMode,
    pub fine: FineMode,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Full,
            fine: FineMode::Overlap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticSource {
    Toy,
    File,
}

/// Parses ablation flags: `no_sfb`, `no_cross` (alias
/// `no_cross_image_fusion`), `no_overlap` (alias `no_overlap_fine`),
/// `toy_semantic`, `file_semantic`.
pub fn configure_ablation<S: AsRef<str>>(flags: &[S]) -> Result<(Variant, SemanticSource)> {
    let mut v = Variant::default();
    let (mut no_sfb, mut no_cross) = (false, false);
    let mut source = None;
    for f in flags {
        match f.as_ref() {
            "no_sfb" => no_sfb = true,
            "no_cross" | "no_cross_image_fusion" => no_cross = true,
            "no_overlap" | "no_overlap_fine" => v.fine = FineMode::CenterOnly,
            s @ ("toy_semantic" | "file_semantic") => {
                let want = if s == "toy_semantic" {
                    SemanticSource::Toy
                } else {
                    SemanticSource::File
                };
                if source.is_some_and(|have| have != want) {
                    return Err(Error::Config("toy_semantic and file_semantic are exclusive".into()));
                }
                source = Some(want);
            }
            other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
        }
    }
    if no_sfb && no_cross {
        return Err(Error::Config(
            "no_cross disables part of the fusion block that no_sfb already removes".into(),
        ));
    }
    v.fusion = match (no_sfb, no_cross) {
        (true, _) => FusionMode::Off,
        (_, true) => FusionMode::SameImageOnly,
        _ => FusionMode::Full,
    };
    Ok((v, source.unwrap_or(SemanticSource::Toy)))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    semantic_proj: Linear,
    enhancer: Enhancer,
    sfb: Sfb,
}

/// Tape handles of one encoded pair. All maps are `tokens × channels`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub coarse0: Var,
    pub coarse1: Var,
    pub fine0: Var,
    pub fine1: Var,
    pub coarse_hw0: (usize, usize),
    pub coarse_hw1: (usize, usize),
    pub fine_hw0: (usize, usize),
    pub fine_hw1: (usize, usize),
}

impl Model {
    pub fn new(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let dc = config.backbone.coarse_dim;
        let backbone = Backbone::new(&mut store, config.backbone, &mut rng);
        let semantic_proj = Linear::new(&mut store, "semantic_proj", config.semantic_dim, dc, true, &mut rng);
        let enhancer = Enhancer::new(&mut store, dc, config.enhancer_depth, &mut rng);
        let sfb = Sfb::new(&mut store, dc, config.sfb_repeats, &mut rng);
        Self {
            config,
            store,
            backbone,
            semantic_proj,
            enhancer,
            sfb,
        }
    }

    fn semantic_var<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, s: &FeatureMap, hw: (usize, usize)) -> Result<Var> {
        if (s.grid_h, s.grid_w) != hw || s.channels != self.config.semantic_dim {
            return Err(Error::Config(format!(
                "semantic map {}×{}×{} does not fit coarse grid {}×{} with {} channels",
                s.grid_h, s.grid_w, s.channels, hw.0, hw.1, self.config.semantic_dim
            )));
        }
        let raw = tape.constant(s.to_tensor::<T>());
        Ok(self.semantic_proj.forward(tape, p, raw)?)
    }

    /// Differentiable forward from images and semantic maps to normalized
    /// coarse (fused) and fine maps.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        img0: &Image,
        img1: &Image,
        sem0: &FeatureMap,
        sem1: &FeatureMap,
        fusion: FusionMode,
    ) -> Result<Encoded> {
        let pyr0 = self.backbone.forward(tape, p, img0)?;
        let pyr1 = self.backbone.forward(tape, p, img1)?;
        let (c0, c1) = self
            .enhancer
            .forward(tape, p, pyr0.coarse, pyr1.coarse, pyr0.coarse_hw, pyr1.coarse_hw)?;
        let (c0, c1) = if fusion == FusionMode::Off {
            (c0, c1)
        } else {
            let s0 = self.semantic_var(tape, p, sem0, pyr0.coarse_hw)?;
            let s1 = self.semantic_var(tape, p, sem1, pyr1.coarse_hw)?;
            let mut x = SfbInputs::same_grid(s0, s1, c0, c1);
            if pyr0.coarse_hw != pyr1.coarse_hw && fusion == FusionMode::Full {
                let (h0, w0) = pyr0.coarse_hw;
                let (h1, w1) = pyr1.coarse_hw;
                x.s1_on0 = self.semantic_var(tape, p, &resample_bilinear(sem1, h0, w0)?, pyr0.coarse_hw)?;
                x.s0_on1 = self.semantic_var(tape, p, &resample_bilinear(sem0, h1, w1)?, pyr1.coarse_hw)?;
            }
            self.sfb.forward(tape, p, fusion, &x)?
        };
        let eps = T::lit(NORM_EPS);
        Ok(Encoded {
            coarse0: tape.l2_normalize(c0, eps)?,
            coarse1: tape.l2_normalize(c1, eps)?,
            fine0: tape.l2_normalize(pyr0.fine, eps)?,
            fine1: tape.l2_normalize(pyr1.fine, eps)?,
            coarse_hw0: pyr0.coarse_hw,
            coarse_hw1: pyr1.coarse_hw,
            fine_hw0: pyr0.fine_hw,
            fine_hw1: pyr1.fine_hw,
        })
    }

    /// Backbone outputs only, as feature maps.
    pub fn extract_pyramid(&self, img: &Image) -> Result<(FeatureMap, FeatureMap)> {
        let mut tape = Tape::<f32>::new();
        let p = self.store.bind(&mut tape, false);
        let pyr = self.backbone.forward(&mut tape, &p, img)?;
        let (ch, cw) = pyr.coarse_hw;
        let (fh, fw) = pyr.fine_hw;
        let coarse = FeatureMap::from_tensor(tape.value(pyr.coarse), ch, cw, 0.125, MapKind::Coarse)?
            .with_valid(cell_validity(img, ch, cw, 8));
        let fine = FeatureMap::from_tensor(tape.value(pyr.fine), fh, fw, 0.5, MapKind::Fine)?
            .with_valid(cell_validity(img, fh, fw, 2));
        Ok((coarse, fine))
    }

    /// Copies parameter values from `tensors` after validating every shape.
    pub fn load_parameters(&mut self, tensors: Vec<Tensor<f32>>) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                self.store.len()
            )));
        }
        for ((name, have), new) in self.store.names().iter().zip(self.store.tensors()).zip(&tensors) {
            if have.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    new.shape(),
                    have.shape()
                )));
            }
        }
        for (dst, src) in self.store.tensors_mut().iter_mut().zip(tensors) {
            *dst = src;
        }
        Ok(())
    }
}

/// Everything the pipeline produced for one pair.
#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub coarse: Vec<CoarseMatch>,
    pub fine: Vec<FineMatch>,
    pub p_coarse: Option<ConfidenceMatrix>,
    /// One matrix per coarse match, in coarse order.
    pub p_fine: Vec<ConfidenceMatrix>,
    pub coarse0: FeatureMap,
    pub coarse1: FeatureMap,
}

/// A model bound to a semantic source and a pipeline variant.
#[derive(Debug, Clone)]
pub struct Matcher {
    pub model: Model,
    pub provider: SemanticProvider,
    pub variant: Variant,
    pub config: MatchConfig,
}

impl Matcher {
    pub fn new(model: Model, provider: SemanticProvider, variant: Variant, config: MatchConfig) -> Result<Self> {
        if provider.dim() != model.config.semantic_dim {
            return Err(Error::Config(format!(
                "semantic provider yields {} channels, model expects {}",
                provider.dim(),
                model.config.semantic_dim
            )));
        }
        Ok(Self {
            model,
            provider,
            variant,
            config,
        })
    }

    /// Semantic maps → enhancement → fusion → coarse matches → windows →
    /// fine matches. Images must be padded to multiples of 8.
    pub fn match_pair(&self, img0: &Image, id0: &str, img1: &Image, id1: &str) -> Result<MatchOutput> {
        let sem0 = self.provider.semantic(img0, id0)?;
        let sem1 = self.provider.semantic(img1, id1)?;
        let mut tape = Tape::<f32>::new();
        let p = self.model.store.bind(&mut tape, false);
        let enc = self
            .model
            .encode(&mut tape, &p, img0, img1, &sem0, &sem1, self.variant.fusion)?;
        let map = |v: Var, hw: (usize, usize), scale: f64, kind, img: &Image, stride| -> Result<FeatureMap> {
            Ok(FeatureMap::from_tensor(tape.value(v), hw.0, hw.1, scale, kind)?
                .with_valid(cell_validity(img, hw.0, hw.1, stride)))
        };
        let coarse0 = map(enc.coarse0, enc.coarse_hw0, 0.125, MapKind::Fused, img0, 8)?;
        let coarse1 = map(enc.coarse1, enc.coarse_hw1, 0.125, MapKind::Fused, img1, 8)?;
        let fine0 = map(enc.fine0, enc.fine_hw0, 0.5, MapKind::Fine, img0, 2)?;
        let fine1 = map(enc.fine1, enc.fine_hw1, 0.5, MapKind::Fine, img1, 2)?;

        let scores = similarity_matrix(&coarse0, &coarse1, self.config.temperature)?;
        let p_coarse = match dual_softmax(&scores) {
            Ok(p) => p,
            Err(MatchError::AllMasked) => {
                return Ok(MatchOutput {
                    coarse: Vec::new(),
                    fine: Vec::new(),
                    p_coarse: None,
                    p_fine: Vec::new(),
                    coarse0,
                    coarse1,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let coarse = mnn_select(&p_coarse, self.config.coarse_threshold);
        let (w0c, w1c) = (coarse0.grid_w, coarse1.grid_w);
        let cfg = self.config;
        let fine_mode = self.variant.fine;
        let per_window: Vec<(Vec<FineMatch>, ConfidenceMatrix)> = coarse
            .par_iter()
            .map(|m| -> Result<_> {
                let wa = crop_window(&fine0, m.i / w0c, m.i % w0c, cfg.window)?;
                let wb = crop_window(&fine1, m.j / w1c, m.j % w1c, cfg.window)?;
                Ok(match fine_mode {
                    FineMode::Overlap => fine_match_overlap(&wa, &wb, cfg.fine_temperature, cfg.fine_threshold)?,
                    FineMode::CenterOnly => {
                        let (f, p) = fine_match_center(&wa, &wb, cfg.fine_temperature)?;
                        (f.into_iter().collect(), p)
                    }
                })
            })
            .collect::<Result<_>>()?;
        let mut fine = Vec::new();
        let mut p_fine = Vec::with_capacity(per_window.len());
        for (f, p) in per_window {
            fine.extend(f);
            p_fine.push(p);
        }
        Ok(MatchOutput {
            coarse,
            fine,
            p_coarse: Some(p_coarse),
            p_fine,
            coarse0,
            coarse1,
        })
    }
}
