//! Coarse-feature enhancement and semantic-guided fusion.
//!
//! The enhancer interleaves self- and cross-attention layers (linear
//! attention) over flattened coarse tokens. An [`Sgib`] lets semantic
//! tokens query image tokens; an [`Sfb`] chains a same-image stage and
//! cross-image stages of it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Bound, LayerNorm, Linear, ParamStore};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// 2-D sinusoidal position encoding, `h·w × dim`, channels in groups of four
/// (sin x, cos x, sin y, cos y).
pub fn positional_encoding<T: Real>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let half = (dim / 2).max(1) as f64;
    let mut data = vec![T::zero(); h * w * dim];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = ((c + 1) as f64, (r + 1) as f64);
            let row = &mut data[(r * w + c) * dim..(r * w + c + 1) * dim];
            for (k, v) in row.iter_mut().enumerate() {
                let div = (-((2 * (k / 4)) as f64) * 10000f64.ln() / half).exp();
                *v = T::lit(match k % 4 {
                    0 => (x * div).sin(),
                    1 => (x * div).cos(),
                    2 => (y * div).sin(),
                    _ => (y * div).cos(),
                });
            }
        }
    }
    Tensor::new(vec![h * w, dim], data).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Linear,
    Softmax,
}

fn attend<T: Real>(tape: &mut Tape<T>, kind: AttentionKind, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
    match kind {
        AttentionKind::Linear => tape.linear_attention(q, k, v),
        AttentionKind::Softmax => tape.scaled_dot_attention(q, k, v),
    }
}

/// One transformer layer: attention message, merge, norm, a two-layer MLP
/// over `[x, message]`, norm, residual.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    merge: Linear,
    mlp1: Linear,
    mlp2: Linear,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            merge: Linear::new(store, &format!("{name}.merge"), dim, dim, false, rng),
            mlp1: Linear::new(store, &format!("{name}.mlp1"), 2 * dim, 2 * dim, false, rng),
            mlp2: Linear::new(store, &format!("{name}.mlp2"), 2 * dim, dim, false, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, source: Var) -> Result<Var, TensorError> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, source)?;
        let v = self.v.forward(tape, p, source)?;
        let msg = attend(tape, AttentionKind::Linear, q, k, v)?;
        let msg = self.merge.forward(tape, p, msg)?;
        let msg = self.norm1.forward(tape, p, msg)?;
        let cat = tape.concat_channels(x, msg)?;
        let hidden = self.mlp1.forward(tape, p, cat)?;
        let hidden = tape.relu(hidden)?;
        let msg = self.mlp2.forward(tape, p, hidden)?;
        let msg = self.norm2.forward(tape, p, msg)?;
        tape.add(x, msg)
    }
}

/// Alternating self/cross layers shared by both images.
#[derive(Debug, Clone)]
pub struct Enhancer {
    dim: usize,
    /// `(is_cross, layer)`.
    layers: Vec<(bool, EncoderLayer)>,
}

impl Enhancer {
    /// `depth` layers, starting with self-attention.
    pub fn new(store: &mut ParamStore, dim: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let cross = i % 2 == 1;
                let name = format!("enhancer.{i}.{}", if cross { "cross" } else { "self" });
                (cross, EncoderLayer::new(store, &name, dim, rng))
            })
            .collect();
        Self { dim, layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Position encoding is added once before the first layer; with zero
    /// layers the maps pass through untouched.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        c0: Var,
        c1: Var,
        hw0: (usize, usize),
        hw1: (usize, usize),
    ) -> Result<(Var, Var), TensorError> {
        let (s0, s1) = (tape.shape(c0).to_vec(), tape.shape(c1).to_vec());
        if s0.len() != 2 || s1.len() != 2 || s0[1] != self.dim || s1[1] != self.dim {
            return Err(TensorError::ShapeMismatch {
                op: "enhance",
                lhs: s0,
                rhs: s1,
            });
        }
        if self.layers.is_empty() {
            return Ok((c0, c1));
        }
        let pe0 = tape.constant(positional_encoding(hw0.0, hw0.1, self.dim));
        let pe1 = tape.constant(positional_encoding(hw1.0, hw1.1, self.dim));
        let mut x0 = tape.add(c0, pe0)?;
        let mut x1 = tape.add(c1, pe1)?;
        for (cross, layer) in &self.layers {
            let (src0, src1) = if *cross { (x1, x0) } else { (x0, x1) };
            let y0 = layer.forward(tape, p, x0, src0)?;
            let y1 = layer.forward(tape, p, x1, src1)?;
            (x0, x1) = (y0, y1);
        }
        Ok((x0, x1))
    }
}

/// Semantic-guided interaction: semantic tokens pass a residual softmax
/// self-attention, then query the image tokens; the attended values are
/// concatenated onto the image tokens and projected back to `dim`.
#[derive(Debug, Clone)]
pub struct Sgib {
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_out: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
}

impl Sgib {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), 2 * dim, dim, true, rng);
        // Start the projection near "keep the image tokens": identity on the
        // image half, the usual random init on the attended half.
        let w = store.get_mut(proj.weight);
        for i in 0..dim {
            w.data_mut()[i * dim + i] += 1.0;
        }
        Self {
            sa_q: Linear::new(store, &format!("{name}.sa_q"), dim, dim, false, rng),
            sa_k: Linear::new(store, &format!("{name}.sa_k"), dim, dim, false, rng),
            sa_v: Linear::new(store, &format!("{name}.sa_v"), dim, dim, false, rng),
            sa_out: Linear::new(store, &format!("{name}.sa_out"), dim, dim, false, rng),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            proj,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, s: Var, c: Var) -> Result<Var, TensorError> {
        if tape.shape(s) != tape.shape(c) {
            return Err(TensorError::ShapeMismatch {
                op: "sgib",
                lhs: tape.shape(s).to_vec(),
                rhs: tape.shape(c).to_vec(),
            });
        }
        let q = self.sa_q.forward(tape, p, s)?;
        let k = self.sa_k.forward(tape, p, s)?;
        let v = self.sa_v.forward(tape, p, s)?;
        let a = attend(tape, AttentionKind::Softmax, q, k, v)?;
        let a = self.sa_out.forward(tape, p, a)?;
        let s = tape.add(s, a)?;

        let q = self.q.forward(tape, p, s)?;
        let k = self.k.forward(tape, p, c)?;
        let v = self.v.forward(tape, p, c)?;
        let a = attend(tape, AttentionKind::Softmax, q, k, v)?;
        let cat = tape.concat_channels(c, a)?;
        self.proj.forward(tape, p, cat)
    }
}

/// Which stages of the fusion block run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Matching consumes the enhanced maps directly.
    Off,
    SameImageOnly,
    Full,
}

/// Two-stage fusion: each image with its own semantics, then with the other
/// image's semantics (`repeats` times). Weights are shared by both images.
#[derive(Debug, Clone)]
pub struct Sfb {
    stage1: Sgib,
    stage2: Vec<Sgib>,
}

impl Sfb {
    pub fn new(store: &mut ParamStore, dim: usize, repeats: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            stage1: Sgib::new(store, "sfb.stage1", dim, rng),
            stage2: (0..repeats)
                .map(|i| Sgib::new(store, &format!("sfb.stage2.{i}"), dim, rng))
                .collect(),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        mode: FusionMode,
        x: &SfbInputs,
    ) -> Result<(Var, Var), TensorError> {
        if mode == FusionMode::Off {
            return Ok((x.c0, x.c1));
        }
        let mut f0 = self.stage1.forward(tape, p, x.s0, x.c0)?;
        let mut f1 = self.stage1.forward(tape, p, x.s1, x.c1)?;
        if mode == FusionMode::Full {
            for stage in &self.stage2 {
                let g0 = stage.forward(tape, p, x.s1_on0, f0)?;
                let g1 = stage.forward(tape, p, x.s0_on1, f1)?;
                (f0, f1) = (g0, g1);
            }
        }
        Ok((f0, f1))
    }
}

/// Inputs of [`Sfb::forward`]. Cross-image stages need each image's
/// semantics on the other image's grid; for equal grids `s1_on0 = s1` and
/// `s0_on1 = s0`.
#[derive(Debug, Clone, Copy)]
pub struct SfbInputs {
    pub s0: Var,
    pub s1: Var,
    pub s1_on0: Var,
    pub s0_on1: Var,
    pub c0: Var,
    pub c1: Var,
}

impl SfbInputs {
    pub fn same_grid(s0: Var, s1: Var, c0: Var, c1: Var) -> Self {
        Self {
            s0,
            s1,
            s1_on0: s1,
            s0_on1: s0,
            c0,
            c1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_layer_enhancer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enh = Enhancer::new(&mut store, 8, 0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let p = store.bind(&mut tape, false);
        let a = tape.constant(rand_tensor(&mut rng, &[6, 8]));
        let b = tape.constant(rand_tensor(&mut rng, &[6, 8]));
        assert_eq!(enh.forward(&mut tape, &p, a, b, (2, 3), (2, 3)).unwrap(), (a, b));
    }

    #[test]
    fn enhancer_shapes_and_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enh = Enhancer::new(&mut store, 8, 4, &mut rng);
        let (ta, tb) = (rand_tensor(&mut rng, &[6, 8]), rand_tensor(&mut rng, &[6, 8]));
        let mut tape = Tape::<f64>::new();
        let p = store.bind(&mut tape, false);
        let a = tape.constant(ta);
        let b = tape.constant(tb);
        let (ya, yb) = enh.forward(&mut tape, &p, a, b, (2, 3), (2, 3)).unwrap();
        let (za, zb) = enh.forward(&mut tape, &p, b, a, (2, 3), (2, 3)).unwrap();
        assert_eq!(tape.shape(ya), &[6, 8]);
        assert_eq!(tape.value(ya), tape.value(zb));
        assert_eq!(tape.value(yb), tape.value(za));
        let bad = tape.constant(Tensor::zeros(&[6, 7]));
        assert!(enh.forward(&mut tape, &p, a, bad, (2, 3), (2, 3)).is_err());
    }

    #[test]
    fn sgib_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let sgib = Sgib::new(&mut store, "g", 4, &mut rng);
        let (ts, tc) = (rand_tensor(&mut rng, &[1, 4]), rand_tensor(&mut rng, &[1, 4]));
        let mut tape = Tape::<f64>::new();
        let p = store.bind(&mut tape, false);
        let s = tape.constant(ts);
        let c = tape.constant(tc.clone());
        let out = sgib.forward(&mut tape, &p, s, c).unwrap();
        // One key: the attention weight is 1, so the message is V(c).
        let vc = sgib.v.forward(&mut tape, &p, c).unwrap();
        let cat = tape.concat_channels(c, vc).unwrap();
        let want = sgib.proj.forward(&mut tape, &p, cat).unwrap();
        let diff = tape.value(out).max_abs_diff(tape.value(want)).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn sgib_key_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let sgib = Sgib::new(&mut store, "g", 4, &mut rng);
        let n = 5;
        let (ts, tc) = (rand_tensor(&mut rng, &[n, 4]), rand_tensor(&mut rng, &[n, 4]));
        let mut tape = Tape::<f64>::new();
        let p = store.bind(&mut tape, false);
        let s = tape.constant(ts);
        let c = tape.constant(tc.clone());
        // Cross-attention of the query side against permuted keys/values.
        let q = sgib.q.forward(&mut tape, &p, s).unwrap();
        let k = sgib.k.forward(&mut tape, &p, c).unwrap();
        let v = sgib.v.forward(&mut tape, &p, c).unwrap();
        let a = tape.scaled_dot_attention(q, k, v).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let idx: Vec<Option<usize>> = perm
            .iter()
            .flat_map(|&r| (0..4).map(move |j| Some(r * 4 + j)))
            .collect();
        let cp = tape.gather(c, idx, vec![n, 4]).unwrap();
        let kp = sgib.k.forward(&mut tape, &p, cp).unwrap();
        let vp = sgib.v.forward(&mut tape, &p, cp).unwrap();
        let ap = tape.scaled_dot_attention(q, kp, vp).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(ap)).unwrap() < 1e-12);
    }

    #[test]
    fn sfb_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let sfb = Sfb::new(&mut store, 4, 1, &mut rng);
        let ts: Vec<_> = (0..4).map(|_| rand_tensor(&mut rng, &[3, 4])).collect();
        let mut tape = Tape::<f64>::new();
        let p = store.bind(&mut tape, false);
        let v: Vec<Var> = ts.into_iter().map(|t| tape.constant(t)).collect();
        let (s0, s1, c0, c1) = (v[0], v[1], v[2], v[3]);
        let x = SfbInputs::same_grid(s0, s1, c0, c1);
        assert_eq!(sfb.forward(&mut tape, &p, FusionMode::Off, &x).unwrap(), (c0, c1));
        let (a0, a1) = sfb.forward(&mut tape, &p, FusionMode::SameImageOnly, &x).unwrap();
        let want0 = sfb.stage1.forward(&mut tape, &p, s0, c0).unwrap();
        assert_eq!(tape.value(a0), tape.value(want0));
        let (f0, f1) = sfb.forward(&mut tape, &p, FusionMode::Full, &x).unwrap();
        let want1 = sfb.stage2[0].forward(&mut tape, &p, s0, a1).unwrap();
        assert_eq!(tape.value(f1), tape.value(want1));
        assert_eq!(tape.shape(f0), tape.shape(c0));
    }

    #[test]
    fn position_encoding_layout() {
        let pe = positional_encoding::<f64>(2, 3, 8);
        assert_eq!(pe.shape(), &[6, 8]);
        // Token (row 1, col 2): x = 3, y = 2, first frequency is 1.
        assert!((pe.at2(5, 0) - 3f64.sin()).abs() < 1e-15);
        assert!((pe.at2(5, 3) - 2f64.cos()).abs() < 1e-15);
    }
}
