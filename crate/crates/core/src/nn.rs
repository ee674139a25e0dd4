//! Parameter storage and the small set of layers the model is built from.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Puts every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    let v = t.cast::<T>();
                    if trainable {
                        tape.leaf(v)
                    } else {
                        tape.constant(v)
                    }
                })
                .collect(),
        )
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.uniform(format!("{name}.weight"), &[cin, cout], cin, rng);
        let bias = bias.then(|| store.uniform(format!("{name}.bias"), &[cout], cin, rng));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

/// Per-token layer normalization with learned gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.constant(format!("{name}.gain"), &[dim], 1.0),
            offset: store.constant(format!("{name}.offset"), &[dim], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = tape.layer_norm(x, T::lit(1e-5))?;
        let y = tape.mul_row(y, p[self.gain])?;
        tape.add_row(y, p[self.offset])
    }
}

/// Square-kernel 2-D convolution over token-major maps (`H·W × C`), lowered
/// to an im2col gather followed by a matrix product.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let weight = store.uniform(format!("{name}.weight"), &[fan_in, cout], fan_in, rng);
        let bias = store.uniform(format!("{name}.bias"), &[cout], fan_in, rng);
        Self {
            weight,
            bias,
            kernel,
            stride,
            pad,
            cin,
            cout,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// im2col gather indices: row `(oy, ox)`, column `(ky, kx, c)`.
    pub fn im2col_index(&self, h: usize, w: usize) -> (Vec<Option<usize>>, usize, usize) {
        let (ho, wo) = self.output_dims(h, w);
        let k = self.kernel;
        let mut idx = Vec::with_capacity(ho * wo * k * k * self.cin);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for c in 0..self.cin {
                            idx.push(inside.then(|| (iy as usize * w + ix as usize) * self.cin + c));
                        }
                    }
                }
            }
        }
        (idx, ho, wo)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<(Var, usize, usize), TensorError> {
        let expected = [h * w, self.cin];
        if tape.shape(x) != expected {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tape.shape(x).to_vec(),
                rhs: expected.to_vec(),
            });
        }
        let (idx, ho, wo) = self.im2col_index(h, w);
        let cols = tape.gather(x, idx, vec![ho * wo, self.kernel * self.kernel * self.cin])?;
        let y = tape.linear(cols, p[self.weight], Some(p[self.bias]))?;
        Ok((y, ho, wo))
    }
}
