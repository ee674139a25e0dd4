use super::{Real, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivCol(Var, Var),
    Scale(Var, T),
    Softmax { x: Var, axis: usize },
    Concat(Var, Var),
    Relu(Var),
    Elu(Var),
    Log(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Gather { x: Var, index: Vec<Option<usize>> },
    LayerNorm { x: Var, eps: T },
    L2Normalize { x: Var, eps: T },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of primitive ops. Node ids are assigned in creation
/// order, so every op's inputs precede it.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn matmul_raw<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `(outer, axis_len, inner)` decomposition for reductions along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn row_len(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.nodes[v.0].value.dims2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), m, k, self.value(b).data(), n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "transpose")?;
        let data = transpose_raw(self.value(a).data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, TensorError> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn check_row_vector(&self, a: Var, b: Var, op: &'static str) -> Result<usize, TensorError> {
        let cols = row_len(self.shape(a));
        if self.value(b).len() != cols || self.value(a).rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(cols)
    }

    /// Adds a length-C vector to every row of an `N×C` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let cols = self.check_row_vector(a, bias, "add_row")?;
        let b = self.value(bias).data();
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, &x)| x + b[i % cols]).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(a, bias), &[a, bias])
    }

    /// Multiplies every row of an `N×C` tensor elementwise by a length-C vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var, TensorError> {
        let cols = self.check_row_vector(a, gain, "mul_row")?;
        let g = self.value(gain).data();
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, &x)| x * g[i % cols]).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul_row", value, Op::MulRow(a, gain), &[a, gain])
    }

    /// Divides row `i` of an `N×C` tensor by `d[i]`.
    pub fn div_col(&mut self, a: Var, d: Var) -> Result<Var, TensorError> {
        let (n, c) = self.dims2(a, "div_col")?;
        if self.value(d).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "div_col",
                lhs: vec![n, c],
                rhs: self.shape(d).to_vec(),
            });
        }
        let dv = self.value(d).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x / dv[i / c.max(1)])
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        self.push("div_col", value, Op::DivCol(a, d), &[a, d])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: vx.rank(),
            });
        }
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(src[base + a * inner]);
                }
                let mut z = T::zero();
                for a in 0..len {
                    let e = (src[base + a * inner] - mx).exp();
                    out[base + a * inner] = e;
                    z = z + e;
                }
                for a in 0..len {
                    out[base + a * inner] = out[base + a * inner] / z;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Concatenates two `N×C1`, `N×C2` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, c1) = self.dims2(a, "concat_channels")?;
        let (n2, c2) = self.dims2(b, "concat_channels")?;
        if n != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: vec![n, c1],
                rhs: vec![n2, c2],
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (c1 + c2));
        for r in 0..n {
            data.extend_from_slice(&da[r * c1..(r + 1) * c1]);
            data.extend_from_slice(&db[r * c2..(r + 1) * c2]);
        }
        let value = Tensor::new(vec![n, c1 + c2], data)?;
        self.push("concat_channels", value, Op::Concat(a, b), &[a, b])
    }

    fn map(&mut self, x: Var, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(name, value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map(x, "relu", Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map(x, "elu", Op::Elu(x), |v| if v > T::zero() { v } else { v.exp_m1() })
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map(x, "log", Op::Log(x), |v| v.ln())
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var, TensorError> {
        self.map(x, "clamp", Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(vx.sum() / T::lit(vx.len() as f64));
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Column sums of an `N×C` tensor, shape `1×C`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (n, c) = self.dims2(x, "sum_rows")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                *o = *o + v;
            }
        }
        let value = Tensor::new(vec![1, c], out)?;
        self.push("sum_rows", value, Op::SumRows(x), &[x])
    }

    /// `out[k] = x.flat[index[k]]`, or zero where `index[k]` is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: Vec<usize>) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if n != index.len() {
            return Err(TensorError::DataLength {
                len: index.len(),
                shape,
            });
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= src.len()) {
            return Err(TensorError::Contract(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|i| i.map_or(T::zero(), |i| src[i])).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let c = row_len(vx.shape());
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        let inv_c = T::one() / T::lit(c as f64);
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let inv_sigma = T::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mu) * inv_sigma;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, eps }, &[x])
    }

    /// Scales each row to unit Euclidean norm: `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let c = row_len(vx.shape());
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let inv = T::one() / (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, eps }, &[x])
    }

    /// `x · weight + bias` for `x: N×Cin`, `weight: Cin×Cout`, `bias: Cout`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// `softmax(q·kᵀ/√C)·v` over rows.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let (_, cq) = self.dims2(q, "scaled_dot_attention")?;
        let (nk, ck) = self.dims2(k, "scaled_dot_attention")?;
        let (nv, _) = self.dims2(v, "scaled_dot_attention")?;
        if cq != ck || nk != nv {
            return Err(TensorError::ShapeMismatch {
                op: "scaled_dot_attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let kt = self.transpose(k)?;
        let logits = self.matmul(q, kt)?;
        let logits = self.scale(logits, T::one() / T::lit(cq as f64).sqrt())?;
        let weights = self.softmax(logits, 1)?;
        self.matmul(weights, v)
    }

    /// Linear attention with the `elu(x)+1` feature map.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let (_, cq) = self.dims2(q, "linear_attention")?;
        let (nk, ck) = self.dims2(k, "linear_attention")?;
        let (nv, _) = self.dims2(v, "linear_attention")?;
        if cq != ck || nk != nv {
            return Err(TensorError::ShapeMismatch {
                op: "linear_attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let one_q = self.constant(Tensor::full(&[cq], T::one()));
        let fq = self.elu(q)?;
        let fq = self.add_row(fq, one_q)?;
        let fk = self.elu(k)?;
        let fk = self.add_row(fk, one_q)?;
        let fkt = self.transpose(fk)?;
        let kv = self.matmul(fkt, v)?;
        let num = self.matmul(fq, kv)?;
        let ksum = self.sum_rows(fk)?;
        let ksum_t = self.transpose(ksum)?;
        let z = self.matmul(fq, ksum_t)?;
        self.div_col(num, z)
    }

    /// Reverse pass from a scalar `loss`. Every node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves keep gradients; intermediates are dropped.
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = &node.value;
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                        *e = *e + d;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor {
                        shape: self.nodes[v.0].value.shape().to_vec(),
                        data: delta,
                    });
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(vb.data(), k, n);
                    acc(*a, matmul_raw(gd, m, n, &bt, k));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(va.data(), m, k);
                    acc(*b, matmul_raw(&at, k, m, gd, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                acc(*a, transpose_raw(gd, r, c));
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                acc(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::AddRow(a, bias) => {
                let c = row_len(out.shape());
                acc(*a, gd.to_vec());
                let mut gb = vec![T::zero(); c];
                for (i, &v) in gd.iter().enumerate() {
                    gb[i % c] = gb[i % c] + v;
                }
                acc(*bias, gb);
            }
            Op::MulRow(a, gain) => {
                let c = row_len(out.shape());
                let (va, vg) = (self.value(*a).data(), self.value(*gain).data());
                acc(*a, gd.iter().enumerate().map(|(i, &v)| v * vg[i % c]).collect());
                let mut gg = vec![T::zero(); c];
                for (i, &v) in gd.iter().enumerate() {
                    gg[i % c] = gg[i % c] + v * va[i];
                }
                acc(*gain, gg);
            }
            Op::DivCol(a, d) => {
                let c = out.shape()[1].max(1);
                let dv = self.value(*d).data();
                acc(*a, gd.iter().enumerate().map(|(i, &v)| v / dv[i / c]).collect());
                let mut gdv = vec![T::zero(); dv.len()];
                for (i, &v) in gd.iter().enumerate() {
                    // d(a/d)/dd = -(a/d)/d = -out/d
                    gdv[i / c] = gdv[i / c] - v * out.data()[i] / dv[i / c];
                }
                acc(*d, gdv);
            }
            Op::Scale(a, s) => acc(*a, gd.iter().map(|&v| v * *s).collect()),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len).map(|a| gd[base + a * inner] * y[base + a * inner]).sum();
                        for a in 0..len {
                            let p = base + a * inner;
                            gx[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(a, b) => {
                let c1 = self.value(*a).shape()[1];
                let c2 = self.value(*b).shape()[1];
                let n = out.shape()[0];
                let mut ga = Vec::with_capacity(n * c1);
                let mut gb = Vec::with_capacity(n * c2);
                for r in 0..n {
                    let row = &gd[r * (c1 + c2)..(r + 1) * (c1 + c2)];
                    ga.extend_from_slice(&row[..c1]);
                    gb.extend_from_slice(&row[c1..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                acc(
                    *x,
                    gd.iter()
                        .zip(vx)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Elu(x) => {
                let vx = self.value(*x).data();
                acc(
                    *x,
                    gd.iter()
                        .zip(vx)
                        .map(|(&g, &v)| if v > T::zero() { g } else { g * v.exp() })
                        .collect(),
                );
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                acc(*x, gd.iter().zip(vx).map(|(&g, &v)| g / v).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                acc(
                    *x,
                    gd.iter()
                        .zip(vx)
                        .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gd[0] / T::lit(n as f64); n]);
            }
            Op::SumRows(x) => {
                let (n, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let mut gx = Vec::with_capacity(n * c);
                for _ in 0..n {
                    gx.extend_from_slice(gd);
                }
                acc(*x, gx);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (k, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        gx[i] = gx[i] + gd[k];
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, eps } => {
                let vx = self.value(*x).data();
                let c = row_len(out.shape());
                let inv_c = T::one() / T::lit(c as f64);
                let mut gx = vec![T::zero(); vx.len()];
                for r in 0..vx.len() / c.max(1) {
                    let row = &vx[r * c..(r + 1) * c];
                    let yhat = &out.data()[r * c..(r + 1) * c];
                    let grow = &gd[r * c..(r + 1) * c];
                    let mu = row.iter().copied().sum::<T>() * inv_c;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
                    let inv_sigma = T::one() / (var + *eps).sqrt();
                    let mean_g = grow.iter().copied().sum::<T>() * inv_c;
                    let mean_gy = grow.iter().zip(yhat).map(|(&g, &y)| g * y).sum::<T>() * inv_c;
                    for j in 0..c {
                        gx[r * c + j] = inv_sigma * (grow[j] - mean_g - yhat[j] * mean_gy);
                    }
                }
                acc(*x, gx);
            }
            Op::L2Normalize { x, eps } => {
                let vx = self.value(*x).data();
                let c = row_len(out.shape()).max(1);
                let mut gx = vec![T::zero(); vx.len()];
                for r in 0..vx.len() / c {
                    let row = &vx[r * c..(r + 1) * c];
                    let y = &out.data()[r * c..(r + 1) * c];
                    let grow = &gd[r * c..(r + 1) * c];
                    let inv = T::one() / (row.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    let gy = grow.iter().zip(y).map(|(&g, &v)| g * v).sum::<T>();
                    for j in 0..c {
                        gx[r * c + j] = (grow[j] - y[j] * gy) * inv;
                    }
                }
                acc(*x, gx);
            }
        }
    }
}
