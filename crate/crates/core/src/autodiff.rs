//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive records its inputs on a [`Tape`] during the forward pass.
//! [`Tape::backward`] walks the record once in reverse and returns the
//! gradient of a scalar loss with respect to every trainable leaf.
//! Constants, and everything computed only from constants, receive no
//! gradient. Discrete selections (argmin, argmax, top-K) are made on values
//! outside the tape and enter it as constants, so no gradient flows through
//! a selection index.

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{s, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm below which a vector counts as zero for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MulScalar(Var, Var),
    MulChannels(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Softmax(Var),
    MatVec(Var, Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    MeanRows(Var),
    Reshape(Var),
    Index(Var, usize),
    Concat(Vec<Var>),
    Cosine(Var, Var),
    WeightedSum(Var, Vec<Var>),
    Lerp(Var, Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    XCorr(Var, Var),
    Slice2d {
        input: Var,
        y: usize,
        x: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        eps: T,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SigmoidBce {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        class: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Record of executed primitives in topological (execution) order.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable leaf, or `None` if the loss does not depend
    /// on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Gradient as a flat slice, zero-length when absent.
    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn softmax_slice<T: Scalar>(v: &[T]) -> Vec<T> {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn norm<T: Scalar>(v: &[T]) -> T {
    kernels::dot(v, v).sqrt()
}

fn hwc<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => invalid(format!("{what}: expected H x W x C map, got {:?}", t.shape())),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Whether a gradient can flow into this node.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(value, op, tracked)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push_op(out, Op::Scale(a, factor), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push_op(out, Op::Offset(a), &[a])
    }

    /// Tensor times a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, scalar: Var) -> Result<Var> {
        if self.value(scalar).len() != 1 {
            return invalid("mul_scalar: second operand must have one element");
        }
        let k = self.item(scalar);
        let out = self.value(a).map(|x| x * k);
        Ok(self.push_op(out, Op::MulScalar(a, scalar), &[a, scalar]))
    }

    /// Multiplies every channel of an `... x C` tensor by the matching gate
    /// entry.
    pub fn mul_channels(&mut self, map: Var, gate: Var) -> Result<Var> {
        let (tm, tg) = (self.value(map), self.value(gate));
        let c = *tm.shape().last().unwrap_or(&0);
        if tg.rank() != 1 || tg.len() != c {
            return invalid(format!(
                "mul_channels: gate {:?} does not match channels of {:?}",
                tg.shape(),
                tm.shape()
            ));
        }
        let g = tg.data();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * g[i % c])
            .collect();
        let out = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::MulChannels(map, gate), &[map, gate]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push_op(out, Op::Relu(a), &[a])
    }

    /// `log(1 + exp(x))`
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push_op(out, Op::Softplus(a), &[a])
    }

    /// Softmax over all elements, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 {
            return invalid(format!("softmax: expected a vector, got {:?}", t.shape()));
        }
        let out = Tensor::new(t.shape().to_vec(), softmax_slice(t.data()))?;
        Ok(self.push_op(out, Op::Softmax(a), &[a]))
    }

    /// `W x` for `W: [out, in]`, `x: [in]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        let (o, i) = match *tw.shape() {
            [o, i] => (o, i),
            _ => return invalid(format!("matvec: weight must be a matrix, got {:?}", tw.shape())),
        };
        if tx.rank() != 1 || tx.len() != i {
            return invalid(format!(
                "matvec: {:?} cannot multiply {:?}",
                tw.shape(),
                tx.shape()
            ));
        }
        let data = (0..o)
            .map(|r| kernels::dot(&tw.data()[r * i..(r + 1) * i], tx.data()))
            .collect();
        let out = Tensor::new(vec![o], data)?;
        Ok(self.push_op(out, Op::MatVec(w, x), &[w, x]))
    }

    /// `W x + b`
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// `[m, k] x [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return invalid(format!("matmul: {sa:?} x {sb:?}")),
        };
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let orow = &mut out[r * n..(r + 1) * n];
            for p in 0..k {
                kernels::axpy(ta.data()[r * k + p], &tb.data()[p * n..(p + 1) * n], orow);
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = match *tx.shape() {
            [_, n] if tb.shape() == [n] => n,
            _ => {
                return invalid(format!(
                    "add_row_bias: {:?} + {:?}",
                    tx.shape(),
                    tb.shape()
                ))
            }
        };
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddRowBias(x, b), &[x, b]))
    }

    /// Column means of an `[m, n]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = match *tx.shape() {
            [m, n] => (m, n),
            _ => return invalid(format!("mean_rows: expected a matrix, got {:?}", tx.shape())),
        };
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            kernels::axpy(T::one(), &tx.data()[r * n..(r + 1) * n], &mut out);
        }
        let inv = T::one() / s::<T>(m as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(vec![n], out)?;
        Ok(self.push_op(out, Op::MeanRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    /// Per-channel spatial mean of an `H x W x C` map.
    pub fn spatial_mean(&mut self, map: Var) -> Result<Var> {
        let (h, w, c) = hwc(self.value(map), "spatial_mean")?;
        let flat = self.reshape(map, &[h * w, c])?;
        self.mean_rows(flat)
    }

    /// Element `i` of a tensor, as a one-element tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = self.value(x);
        if i >= tx.len() {
            return invalid(format!("index {i} out of range for {:?}", tx.shape()));
        }
        let out = Tensor::scalar(tx.data()[i]);
        Ok(self.push_op(out, Op::Index(x, i), &[x]))
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat: no inputs");
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![data.len()], data)?;
        Ok(self.push_op(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Cosine similarity of two equal-length vectors; zero when either norm
    /// is below [`COSINE_EPS`].
    pub fn cosine(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.rank() != 1 || tx.shape() != ty.shape() {
            return invalid(format!("cosine: {:?} vs {:?}", tx.shape(), ty.shape()));
        }
        let out = Tensor::scalar(cosine_slices(tx.data(), ty.data()));
        Ok(self.push_op(out, Op::Cosine(x, y), &[x, y]))
    }

    /// `sum_j w[j] * items[j]` over equally shaped items.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let tw = self.value(weights);
        if tw.rank() != 1 || tw.len() != items.len() || items.is_empty() {
            return invalid(format!(
                "weighted_sum: {} weights for {} items",
                tw.len(),
                items.len()
            ));
        }
        let shape = self.value(items[0]).shape().to_vec();
        let mut out = vec![T::zero(); self.value(items[0]).len()];
        for (j, &it) in items.iter().enumerate() {
            let ti = self.value(it);
            if ti.shape() != shape.as_slice() {
                return invalid("weighted_sum: items differ in shape");
            }
            kernels::axpy(self.value(weights).data()[j], ti.data(), &mut out);
        }
        let out = Tensor::new(shape, out)?;
        let mut inputs = items.to_vec();
        inputs.push(weights);
        Ok(self.push_op(out, Op::WeightedSum(weights, items.to_vec()), &inputs))
    }

    /// `(1 - t) a + t b` for a one-element `t`; exactly `b` at `t = 1`.
    pub fn lerp(&mut self, a: Var, b: Var, t: Var) -> Result<Var> {
        if self.value(t).len() != 1 {
            return invalid("lerp: blend factor must have one element");
        }
        let k = self.item(t);
        let out = self.zip_with(a, b, "lerp", |x, y| x * (T::one() - k) + k * y)?;
        Ok(self.push_op(out, Op::Lerp(a, b, t), &[a, b, t]))
    }

    /// Valid strided convolution. `input: H x W x Ci`,
    /// `kernel: KH x KW x Ci x Co`, `bias: Co`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (h, w, ci) = hwc(self.value(input), "conv2d")?;
        let (kh, kw, kci, co) = match *self.value(kernel).shape() {
            [a, b, c, d] => (a, b, c, d),
            _ => return invalid("conv2d: kernel must be KH x KW x Ci x Co"),
        };
        if kci != ci || kh > h || kw > w || stride == 0 || self.value(bias).shape() != [co] {
            return invalid(format!(
                "conv2d: input {:?}, kernel {:?}, bias {:?}, stride {stride}",
                self.value(input).shape(),
                self.value(kernel).shape(),
                self.value(bias).shape()
            ));
        }
        let geom = ConvGeom { h, w, ci, kh, kw, co, stride };
        let mut out = vec![T::zero(); geom.out_h() * geom.out_w() * co];
        kernels::conv2d_forward(
            geom,
            self.value(input).data(),
            self.value(kernel).data(),
            Some(self.value(bias).data()),
            &mut out,
        );
        let out = Tensor::new(vec![geom.out_h(), geom.out_w(), co], out)?;
        Ok(self.push_op(
            out,
            Op::Conv2d { input, kernel, bias, geom },
            &[input, kernel, bias],
        ))
    }

    pub fn max_pool(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom(input, size, stride, "max_pool")?;
        let mut out = vec![T::zero(); geom.out_h() * geom.out_w() * geom.c];
        let argmax = kernels::max_pool_forward(geom, self.value(input).data(), &mut out);
        let out = Tensor::new(vec![geom.out_h(), geom.out_w(), geom.c], out)?;
        Ok(self.push_op(out, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Mean over every `size x size` window, per channel.
    pub fn avg_pool(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom(input, size, stride, "avg_pool")?;
        let mut out = vec![T::zero(); geom.out_h() * geom.out_w() * geom.c];
        kernels::avg_pool_forward(geom, self.value(input).data(), &mut out);
        let out = Tensor::new(vec![geom.out_h(), geom.out_w(), geom.c], out)?;
        Ok(self.push_op(out, Op::AvgPool { input, geom }, &[input]))
    }

    fn pool_geom(&self, input: Var, size: usize, stride: usize, what: &str) -> Result<PoolGeom> {
        let (h, w, c) = hwc(self.value(input), what)?;
        if size == 0 || stride == 0 || size > h || size > w {
            return invalid(format!(
                "{what}: window {size} stride {stride} on {h}x{w}"
            ));
        }
        Ok(PoolGeom { h, w, c, size, stride })
    }

    /// Sliding dot product of an `n x n x C` template over an `H x W x C`
    /// map, giving an `(H-n+1) x (W-n+1)` score map.
    pub fn xcorr(&mut self, search: Var, template: Var) -> Result<Var> {
        let (h, w, c) = hwc(self.value(search), "xcorr")?;
        let (n, n2, c2) = hwc(self.value(template), "xcorr template")?;
        if n != n2 || c != c2 || n > h || n > w {
            return invalid(format!(
                "xcorr: template {:?} against {:?}",
                self.value(template).shape(),
                self.value(search).shape()
            ));
        }
        let mut out = vec![T::zero(); (h - n + 1) * (w - n + 1)];
        kernels::xcorr_forward(
            h,
            w,
            c,
            n,
            self.value(search).data(),
            self.value(template).data(),
            &mut out,
        );
        let out = Tensor::new(vec![h - n + 1, w - n + 1], out)?;
        Ok(self.push_op(out, Op::XCorr(search, template), &[search, template]))
    }

    /// `size x size` spatial window starting at `(y, x)`.
    pub fn slice2d(&mut self, input: Var, y: usize, x: usize, size: usize) -> Result<Var> {
        let (h, w, c) = hwc(self.value(input), "slice2d")?;
        if size == 0 || y + size > h || x + size > w {
            return invalid(format!("slice2d: window {size} at ({y},{x}) on {h}x{w}"));
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(size * size * c);
        for r in 0..size {
            let base = ((y + r) * w + x) * c;
            data.extend_from_slice(&src[base..base + size * c]);
        }
        let out = Tensor::new(vec![size, size, c], data)?;
        Ok(self.push_op(out, Op::Slice2d { input, y, x }, &[input]))
    }

    /// `gain * (v - mean) / sqrt(var + eps) + bias` over a vector.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (tv, tg, tb) = (self.value(input), self.value(gain), self.value(bias));
        if tv.rank() != 1 || tg.shape() != tv.shape() || tb.shape() != tv.shape() {
            return invalid(format!(
                "layer_norm: {:?}, gain {:?}, bias {:?}",
                tv.shape(),
                tg.shape(),
                tb.shape()
            ));
        }
        let (xhat, _) = normalize(tv.data(), eps);
        let data = xhat
            .iter()
            .zip(tg.data().iter().zip(tb.data()))
            .map(|(&x, (&g, &b))| g * x + b)
            .collect();
        let out = Tensor::new(tv.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::LayerNorm { input, gain, bias, eps }, &[input, gain, bias]))
    }

    /// Multiplies by a fixed mask, already scaled by the inverse keep
    /// probability.
    pub fn dropout(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(input).len() {
            return invalid("dropout: mask length differs from input");
        }
        let t = self.value(input);
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Dropout { input, mask }, &[input]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push_op(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<T>() / s::<T>(t.len() as f64);
        self.push_op(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// `sum_u weights[u] * ce(sigmoid(logits[u]), targets[u])`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Vec<T>, weights: Vec<T>) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.len() || weights.len() != tl.len() {
            return invalid("sigmoid_bce: targets/weights do not match logits");
        }
        let mut total = T::zero();
        for ((&x, &y), &w) in tl.data().iter().zip(&targets).zip(&weights) {
            total += w * (x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p());
        }
        Ok(self.push_op(
            Tensor::scalar(total),
            Op::SigmoidBce { logits, targets, weights },
            &[logits],
        ))
    }

    /// `-log softmax(logits)[class]`.
    pub fn softmax_ce(&mut self, logits: Var, class: usize) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 1 || class >= tl.len() {
            return invalid(format!("softmax_ce: class {class} for logits {:?}", tl.shape()));
        }
        let d = tl.data();
        let m = d.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + d.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
        let out = Tensor::scalar(lse - d[class]);
        Ok(self.push_op(out, Op::SoftmaxCe { logits, class }, &[logits]))
    }

    /// Reverse sweep from a one-element `loss`. Returns gradients for every
    /// tracked leaf the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| kernels::axpy(T::one(), g, ga));
                acc(*b, &mut |gb| kernels::axpy(T::one(), g, gb));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| kernels::axpy(T::one(), g, ga));
                acc(*b, &mut |gb| kernels::axpy(-T::one(), g, gb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g.iter().zip(vb)).for_each(|(x, (&gi, &y))| *x += gi * y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g.iter().zip(va)).for_each(|(x, (&gi, &y))| *x += gi * y)
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |ga| kernels::axpy(*k, g, ga)),
            Op::Offset(a) => acc(*a, &mut |ga| kernels::axpy(T::one(), g, ga)),
            Op::MulScalar(a, sc) => {
                let k = val(*sc)[0];
                acc(*a, &mut |ga| kernels::axpy(k, g, ga));
                let d = kernels::dot(g, val(*a));
                acc(*sc, &mut |gs| gs[0] += d);
            }
            Op::MulChannels(map, gate) => {
                let (vm, vg) = (val(*map), val(*gate));
                let c = vg.len();
                acc(*map, &mut |gm| {
                    for (i, x) in gm.iter_mut().enumerate() {
                        *x += g[i] * vg[i % c];
                    }
                });
                acc(*gate, &mut |gg| {
                    for (i, &gi) in g.iter().enumerate() {
                        gg[i % c] += gi * vm[i];
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * (T::one() - y * y);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * y * (T::one() - y);
                }
            }),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(va) {
                        if v > T::zero() {
                            *x += gi;
                        }
                    }
                })
            }
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(va) {
                        *x += gi * sigmoid(v);
                    }
                })
            }
            Op::Softmax(a) => {
                let gy = kernels::dot(g, out);
                acc(*a, &mut |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * (gi - gy);
                    }
                })
            }
            Op::MatVec(w, x) => {
                let (vw, vx) = (val(*w), val(*x));
                let i = vx.len();
                acc(*w, &mut |gw| {
                    for (r, &gr) in g.iter().enumerate() {
                        kernels::axpy(gr, vx, &mut gw[r * i..(r + 1) * i]);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, &gr) in g.iter().enumerate() {
                        kernels::axpy(gr, &vw[r * i..(r + 1) * i], gx);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = self.nodes[b.0].value.shape()[1];
                let k = self.nodes[a.0].value.shape()[1];
                let m = va.len() / k;
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += kernels::dot(grow, &vb[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            kernels::axpy(va[r * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let n = val(*b).len();
                acc(*x, &mut |gx| kernels::axpy(T::one(), g, gx));
                acc(*b, &mut |gb| {
                    for row in g.chunks_exact(n) {
                        kernels::axpy(T::one(), row, gb);
                    }
                });
            }
            Op::MeanRows(x) => {
                let n = out.len();
                let m = val(*x).len() / n;
                let inv = T::one() / s::<T>(m as f64);
                acc(*x, &mut |gx| {
                    for row in gx.chunks_exact_mut(n) {
                        kernels::axpy(inv, g, row);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| kernels::axpy(T::one(), g, gx)),
            Op::Index(x, i) => acc(*x, &mut |gx| gx[*i] += g[0]),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |gp| kernels::axpy(T::one(), &g[off..off + len], gp));
                    off += len;
                }
            }
            Op::Cosine(x, y) => {
                let (vx, vy) = (val(*x), val(*y));
                let (nx, ny) = (norm(vx), norm(vy));
                if nx.as_f64() < COSINE_EPS || ny.as_f64() < COSINE_EPS {
                    return;
                }
                let c = out[0];
                let inv = T::one() / (nx * ny);
                acc(*x, &mut |gx| {
                    for ((d, &a), &b) in gx.iter_mut().zip(vx).zip(vy) {
                        *d += g[0] * (b * inv - c * a / (nx * nx));
                    }
                });
                acc(*y, &mut |gy| {
                    for ((d, &b), &a) in gy.iter_mut().zip(vy).zip(vx) {
                        *d += g[0] * (a * inv - c * b / (ny * ny));
                    }
                });
            }
            Op::WeightedSum(w, items) => {
                let vw = val(*w);
                for (j, &it) in items.iter().enumerate() {
                    acc(it, &mut |gi| kernels::axpy(vw[j], g, gi));
                }
                acc(*w, &mut |gw| {
                    for (j, &it) in items.iter().enumerate() {
                        gw[j] += kernels::dot(g, val(it));
                    }
                });
            }
            Op::Lerp(a, b, t) => {
                let k = val(*t)[0];
                acc(*a, &mut |ga| kernels::axpy(T::one() - k, g, ga));
                acc(*b, &mut |gb| kernels::axpy(k, g, gb));
                let (va, vb) = (val(*a), val(*b));
                let d: T = g.iter().zip(va.iter().zip(vb)).map(|(&gi, (&x, &y))| gi * (y - x)).sum();
                acc(*t, &mut |gt| gt[0] += d);
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let (vi, vk) = (val(*input), val(*kernel));
                let mut gi = self.nodes[input.0].tracked.then(|| vec![T::zero(); vi.len()]);
                let mut gk = self.nodes[kernel.0].tracked.then(|| vec![T::zero(); vk.len()]);
                let mut gb = self.nodes[bias.0].tracked.then(|| vec![T::zero(); geom.co]);
                kernels::conv2d_backward(
                    *geom,
                    vi,
                    vk,
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, part) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                    if let Some(part) = part {
                        acc(v, &mut |dst| kernels::axpy(T::one(), &part, dst));
                    }
                }
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |gi| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
            }),
            Op::AvgPool { input, geom } => {
                acc(*input, &mut |gi| kernels::avg_pool_backward(*geom, g, gi))
            }
            Op::XCorr(search, template) => {
                let shape = self.nodes[search.0].value.shape();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let n = self.nodes[template.0].value.shape()[0];
                let (vs, vt) = (val(*search), val(*template));
                let mut gs = self.nodes[search.0].tracked.then(|| vec![T::zero(); vs.len()]);
                let mut gt = self.nodes[template.0].tracked.then(|| vec![T::zero(); vt.len()]);
                kernels::xcorr_backward(h, w, c, n, vs, vt, g, gs.as_deref_mut(), gt.as_deref_mut());
                for (v, part) in [(*search, gs), (*template, gt)] {
                    if let Some(part) = part {
                        acc(v, &mut |dst| kernels::axpy(T::one(), &part, dst));
                    }
                }
            }
            Op::Slice2d { input, y, x } => {
                let shape = self.nodes[input.0].value.shape();
                let (w, c) = (shape[1], shape[2]);
                let size = node.value.shape()[0];
                acc(*input, &mut |gi| {
                    for r in 0..size {
                        let base = ((y + r) * w + x) * c;
                        kernels::axpy(T::one(), &g[r * size * c..(r + 1) * size * c], &mut gi[base..base + size * c]);
                    }
                });
            }
            Op::LayerNorm { input, gain, bias, eps } => {
                let (xhat, sigma) = normalize(val(*input), *eps);
                let vg = val(*gain);
                acc(*gain, &mut |gg| {
                    for ((d, &gi), &xh) in gg.iter_mut().zip(g).zip(&xhat) {
                        *d += gi * xh;
                    }
                });
                acc(*bias, &mut |gb| kernels::axpy(T::one(), g, gb));
                let gx: Vec<T> = g.iter().zip(vg).map(|(&a, &b)| a * b).collect();
                let nf = s::<T>(gx.len() as f64);
                let mean_g = gx.iter().copied().sum::<T>() / nf;
                let mean_gx = kernels::dot(&gx, &xhat) / nf;
                acc(*input, &mut |gi| {
                    for ((d, &gxi), &xh) in gi.iter_mut().zip(&gx).zip(&xhat) {
                        *d += (gxi - mean_g - xh * mean_gx) / sigma;
                    }
                });
            }
            Op::Dropout { input, mask } => acc(*input, &mut |gi| {
                for ((d, &gv), &m) in gi.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let k = g[0] / s::<T>(val(*x).len() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += k));
            }
            Op::SigmoidBce { logits, targets, weights } => {
                let vl = val(*logits);
                acc(*logits, &mut |gl| {
                    for (i, d) in gl.iter_mut().enumerate() {
                        *d += g[0] * weights[i] * (sigmoid(vl[i]) - targets[i]);
                    }
                });
            }
            Op::SoftmaxCe { logits, class } => {
                let p = softmax_slice(val(*logits));
                acc(*logits, &mut |gl| {
                    for (i, d) in gl.iter_mut().enumerate() {
                        let y = if i == *class { T::one() } else { T::zero() };
                        *d += g[0] * (p[i] - y);
                    }
                });
            }
        }
    }
}

/// Standardized vector and its standard deviation `sqrt(var + eps)`.
fn normalize<T: Scalar>(v: &[T], eps: T) -> (Vec<T>, T) {
    let n = s::<T>(v.len() as f64);
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let sigma = (var + eps).sqrt();
    (v.iter().map(|&x| (x - mean) / sigma).collect(), sigma)
}

pub(crate) fn cosine_slices<T: Scalar>(x: &[T], y: &[T]) -> T {
    let (nx, ny) = (norm(x), norm(y));
    if nx.as_f64() < COSINE_EPS || ny.as_f64() < COSINE_EPS {
        return T::zero();
    }
    kernels::dot(x, y) / (nx * ny)
}
