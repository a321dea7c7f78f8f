//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the tape in reverse and only
//! visits nodes that depend on a leaf created with [`Graph::param`].

use crate::conv::{self, ConvGeom};
use crate::{Float, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
}

/// One crop taken by [`Graph::crop`]: source sample and top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropOrigin {
    pub sample: usize,
    pub top: usize,
    pub left: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    WeightedSum(Vec<(Var, T)>),
    SumAll(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    /// Standardization over contiguous groups; keeps `1/sqrt(var + eps)` per group.
    Normalize { x: Var, group: usize, inv_std: Vec<T> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Upsample2x(Var),
    Crop { x: Var, h: usize, w: usize, origins: Vec<CropOrigin> },
    L1Mean(Var, Var),
    MeanSoftplus { x: Var, sign: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a differentiable computation.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that gradients are not propagated into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient [`backward`](Self::backward) reports.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// `Σ wᵢ·xᵢ` over single-element inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms.iter().fold(T::zero(), |acc, &(v, w)| acc + w * self.value(v).item());
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::SumAll(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x), &[x])
    }

    /// NCHW convolution with `(O, C, kh, kw)` weights and optional `(O)` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[o], "conv2d: bias shape");
        }
        let geom = ConvGeom {
            batch: n,
            c_in: c,
            h,
            w: wd,
            c_out: o,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.pad,
        };
        let (ho, wo) = geom
            .output_hw()
            .unwrap_or_else(|| panic!("conv2d: {kh}x{kw} kernel does not fit {h}x{wd} input"));
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(&[n, o, ho, wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Zero-mean, unit-variance standardization over consecutive runs of
    /// `group` elements (biased variance, `eps` added before the square root).
    pub fn normalize(&mut self, x: Var, group: usize, eps: T) -> Var {
        let src = self.value(x);
        assert!(group > 0 && src.len() % group == 0, "normalize: bad group size {group}");
        let shape = src.shape().to_vec();
        let mut out = src.data().to_vec();
        let n = T::from_usize(group).unwrap();
        let mut inv_std = Vec::with_capacity(out.len() / group);
        for chunk in out.chunks_mut(group) {
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(Tensor::from_vec(&shape, out), Op::Normalize { x, group, inv_std }, &[x])
    }

    /// Per-sample, per-channel normalization of an NCHW tensor.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        self.normalize(x, h * w, eps)
    }

    /// Per-sample normalization over (C, H, W).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        self.normalize(x, c * h * w, eps)
    }

    /// `y[n,c,..] = gamma[c]·x[n,c,..] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2, "channel_affine needs a channel axis");
        let c = shape[1];
        assert_eq!(self.shape(gamma), &[c], "channel_affine: gamma length");
        assert_eq!(self.shape(beta), &[c], "channel_affine: beta length");
        let inner: usize = shape[2..].iter().product();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = *v * g[ch] + b[ch]);
        }
        self.push(Tensor::from_vec(&shape, out), Op::ChannelAffine { x, gamma, beta }, &[
            x, gamma, beta,
        ])
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..h {
                for x_ in 0..w {
                    let v = plane[y * w + x_];
                    let base = 2 * y * 2 * w + 2 * x_;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + 2 * w] = v;
                    dst[base + 2 * w + 1] = v;
                }
            }
        }
        self.push(Tensor::from_vec(&[n, c, 2 * h, 2 * w], out), Op::Upsample2x(x), &[x])
    }

    /// Stack of `h × w` windows cut from the samples of an NCHW tensor.
    pub fn crop(&mut self, x: Var, h: usize, w: usize, origins: &[CropOrigin]) -> Var {
        let (n, c, hh, ww) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(origins.len() * c * h * w);
        for o in origins {
            assert!(
                o.sample < n && o.top + h <= hh && o.left + w <= ww,
                "crop {o:?} of size {h}x{w} outside {hh}x{ww} batch of {n}"
            );
            for ch in 0..c {
                let plane = &src[(o.sample * c + ch) * hh * ww..];
                for y in 0..h {
                    let row = (o.top + y) * ww + o.left;
                    out.extend_from_slice(&plane[row..row + w]);
                }
            }
        }
        let value = Tensor::from_vec(&[origins.len(), c, h, w], out);
        self.push(value, Op::Crop { x, h, w, origins: origins.to_vec() }, &[x])
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "l1_mean shape mismatch");
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let total: T = va.iter().zip(vb).map(|(&x, &y)| (x - y).abs()).sum();
        let mean = total / T::from_usize(va.len()).unwrap();
        self.push(Tensor::scalar(mean), Op::L1Mean(a, b), &[a, b])
    }

    /// `mean(softplus(sign·x))`, evaluated without overflow.
    ///
    /// With `sign = -1` this is `-mean(log σ(x))`; with `sign = +1` it is
    /// `-mean(log(1 - σ(x)))`.
    pub fn mean_softplus(&mut self, x: Var, sign: T) -> Var {
        let v = self.value(x).data();
        let total: T = v.iter().map(|&z| softplus(sign * z)).sum();
        let mean = total / T::from_usize(v.len()).unwrap();
        self.push(Tensor::scalar(mean), Op::MeanSoftplus { x, sign }, &[x])
    }

    /// Gradients of the single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, g: Tensor<T>| accumulate(grads, v, g);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        acc(v, dy.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, dy.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.wants(*b) {
                    acc(*b, dy.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                acc(*x, dy.map(|g| g * f));
            }
            Op::WeightedSum(terms) => {
                let g = dy.item();
                for &(v, w) in terms {
                    if self.wants(v) {
                        acc(v, Tensor::from_vec(self.shape(v), vec![g * w]));
                    }
                }
            }
            Op::SumAll(x) => {
                acc(*x, Tensor::full(self.shape(*x), dy.item()));
            }
            Op::Relu(x) => {
                acc(*x, dy.zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { T::zero() }));
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                acc(*x, dy.zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { g * s }));
            }
            Op::Tanh(x) => {
                acc(*x, dy.zip_map(&node.value, |g, y| g * (T::one() - y * y)));
            }
            Op::Conv2d { x, w, b, geom } => {
                let want = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy.data(),
                    geom,
                    want,
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::from_vec(self.shape(*x), dx));
                }
                if let Some(dw) = dw {
                    acc(*w, Tensor::from_vec(self.shape(*w), dw));
                }
                if let (Some(db), Some(b)) = (db, b) {
                    acc(*b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::Normalize { x, group, inv_std } => {
                let n = T::from_usize(*group).unwrap();
                let mut dx = dy.data().to_vec();
                for ((chunk, y), &inv) in
                    dx.chunks_mut(*group).zip(node.value.data().chunks(*group)).zip(inv_std)
                {
                    let mean_g = chunk.iter().copied().sum::<T>() / n;
                    let mean_gy = chunk.iter().zip(y).map(|(&g, &y)| g * y).sum::<T>() / n;
                    for (g, &y) in chunk.iter_mut().zip(y) {
                        *g = inv * (*g - mean_g - y * mean_gy);
                    }
                }
                acc(*x, Tensor::from_vec(self.shape(*x), dx));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let shape = self.shape(*x);
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = dy.data().to_vec();
                    for (i, chunk) in dx.chunks_mut(inner).enumerate() {
                        let gc = gv[i % c];
                        chunk.iter_mut().for_each(|v| *v *= gc);
                    }
                    acc(*x, Tensor::from_vec(shape, dx));
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    let xs = self.value(*x).data();
                    for (i, (gchunk, xchunk)) in
                        dy.data().chunks(inner).zip(xs.chunks(inner)).enumerate()
                    {
                        let ch = i % c;
                        for (&g, &xv) in gchunk.iter().zip(xchunk) {
                            dg[ch] += g * xv;
                            db[ch] += g;
                        }
                    }
                    if self.wants(*gamma) {
                        acc(*gamma, Tensor::from_vec(&[c], dg));
                    }
                    if self.wants(*beta) {
                        acc(*beta, Tensor::from_vec(&[c], db));
                    }
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = vec![T::zero(); n * c * h * w];
                for (p, plane) in dy.data().chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for x_ in 0..w {
                            let base = 2 * y * 2 * w + 2 * x_;
                            dst[y * w + x_] = plane[base]
                                + plane[base + 1]
                                + plane[base + 2 * w]
                                + plane[base + 2 * w + 1];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Crop { x, h, w, origins } => {
                let (n, c, hh, ww) = self.value(*x).dims4();
                let mut dx = vec![T::zero(); n * c * hh * ww];
                let mut src = dy.data().chunks(*w);
                for o in origins {
                    for ch in 0..c {
                        let plane = &mut dx[(o.sample * c + ch) * hh * ww..];
                        for y in 0..*h {
                            let row = (o.top + y) * ww + o.left;
                            let seg = src.next().expect("crop gradient size");
                            for (d, &g) in plane[row..row + *w].iter_mut().zip(seg) {
                                *d += g;
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_vec(&[n, c, hh, ww], dx));
            }
            Op::L1Mean(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let scale = dy.item() / T::from_usize(va.len()).unwrap();
                let sign = va.zip_map(vb, |x, y| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                if self.wants(*b) {
                    acc(*b, sign.map(|s| -s));
                }
                if self.wants(*a) {
                    acc(*a, sign);
                }
            }
            Op::MeanSoftplus { x, sign } => {
                let s = *sign;
                let scale = dy.item() / T::from_usize(self.value(*x).len()).unwrap();
                acc(*x, self.value(*x).map(|z| s * sigmoid(s * z) * scale));
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, T::one()),
        slot @ None => *slot = Some(g),
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus<T: Float>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
