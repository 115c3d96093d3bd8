//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list
//! is already a topological order. [`Graph::backward`] walks it in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::NumericsError;
use crate::params::{ParamId, ParamStore};
use crate::real::{gemm, MatView, Real};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(T, T)> },
    Gelu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec, cols: Vec<T> },
    MeanPool2d { x: Var, k: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Embedding { table: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. One graph per forward pass; graphs are cheap to
/// create and are dropped after [`Graph::backward`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node; `None` if the node did not require
    /// gradients or was not reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter. Parameters that took part in the graph but
    /// are disconnected from the loss get a zero gradient.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Number of times `small` tiles `big` when `small` is a suffix of `big`.
fn suffix_repeats(big: &[usize], small: &[usize]) -> Option<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    Some(numel(&big[..big.len() - small.len()]))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = new_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += mapped[d];
            if idx[d] < new_shape[d] {
                break;
            }
            src -= mapped[d] * new_shape[d];
            idx[d] = 0;
        }
    }
    (new_shape, out)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let d = &mut dx[(ci * h + iy as usize) * w + ix as usize];
                        *d = *d + src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Leaf holding data. `requires_grad` makes [`Gradients::wrt`] available
    /// for it.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    /// Parameter leaf. Frozen parameters do not request gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let node = Node { value: store.shared(id), op: Op::Param(id), needs_grad: !store.is_frozen(id) };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, name: &str) -> Tensor<T> {
        let (av, bv) = (self.val(a), self.val(b));
        suffix_repeats(av.shape(), bv.shape())
            .unwrap_or_else(|| panic!("{name}: shape {:?} is not a suffix of {:?}", bv.shape(), av.shape()));
        let bd = bv.data();
        let n = bd.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect();
        Tensor::new(av.shape(), data).expect("shape")
    }

    /// `a + b`; `b` may be a trailing-suffix shape of `a`, broadcast over the
    /// leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary(a, b, |x, y| x + y, "add");
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary(a, b, |x, y| x - y, "sub");
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub(a, b), ng)
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_binary(a, b, |x, y| x * y, "mul");
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let t = self.val(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Batched matrix product `a · b` (or `a · bᵀ` when `trans_b`).
    ///
    /// `a` is `[.., m, k]`. `b` is either rank 2 (shared across the batch) or
    /// has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn mm_dims(&self, a: Var, b: Var, trans_b: bool) -> (usize, usize, usize, usize, bool) {
        let (ash, bsh) = (self.val(a).shape(), self.val(b).shape());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (br, bc) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul inner dims {ash:?} x {bsh:?} (trans_b={trans_b})");
        let batch = numel(&ash[..ash.len() - 2]);
        let shared = bsh.len() == 2;
        if !shared {
            assert_eq!(ash[..ash.len() - 2], bsh[..bsh.len() - 2], "matmul batch dims");
        }
        (batch, m, k, n, shared)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (batch, m, k, n, shared) = self.mm_dims(a, b, trans_b);
        let ash = self.val(a).shape().to_vec();
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let bview = if trans_b { MatView::dense_t(n, k) } else { MatView::dense(k, n) };
        if shared {
            gemm(T::one(), ad, MatView::dense(batch * m, k), bd, bview, T::zero(), &mut out, MatView::dense(batch * m, n));
        } else {
            for i in 0..batch {
                gemm(
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    MatView::dense(m, k),
                    &bd[i * k * n..(i + 1) * k * n],
                    bview,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    MatView::dense(m, n),
                );
            }
        }
        let t = Tensor::new(&out_shape, out).expect("shape");
        let ng = self.ng(&[a, b]);
        self.push(t, Op::MatMul { a, b, trans_b }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let d = *x.shape().last().expect("softmax on scalar");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let t = Tensor::new(x.shape(), out).expect("shape");
        let ng = self.ng(&[a]);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.val(x);
        let d = *xv.shape().last().expect("layer_norm on scalar");
        assert_eq!(self.val(gain).shape(), [d]);
        assert_eq!(self.val(bias).shape(), [d]);
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let mut out = Vec::with_capacity(xv.len());
        let mut stats = Vec::with_capacity(xv.len() / d.max(1));
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
        }
        let t = Tensor::new(xv.shape(), out).expect("shape");
        let ng = self.ng(&[x, gain, bias]);
        self.push(t, Op::LayerNorm { x, gain, bias, stats }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A));
        let half = T::from_f64_lossy(0.5);
        let t = self.val(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.ng(&[a]);
        self.push(t, Op::Gelu(a), ng)
    }

    /// 2-D convolution. `x` is `[N, C, H, W]`, `w` is `[O, C, kh, kw]`,
    /// optional `b` is `[O]`; output `[N, O, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,kh,kw]");
        let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert!(spec.stride >= 1);
        let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        let kk = c * kh * kw;
        let hw = ho * wo;
        let mut cols = vec![T::zero(); nb * kk * hw];
        let mut out = vec![T::zero(); nb * o * hw];
        let xd = self.val(x).data();
        let wdat = self.val(w).data();
        for n in 0..nb {
            let col = &mut cols[n * kk * hw..(n + 1) * kk * hw];
            im2col(&xd[n * c * h * wd..(n + 1) * c * h * wd], c, h, wd, kh, kw, spec, ho, wo, col);
            gemm(
                T::one(),
                wdat,
                MatView::dense(o, kk),
                col,
                MatView::dense(kk, hw),
                T::zero(),
                &mut out[n * o * hw..(n + 1) * o * hw],
                MatView::dense(o, hw),
            );
        }
        if let Some(b) = b {
            let bd = self.val(b).data();
            assert_eq!(bd.len(), o);
            for n in 0..nb {
                for oc in 0..o {
                    for v in &mut out[(n * o + oc) * hw..(n * o + oc + 1) * hw] {
                        *v = *v + bd[oc];
                    }
                }
            }
        }
        let t = Tensor::new(&[nb, o, ho, wo], out).expect("shape");
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(t, Op::Conv2d { x, w, b, spec, cols }, ng)
    }

    fn pool_dims(&self, x: Var, k: usize) -> (usize, usize, usize, usize) {
        let s = self.val(x).shape();
        assert!(s.len() >= 2, "pooling needs [.., H, W]");
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        assert!(k >= 1 && h % k == 0 && w % k == 0, "pool window {k} must divide {h}x{w}");
        (numel(&s[..s.len() - 2]), h, w, k)
    }

    /// Non-overlapping `k × k` average pooling over the last two axes.
    pub fn mean_pool2d(&mut self, x: Var, k: usize) -> Var {
        let (planes, h, w, k) = self.pool_dims(x, k);
        let (ho, wo) = (h / k, w / k);
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let xd = self.val(x).data();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    let o = &mut out[(p * ho + y / k) * wo + xx / k];
                    *o = *o + xd[(p * h + y) * w + xx] * inv;
                }
            }
        }
        let mut shape = self.val(x).shape().to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let t = Tensor::new(&shape, out).expect("shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::MeanPool2d { x, k }, ng)
    }

    /// Non-overlapping `k × k` max pooling over the last two axes.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Var {
        let (planes, h, w, k) = self.pool_dims(x, k);
        let (ho, wo) = (h / k, w / k);
        let xd = self.val(x).data();
        let mut out = vec![T::neg_infinity(); planes * ho * wo];
        let mut argmax = vec![0usize; planes * ho * wo];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    let src = (p * h + y) * w + xx;
                    let dst = (p * ho + y / k) * wo + xx / k;
                    if xd[src] > out[dst] {
                        out[dst] = xd[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let mut shape = self.val(x).shape().to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let t = Tensor::new(&shape, out).expect("shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::MaxPool2d { x, argmax }, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.val(parts[0]).shape().to_vec();
        assert!(axis < first.len());
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut total = 0;
        for &p in parts {
            let s = self.val(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.val(p);
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out).expect("shape");
        let ng = self.ng(parts);
        self.push(t, Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.val(x).shape().to_vec();
        assert!(axis < s.len() && start + len <= s[axis], "slice {start}+{len} out of range for {s:?}[{axis}]");
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, out).expect("shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Slice { x, axis, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = Tensor::clone(self.val(x)).reshape(shape).expect("reshape size");
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = self.val(x);
        assert_eq!(perm.len(), v.rank(), "permute rank");
        let (shape, data) = permute_data(v.data(), v.shape(), perm);
        let t = Tensor::new(&shape, data).expect("shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Permute { x, perm: perm.to_vec() }, ng)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Var {
        let r = self.val(x).rank();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Rows of `table` (`[V, d]`) selected by `indices`; output `[n, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = self.val(table);
        assert_eq!(tv.rank(), 2, "embedding table must be [V, d]");
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < vocab, "embedding index {i} out of range {vocab}");
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[indices.len(), d], out).expect("shape");
        let ng = self.ng(&[table]);
        self.push(t, Op::Embedding { table, indices: indices.to_vec() }, ng)
    }

    /// Mean softmax cross-entropy. `logits` is `[.., V]`, one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.val(logits);
        let v = *lv.shape().last().expect("cross_entropy on scalar");
        let rows = lv.len() / v;
        assert_eq!(rows, targets.len(), "one target per logit row");
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = T::zero();
        for (row, &t) in lv.data().chunks(v).zip(targets) {
            assert!(t < v, "target {t} out of range {v}");
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            loss = loss + (lse - row[t]);
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let n = T::from_usize(rows.max(1)).unwrap();
        let t = Tensor::scalar(loss / n);
        let ng = self.ng(&[logits]);
        self.push(t, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.val(x).sum());
        let ng = self.ng(&[x]);
        self.push(t, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let t = Tensor::scalar(v.sum() / T::from_usize(v.len().max(1)).unwrap());
        let ng = self.ng(&[x]);
        self.push(t, Op::Mean(x), ng)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let s = self.val(x).shape().to_vec();
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let len = s[axis];
        let inv = T::one() / T::from_usize(len).unwrap();
        let xd = self.val(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xd[(o * len + l) * inner + i] * inv;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(&shape, out).expect("shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::MeanAxis { x, axis }, ng)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let ls = self.val(loss).shape();
        if numel(ls) != 1 {
            return Err(NumericsError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if !node.needs_grad {
                    continue;
                }
                let g = grads[i].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                params
                    .entry(id)
                    .and_modify(|acc: &mut Tensor<T>| acc.add_assign(&g))
                    .or_insert(g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces a gradient of the broadcast result to the suffix-shaped operand.
    fn reduce_suffix(g: &[T], small: &[usize]) -> Tensor<T> {
        let n = numel(small);
        let mut out = vec![T::zero(); n];
        for (i, &v) in g.iter().enumerate() {
            out[i % n] = out[i % n] + v;
        }
        Tensor::new(small, out).expect("shape")
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.nodes[b.0].needs_grad {
                    let gb = Self::reduce_suffix(gd, self.val(*b).shape());
                    self.acc(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.nodes[b.0].needs_grad {
                    let gb = Self::reduce_suffix(gd, self.val(*b).shape()).map(|v| -v);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let bn = bv.len();
                if self.nodes[a.0].needs_grad {
                    let ga = gd.iter().enumerate().map(|(j, &x)| x * bv.data()[j % bn]).collect();
                    self.acc(grads, *a, Tensor::new(av.shape(), ga).expect("shape"));
                }
                if self.nodes[b.0].needs_grad {
                    let prod: Vec<T> = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Self::reduce_suffix(&prod, bv.shape()));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|v| v * c));
            }
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, gd, grads),
            Op::Softmax(a) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(d).zip(gd.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    out.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.acc(grads, *a, Tensor::new(y.shape(), out).expect("shape"));
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = self.val(*x);
                let d = *xv.shape().last().unwrap();
                let gain_d = self.val(*gain).data();
                let dn = T::from_usize(d).unwrap();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for ((xr, gr), &(mean, rstd)) in xv.data().chunks(d).zip(gd.chunks(d)).zip(stats) {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let xh = (xr[j] - mean) * rstd;
                        let dxh = gr[j] * gain_d[j];
                        dg[j] = dg[j] + gr[j] * xh;
                        db[j] = db[j] + gr[j];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xh;
                    }
                    let (m1, m2) = (s1 / dn, s2 / dn);
                    for j in 0..d {
                        let xh = (xr[j] - mean) * rstd;
                        let dxh = gr[j] * gain_d[j];
                        dx.push(rstd * (dxh - m1 - xh * m2));
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape(), dx).expect("shape"));
                self.acc(grads, *gain, Tensor::new(&[d], dg).expect("shape"));
                self.acc(grads, *bias, Tensor::new(&[d], db).expect("shape"));
            }
            Op::Gelu(a) => {
                let (c, k) = (T::from_f64_lossy(GELU_C), T::from_f64_lossy(GELU_A));
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let xv = self.val(*a);
                let out = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gg)| {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let dydx = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        gg * dydx
                    })
                    .collect();
                self.acc(grads, *a, Tensor::new(xv.shape(), out).expect("shape"));
            }
            Op::Conv2d { x, w, b, spec, cols } => {
                let xs = self.val(*x).shape().to_vec();
                let ws = self.val(*w).shape().to_vec();
                let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let kk = c * kh * kw;
                let hw = ho * wo;
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); o * kk];
                    for n in 0..nb {
                        gemm(
                            T::one(),
                            &gd[n * o * hw..(n + 1) * o * hw],
                            MatView::dense(o, hw),
                            &cols[n * kk * hw..(n + 1) * kk * hw],
                            MatView::dense_t(kk, hw),
                            T::one(),
                            &mut dw,
                            MatView::dense(o, kk),
                        );
                    }
                    self.acc(grads, *w, Tensor::new(&ws, dw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![T::zero(); o];
                        for n in 0..nb {
                            for (oc, dbv) in db.iter_mut().enumerate() {
                                *dbv = *dbv + gd[(n * o + oc) * hw..(n * o + oc + 1) * hw].iter().copied().sum::<T>();
                            }
                        }
                        self.acc(grads, *b, Tensor::new(&[o], db).expect("shape"));
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let wdat = self.val(*w).data();
                    let mut dx = vec![T::zero(); nb * c * h * wd];
                    let mut dcols = vec![T::zero(); kk * hw];
                    for n in 0..nb {
                        gemm(
                            T::one(),
                            wdat,
                            MatView::dense_t(o, kk),
                            &gd[n * o * hw..(n + 1) * o * hw],
                            MatView::dense(o, hw),
                            T::zero(),
                            &mut dcols,
                            MatView::dense(kk, hw),
                        );
                        col2im(&dcols, c, h, wd, kh, kw, *spec, ho, wo, &mut dx[n * c * h * wd..(n + 1) * c * h * wd]);
                    }
                    self.acc(grads, *x, Tensor::new(&xs, dx).expect("shape"));
                }
            }
            Op::MeanPool2d { x, k } => {
                let xs = self.val(*x).shape().to_vec();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (ho, wo) = (h / k, w / k);
                let planes = numel(&xs[..r - 2]);
                let inv = T::one() / T::from_usize(k * k).unwrap();
                let mut dx = vec![T::zero(); numel(&xs)];
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(p * h + y) * w + xx] = gd[(p * ho + y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&xs, dx).expect("shape"));
            }
            Op::MaxPool2d { x, argmax } => {
                let xs = self.val(*x).shape().to_vec();
                let mut dx = vec![T::zero(); numel(&xs)];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] = dx[src] + gd[o];
                }
                self.acc(grads, *x, Tensor::new(&xs, dx).expect("shape"));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.val(p).shape().to_vec();
                    let len = ps[*axis];
                    if self.nodes[p.0].needs_grad {
                        let mut out = Vec::with_capacity(numel(&ps));
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.acc(grads, p, Tensor::new(&ps, out).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.val(*x).shape().to_vec();
                let len = node.value.shape()[*axis];
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                let mut dx = vec![T::zero(); numel(&xs)];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, Tensor::new(&xs, dx).expect("shape"));
            }
            Op::Reshape(x) => {
                let xs = self.val(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::new(&xs, gd.to_vec()).expect("shape"));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (shape, data) = permute_data(gd, g.shape(), &inv);
                self.acc(grads, *x, Tensor::new(&shape, data).expect("shape"));
            }
            Op::Embedding { table, indices } => {
                let ts = self.val(*table).shape().to_vec();
                let d = ts[1];
                let mut dt = vec![T::zero(); numel(&ts)];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] = dt[idx * d + j] + gd[r * d + j];
                    }
                }
                self.acc(grads, *table, Tensor::new(&ts, dt).expect("shape"));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let ls = self.val(*logits).shape().to_vec();
                let v = *ls.last().unwrap();
                let scale = gd[0] / T::from_usize(targets.len().max(1)).unwrap();
                let mut out: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    out[r * v + t] = out[r * v + t] - scale;
                }
                self.acc(grads, *logits, Tensor::new(&ls, out).expect("shape"));
            }
            Op::Sum(x) => {
                let xs = self.val(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::full(&xs, gd[0]));
            }
            Op::Mean(x) => {
                let xv = self.val(*x);
                let v = gd[0] / T::from_usize(xv.len().max(1)).unwrap();
                let xs = xv.shape().to_vec();
                self.acc(grads, *x, Tensor::full(&xs, v));
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.val(*x).shape().to_vec();
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                let len = xs[*axis];
                let inv = T::one() / T::from_usize(len).unwrap();
                let mut dx = vec![T::zero(); numel(&xs)];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = gd[o * inner + i] * inv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&xs, dx).expect("shape"));
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (batch, m, k, n, shared) = self.mm_dims(a, b, trans_b);
        let (av, bv) = (self.val(a), self.val(b));
        if self.nodes[a.0].needs_grad {
            // dA = dC · op(B)ᵀ
            let mut da = vec![T::zero(); av.len()];
            let opbt = if trans_b { MatView::dense(n, k) } else { MatView::dense_t(k, n) };
            if shared {
                gemm(T::one(), gd, MatView::dense(batch * m, n), bv.data(), opbt, T::zero(), &mut da, MatView::dense(batch * m, k));
            } else {
                for i in 0..batch {
                    gemm(
                        T::one(),
                        &gd[i * m * n..(i + 1) * m * n],
                        MatView::dense(m, n),
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        opbt,
                        T::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        MatView::dense(m, k),
                    );
                }
            }
            self.acc(grads, a, Tensor::new(av.shape(), da).expect("shape"));
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![T::zero(); bv.len()];
            // d op(B) = Aᵀ · dC; when trans_b, dB = dCᵀ · A.
            let (rows, cols) = if trans_b { (n, k) } else { (k, n) };
            if shared {
                if trans_b {
                    gemm(T::one(), gd, MatView::dense_t(batch * m, n), av.data(), MatView::dense(batch * m, k), T::zero(), &mut db, MatView::dense(rows, cols));
                } else {
                    gemm(T::one(), av.data(), MatView::dense_t(batch * m, k), gd, MatView::dense(batch * m, n), T::zero(), &mut db, MatView::dense(rows, cols));
                }
            } else {
                for i in 0..batch {
                    let (ga, aa) = (&gd[i * m * n..(i + 1) * m * n], &av.data()[i * m * k..(i + 1) * m * k]);
                    let dst = &mut db[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(T::one(), ga, MatView::dense_t(m, n), aa, MatView::dense(m, k), T::zero(), dst, MatView::dense(rows, cols));
                    } else {
                        gemm(T::one(), aa, MatView::dense_t(m, k), ga, MatView::dense(m, n), T::zero(), dst, MatView::dense(rows, cols));
                    }
                }
            }
            self.acc(grads, b, Tensor::new(bv.shape(), db).expect("shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0), true);
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[5], &[0.3, -1.2, 2.0, 0.0, 0.7]), true);
        let s = g.softmax(x);
        let y = g.sum(s);
        assert!((g.value(y).item() - 1.0).abs() < 1e-12);
        let grads = g.backward(y).unwrap();
        for v in grads.wrt(x).unwrap().data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add("used", t(&[2], &[1.0, 2.0]));
        let unused = store.add("unused", t(&[3], &[1.0, 2.0, 3.0]));
        let mut g = Graph::new();
        let a = g.param(&store, used);
        let _b = g.param(&store, unused);
        let y = g.sum(a);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.param(used).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = g.transpose(x);
        assert_eq!(g.shape(y), [3, 2]);
        assert_eq!(g.value(y).data(), &[1., 4., 2., 5., 3., 6.]);
        let z = g.constant(t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>()));
        let p = g.permute(z, &[2, 0, 1]);
        assert_eq!(g.shape(p), [4, 2, 3]);
        // p[i][j][k] = z[j][k][i]
        assert_eq!(g.value(p).data()[(2 + 1) * 3 + 2], 1.0 * 1.0 + 12.0 + 2.0 * 4.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, ConvSpec { stride: 1, pad: 1 });
        assert_eq!(g.value(y).data(), g.value(x).data());
        let y2 = g.conv2d(x, w, None, ConvSpec { stride: 2, pad: 1 });
        assert_eq!(g.value(y2).data(), &[1., 3., 7., 9.]);
    }

    #[test]
    fn pooling_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 6.]));
        let m = g.mean_pool2d(x, 2);
        let mx = g.max_pool2d(x, 2);
        assert_eq!(g.value(m).data(), &[3.0]);
        assert_eq!(g.value(mx).data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[3, 32]));
        let ce = g.cross_entropy(l, &[0, 5, 31]);
        assert!((g.value(ce).item() - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[4, 3]), true);
        let b = g.input(t(&[3], &[1., 2., 3.]), true);
        let y = g.add(x, b);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[4., 4., 4.]);
    }
}
