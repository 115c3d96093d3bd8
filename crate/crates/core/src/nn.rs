//! Parameterized layers built from graph ops. Layers own only parameter ids;
//! values live in a [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use svla_numerics::{ConvSpec, Graph, ParamId, ParamStore, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Registers freshly initialized parameters.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        });
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::one()))
    }
}

/// Creates a graph leaf for a parameter.
pub fn p<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, id: ParamId) -> Var {
    g.param(s, id)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::with_std(init, name, d_in, d_out, bias, 1.0 / (d_in as f64).sqrt())
    }

    pub fn with_std<T: Real>(init: &mut Init<T>, name: &str, d_in: usize, d_out: usize, bias: bool, std: f64) -> Self {
        let w = init.normal(&format!("{name}.w"), &[d_in, d_out], std);
        let b = bias.then(|| init.zeros(&format!("{name}.b"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    /// Applies to the last axis of `x`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(*shape.last().expect("rank >= 1"), self.d_in, "linear input width");
        let rows = shape.iter().product::<usize>() / self.d_in;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.d_in]) };
        let w = p(g, s, self.w);
        let mut y = g.matmul(flat, w);
        if let Some(b) = self.b {
            let b = p(g, s, b);
            y = g.add(y, b);
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.d_out;
            g.reshape(y, &out)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize) -> Self {
        Self { gain: init.ones(&format!("{name}.gain"), &[d]), bias: init.zeros(&format!("{name}.bias"), &[d]) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let (gain, bias) = (p(g, s, self.gain), p(g, s, self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            l1: Linear::new(init, &format!("{name}.fc1"), d_in, d_hidden, true),
            l2: Linear::new(init, &format!("{name}.fc2"), d_hidden, d_out, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let h = self.l1.forward(g, s, x);
        let h = g.gelu(h);
        self.l2.forward(g, s, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, c_in: usize, c_out: usize, k: usize, spec: ConvSpec) -> Self {
        let fan_in = (c_in * k * k) as f64;
        Self {
            w: init.normal(&format!("{name}.w"), &[c_out, c_in, k, k], (2.0 / fan_in).sqrt()),
            b: init.zeros(&format!("{name}.b"), &[c_out]),
            spec,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let (w, b) = (p(g, s, self.w), p(g, s, self.b));
        g.conv2d(x, w, Some(b), self.spec)
    }
}

/// `[L, L]` additive mask blocking attention to later positions.
pub fn causal_mask<T: Real>(len: usize) -> Tensor<T> {
    offset_causal_mask(len, 0)
}

/// `[len, past + len]` mask for `len` new positions following `past` cached
/// ones: new position `i` sees cached positions and new positions `<= i`.
pub fn offset_causal_mask<T: Real>(len: usize, past: usize) -> Tensor<T> {
    let neg = T::from_f64_lossy(MASKED);
    let cols = past + len;
    Tensor::from_fn(&[len, cols], |i| if i % cols > past + i / cols { neg } else { T::zero() })
}

/// `[L, d] -> [h, L, d/h]`.
pub fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Var {
    let (l, d) = (g.shape(x)[0], g.shape(x)[1]);
    let r = g.reshape(x, &[l, heads, d / heads]);
    g.permute(r, &[1, 0, 2])
}

/// `[h, L, dh] -> [L, h·dh]`.
pub fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let r = g.permute(x, &[1, 0, 2]);
    g.reshape(r, &[s[1], s[0] * s[2]])
}

/// Scaled dot-product attention on head-split tensors.
pub fn attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, mask: Option<&Tensor<T>>) -> Var {
    let dh = *g.shape(q).last().unwrap();
    let scores = g.matmul_t(q, k);
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        let m = g.constant(m.clone());
        scores = g.add(scores, m);
    }
    let probs = g.softmax(scores);
    g.matmul(probs, v)
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize, heads: usize) -> Self {
        assert_eq!(d % heads, 0, "width must divide into heads");
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d, true),
            k: Linear::new(init, &format!("{name}.k"), d, d, true),
            v: Linear::new(init, &format!("{name}.v"), d, d, true),
            o: Linear::with_std(init, &format!("{name}.o"), d, d, true, 0.5 / (d as f64).sqrt()),
            heads,
        }
    }

    /// Attends from `xq` (`[Lq, d]`) to precomputed merged keys/values
    /// (`[Lk, d]`).
    pub fn attend_kv<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        xq: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor<T>>,
    ) -> Var {
        let q = self.q.forward(g, s, xq);
        let qh = split_heads(g, q, self.heads);
        let kh = split_heads(g, k, self.heads);
        let vh = split_heads(g, v, self.heads);
        let a = attention(g, qh, kh, vh, mask);
        let m = merge_heads(g, a);
        self.o.forward(g, s, m)
    }

    /// Self-attention. Returns the output and the merged keys and values.
    pub fn self_attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        mask: Option<&Tensor<T>>,
    ) -> (Var, Var, Var) {
        let k = self.k.forward(g, s, x);
        let v = self.v.forward(g, s, x);
        (self.attend_kv(g, s, x, k, v, mask), k, v)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), d),
            attn: Mha::new(init, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), d),
            mlp: Mlp::new(init, &format!("{name}.mlp"), d, 2 * d, d),
        }
    }

    /// Returns the block output and this layer's keys and values.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        mask: Option<&Tensor<T>>,
    ) -> (Var, Var, Var) {
        let h = self.ln1.forward(g, s, x);
        let (a, k, v) = self.attn.self_attend(g, s, h, mask);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, s, x);
        let m = self.mlp.forward(g, s, h);
        (g.add(x, m), k, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask::<f64>(3);
        assert_eq!(m.data()[1], MASKED);
        assert_eq!(m.data()[3], 0.0);
        assert_eq!(m.data()[4], 0.0);
        assert_eq!(m.data()[5], MASKED);
    }

    #[test]
    fn linear_handles_rank3() {
        let mut s = ParamStore::<f64>::new();
        let mut init = Init::new(&mut s, 0);
        let l = Linear::new(&mut init, "l", 4, 3, true);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5, 4], 1.0));
        let y = l.forward(&mut g, &s, x);
        assert_eq!(g.shape(y), &[2, 5, 3]);
    }

    #[test]
    fn heads_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[5, 8], |i| i as f64));
        let h = split_heads(&mut g, x, 2);
        assert_eq!(g.shape(h), &[2, 5, 4]);
        let m = merge_heads(&mut g, h);
        assert_eq!(g.value(m), g.value(x));
    }
}
