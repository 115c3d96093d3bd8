//! Flow-matching action expert. A small bidirectional transformer over the
//! noised chunk that cross-attends into the backbone's cached keys and values
//! and regresses the velocity `a - eps` along the straight noise-to-data path.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use svla_numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::backbone::{KvCache, Stage};
use crate::nn::{attention, merge_heads, p, split_heads, Init, LayerNorm, Linear, Mha, Mlp};
use crate::scenegen::expert::CHUNK_LEN;
use crate::scenegen::sim::{clip_action, Action, ACTION_DIM};
use crate::SvlaError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionHeadConfig {
    pub blocks: usize,
    pub chunk: usize,
    pub sample_steps: usize,
}

impl Default for ActionHeadConfig {
    fn default() -> Self {
        Self { blocks: 3, chunk: CHUNK_LEN, sample_steps: 8 }
    }
}

/// Per-dimension affine normalization of actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub mean: [f64; ACTION_DIM],
    pub std: [f64; ACTION_DIM],
}

impl Default for ActionStats {
    fn default() -> Self {
        Self { mean: [0.0; ACTION_DIM], std: [1.0; ACTION_DIM] }
    }
}

const MIN_STD: f64 = 1e-3;

impl ActionStats {
    pub fn from_actions<'a>(actions: impl IntoIterator<Item = &'a Action>) -> Self {
        let mut n = 0.0;
        let mut sum = [0.0; ACTION_DIM];
        let mut sq = [0.0; ACTION_DIM];
        for a in actions {
            n += 1.0;
            for i in 0..ACTION_DIM {
                sum[i] += a[i];
                sq[i] += a[i] * a[i];
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / n);
        let std = std::array::from_fn(|i| (sq[i] / n - mean[i] * mean[i]).max(0.0).sqrt().max(MIN_STD));
        Self { mean, std }
    }

    /// `[T, A]` tensor of normalized actions.
    pub fn normalize<T: Real>(&self, chunk: &[Action]) -> Tensor<T> {
        Tensor::from_fn(&[chunk.len(), ACTION_DIM], |i| {
            let (r, c) = (i / ACTION_DIM, i % ACTION_DIM);
            T::from_f64_lossy((chunk[r][c] - self.mean[c]) / self.std[c])
        })
    }

    /// Undoes normalization and clips to actuator limits.
    pub fn denormalize<T: Real>(&self, x: &Tensor<T>) -> Vec<Action> {
        x.data()
            .chunks(ACTION_DIM)
            .map(|row| {
                let a: Action = std::array::from_fn(|c| row[c].to_f64_lossy() * self.std[c] + self.mean[c]);
                clip_action(&a)
            })
            .collect()
    }
}

/// Noise draw and interpolation time of one flow-matching sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNoise<T> {
    pub eps: Tensor<T>,
    pub t: f64,
}

impl<T: Real> FlowNoise<T> {
    pub fn sample(rng: &mut impl Rng, chunk: usize) -> Self {
        let eps = Tensor::from_fn(&[chunk, ACTION_DIM], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z)
        });
        Self { eps, t: rng.random::<f64>() }
    }

    /// `(1 - t)·eps + t·a` and the velocity target `a - eps`.
    pub fn interpolate(&self, a: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let t = T::from_f64_lossy(self.t);
        let one = T::one();
        let xt = Tensor::from_fn(a.shape(), |i| (one - t) * self.eps.data()[i] + t * a.data()[i]);
        let v = Tensor::from_fn(a.shape(), |i| a.data()[i] - self.eps.data()[i]);
        (xt, v)
    }
}

/// Sinusoidal features of `t` in `[0, 1]`, frequencies 1..1000.
pub fn time_features<T: Real>(t: f64, d: usize) -> Tensor<T> {
    let half = d / 2;
    Tensor::from_fn(&[1, d], |i| {
        let k = i % half.max(1);
        let w = (1000f64.ln() * k as f64 / half.max(1) as f64).exp();
        let v = if i < half { (t * w).sin() } else { (t * w).cos() };
        T::from_f64_lossy(v)
    })
}

#[derive(Debug, Clone)]
struct HeadBlock {
    ln1: LayerNorm,
    attn: Mha,
    ln2: LayerNorm,
    cross_q: Linear,
    cross_o: Linear,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct ActionHead {
    pub cfg: ActionHeadConfig,
    pub d_model: usize,
    heads: usize,
    inp: Linear,
    time: Linear,
    pos: ParamId,
    blocks: Vec<HeadBlock>,
    ln_f: LayerNorm,
    pub out: Linear,
}

impl ActionHead {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cfg: ActionHeadConfig, d_model: usize, heads: usize) -> Self {
        let d = d_model;
        let n = |x: &str| format!("{name}.{x}");
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let b = |x: &str| n(&format!("block{i}.{x}"));
                HeadBlock {
                    ln1: LayerNorm::new(init, &b("ln1"), d),
                    attn: Mha::new(init, &b("self"), d, heads),
                    ln2: LayerNorm::new(init, &b("ln2"), d),
                    cross_q: Linear::new(init, &b("cross.q"), d, d, true),
                    cross_o: Linear::with_std(init, &b("cross.o"), d, d, true, 0.5 / (d as f64).sqrt()),
                    ln3: LayerNorm::new(init, &b("ln3"), d),
                    mlp: Mlp::new(init, &b("mlp"), d, 2 * d, d),
                }
            })
            .collect();
        Self {
            cfg,
            d_model,
            heads,
            inp: Linear::new(init, &n("inp"), ACTION_DIM, d, true),
            time: Linear::new(init, &n("time"), d, d, true),
            pos: init.normal(&n("pos"), &[cfg.chunk, d], 0.02),
            blocks,
            ln_f: LayerNorm::new(init, &n("ln_f"), d),
            out: Linear::with_std(init, &n("out"), d, ACTION_DIM, true, 0.01),
        }
    }

    /// `v̂(x_t, t | cache)`, shape `[T, A]`. Block `i` attends into backbone
    /// layer `layers - blocks + i`.
    pub fn velocity<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, xt: Var, t: f64, cache: &KvCache) -> Result<Var, SvlaError> {
        if cache.stage != Stage::Action {
            return Err(SvlaError::Query(format!(
                "action expert needs a cache ending in bbox, pose and action marker, got {:?}",
                cache.stage
            )));
        }
        let layers = cache.keys.len();
        if layers < self.blocks.len() {
            return Err(SvlaError::Shape(format!("{} head blocks but only {layers} cached layers", self.blocks.len())));
        }
        let sh = g.shape(xt).to_vec();
        if sh != [self.cfg.chunk, ACTION_DIM] {
            return Err(SvlaError::Shape(format!("noised chunk {sh:?}, expected [{}, {ACTION_DIM}]", self.cfg.chunk)));
        }
        let mut h = self.inp.forward(g, s, xt);
        let tf = g.constant(time_features(t, self.d_model));
        let te = self.time.forward(g, s, tf);
        let te = g.reshape(te, &[self.d_model]);
        h = g.add(h, te);
        let pos = p(g, s, self.pos);
        h = g.add(h, pos);
        let first = layers - self.blocks.len();
        for (i, b) in self.blocks.iter().enumerate() {
            let a_in = b.ln1.forward(g, s, h);
            let a = b.attn.self_attend(g, s, a_in, None).0;
            h = g.add(h, a);

            let c_in = b.ln2.forward(g, s, h);
            let q = b.cross_q.forward(g, s, c_in);
            let qh = split_heads(g, q, self.heads);
            let kh = split_heads(g, cache.keys[first + i], self.heads);
            let vh = split_heads(g, cache.values[first + i], self.heads);
            let c = attention(g, qh, kh, vh, None);
            let c = merge_heads(g, c);
            let c = b.cross_o.forward(g, s, c);
            h = g.add(h, c);

            let m_in = b.ln3.forward(g, s, h);
            let m = b.mlp.forward(g, s, m_in);
            h = g.add(h, m);
        }
        let h = self.ln_f.forward(g, s, h);
        Ok(self.out.forward(g, s, h))
    }

    /// Mean squared velocity error for one normalized chunk `a` (`[T, A]`).
    pub fn fm_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        cache: &KvCache,
        a: &Tensor<T>,
        noise: &FlowNoise<T>,
    ) -> Result<Var, SvlaError> {
        let (xt, target) = noise.interpolate(a);
        let xt = g.constant(xt);
        let v = self.velocity(g, s, xt, noise.t, cache)?;
        let target = g.constant(target);
        let d = g.sub(v, target);
        let sq = g.mul(d, d);
        Ok(g.mean(sq))
    }

    /// Euler integration from `x_0 = eps` over `steps` uniform steps.
    /// Returns the normalized chunk.
    pub fn fm_sample<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        cache: &KvCache,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>, SvlaError> {
        let eps = FlowNoise::<T>::sample(rng, self.cfg.chunk).eps;
        self.integrate(g, s, cache, steps, eps)
    }

    pub fn integrate<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        cache: &KvCache,
        steps: usize,
        mut x: Tensor<T>,
    ) -> Result<Tensor<T>, SvlaError> {
        if steps == 0 {
            return Err(SvlaError::Config("flow sampling needs at least one step".into()));
        }
        let dt = T::from_f64_lossy(1.0 / steps as f64);
        for k in 0..steps {
            let xv = g.constant(x.clone());
            let v = self.velocity(g, s, xv, k as f64 / steps as f64, cache)?;
            let v = g.value(v);
            if !v.all_finite() {
                return Err(SvlaError::NonFinite(format!("velocity at Euler step {k}")));
            }
            x = Tensor::from_fn(x.shape(), |i| x.data()[i] + dt * v.data()[i]);
        }
        Ok(x)
    }
}
