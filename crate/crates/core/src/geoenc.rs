//! Geometric stereo encoder: unary features at stride 4, concatenation cost
//! volume, hybrid filtering (local 3D aggregation plus attention across
//! disparity hypotheses), correlation volume, and a soft-argmax disparity
//! head used only for depth evaluation.

use serde::{Deserialize, Serialize};
use svla_numerics::{ConvSpec, Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::nn::{attention, p, Conv, Init, LayerNorm, Linear};
use crate::SvlaError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoConfig {
    /// Unary feature channels.
    pub channels: usize,
    /// Full-resolution disparity range; `disparity / 4` hypotheses.
    pub disparity: usize,
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self { channels: 32, disparity: 16 }
    }
}

impl GeoConfig {
    pub fn hypotheses(&self) -> usize {
        self.disparity / 4
    }
}

#[derive(Debug, Clone)]
pub struct GeoEncoder {
    pub cfg: GeoConfig,
    c1: Conv,
    c2: Conv,
    c3: Conv,
    mix: Conv,
    agg: Conv,
    attn_ln: LayerNorm,
    attn_pos: ParamId,
    attn_q: Linear,
    attn_k: Linear,
    attn_v: Linear,
    attn_o: Linear,
    score: Linear,
}

/// Stride-4 views of both images plus the geometric volumes derived from them.
#[derive(Debug, Clone, Copy)]
pub struct GeoOutputs {
    /// `[C, H/4, W/4]`.
    pub f_left: Var,
    pub f_right: Var,
    /// `[C, D/4, H/4, W/4]`.
    pub cost: Var,
    pub filtered: Var,
    /// `[W/4, H/4, W/4]`, entry `(x, y, x')`.
    pub correlation: Var,
}

fn zeros<T: Real>(g: &mut Graph<T>, shape: &[usize]) -> Var {
    g.constant(Tensor::zeros(shape))
}

/// `f` shifted right by `k` columns along the last axis, zero-filled.
pub fn shift_columns<T: Real>(g: &mut Graph<T>, f: Var, k: usize) -> Var {
    if k == 0 {
        return f;
    }
    let mut shape = g.shape(f).to_vec();
    let w = *shape.last().unwrap();
    let axis = shape.len() - 1;
    if k >= w {
        return zeros(g, &shape);
    }
    let kept = g.slice(f, axis, 0, w - k);
    *shape.last_mut().unwrap() = k;
    let z = zeros(g, &shape);
    g.concat(&[z, kept], axis)
}

/// Dense `[n_out, n_in]` bilinear ×`scale` upsampling matrix (half-pixel
/// centers, clamped borders).
pub fn upsample_matrix<T: Real>(n_in: usize, scale: usize) -> Tensor<T> {
    let n_out = n_in * scale;
    let mut m = vec![0.0f64; n_out * n_in];
    for i in 0..n_out {
        let src = (i as f64 + 0.5) / scale as f64 - 0.5;
        let i0 = src.floor();
        let frac = src - i0;
        let clamp = |j: f64| (j.max(0.0) as usize).min(n_in - 1);
        m[i * n_in + clamp(i0)] += 1.0 - frac;
        m[i * n_in + clamp(i0 + 1.0)] += frac;
    }
    Tensor::from_f64(&[n_out, n_in], &m).expect("shape")
}

impl GeoEncoder {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cfg: GeoConfig) -> Self {
        let c = cfg.channels;
        let s2 = ConvSpec { stride: 2, pad: 1 };
        let s1 = ConvSpec { stride: 1, pad: 1 };
        let n = |x: &str| format!("{name}.{x}");
        Self {
            cfg,
            c1: Conv::new(init, &n("unary.conv1"), 3, c / 2, 3, s2),
            c2: Conv::new(init, &n("unary.conv2"), c / 2, c, 3, s2),
            c3: Conv::new(init, &n("unary.conv3"), c, c, 3, s1),
            mix: Conv::new(init, &n("cost.mix"), 2 * c, c, 1, ConvSpec { stride: 1, pad: 0 }),
            agg: Conv::new(init, &n("filter.agg"), 3 * c, c, 3, s1),
            attn_ln: LayerNorm::new(init, &n("filter.ln"), c),
            attn_pos: init.normal(&n("filter.pos"), &[cfg.hypotheses(), c], 0.5),
            attn_q: Linear::new(init, &n("filter.q"), c, c, true),
            attn_k: Linear::new(init, &n("filter.k"), c, c, true),
            attn_v: Linear::new(init, &n("filter.v"), c, c, true),
            attn_o: Linear::with_std(init, &n("filter.o"), c, c, true, 0.5 / (c as f64).sqrt()),
            score: Linear::new(init, &n("disp.score"), c, 1, false),
        }
    }

    /// Unary features for a batch of images `[N, 3, H, W]` → `[N, C, H/4, W/4]`.
    pub fn unary_batch<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, images: Var) -> Result<Var, SvlaError> {
        let sh = g.shape(images).to_vec();
        if sh.len() != 4 || sh[1] != 3 || !sh[2].is_multiple_of(4) || !sh[3].is_multiple_of(4) {
            return Err(SvlaError::Shape(format!("unary features need [N, 3, H, W] with H, W divisible by 4, got {sh:?}")));
        }
        let h = self.c1.forward(g, s, images);
        let h = g.gelu(h);
        let h = self.c2.forward(g, s, h);
        let h = g.gelu(h);
        Ok(self.c3.forward(g, s, h))
    }

    /// Unary features of one `[3, H, W]` image → `[C, H/4, W/4]`.
    pub fn unary_features<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, image: Var) -> Result<Var, SvlaError> {
        let sh = g.shape(image).to_vec();
        if sh.len() != 3 {
            return Err(SvlaError::Shape(format!("image must be [3, H, W], got {sh:?}")));
        }
        let x = g.reshape(image, &[1, sh[0], sh[1], sh[2]]);
        let f = self.unary_batch(g, s, x)?;
        let fs = g.shape(f).to_vec();
        Ok(g.reshape(f, &fs[1..]))
    }

    /// Concatenation cost volume: for hypothesis `k`, `[f_l(x); f_r(x - k)]`
    /// mixed 1×1 back to `C` channels. Output `[C, D/4, H/4, W/4]`.
    pub fn build_cost_volume<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        fl: Var,
        fr: Var,
    ) -> Result<Var, SvlaError> {
        let d4 = self.cfg.hypotheses();
        let sh = g.shape(fl).to_vec();
        if sh != g.shape(fr) || sh.len() != 3 {
            return Err(SvlaError::Shape(format!("feature maps differ: {sh:?} vs {:?}", g.shape(fr))));
        }
        if d4 == 0 || d4 > sh[2] || !self.cfg.disparity.is_multiple_of(4) {
            return Err(SvlaError::Shape(format!("{d4} hypotheses do not fit width {}", sh[2])));
        }
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let mut pairs = Vec::with_capacity(d4);
        for k in 0..d4 {
            let shifted = shift_columns(g, fr, k);
            let pair = g.concat(&[fl, shifted], 0);
            pairs.push(g.reshape(pair, &[1, 2 * c, h, w]));
        }
        let stack = g.concat(&pairs, 0);
        let mixed = self.mix.forward(g, s, stack);
        Ok(g.permute(mixed, &[1, 0, 2, 3]))
    }

    /// Same-shape filtering: a 3×3×3 aggregation over (disparity, H, W)
    /// followed by single-head attention across the disparity axis at every
    /// site, both residual.
    pub fn filter_cost_volume<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, v: Var) -> Var {
        let sh = g.shape(v).to_vec();
        let (c, d4, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let x = g.permute(v, &[1, 0, 2, 3]);
        let z = zeros(g, &[1, c, h, w]);
        let (prev, next) = if d4 == 1 {
            (z, z)
        } else {
            let head = g.slice(x, 0, 0, d4 - 1);
            let tail = g.slice(x, 0, 1, d4 - 1);
            (g.concat(&[z, head], 0), g.concat(&[tail, z], 0))
        };
        let cat = g.concat(&[prev, x, next], 1);
        let agg = self.agg.forward(g, s, cat);
        let agg = g.gelu(agg);
        let x1 = g.add(x, agg);

        let t = g.permute(x1, &[2, 3, 0, 1]);
        let t = g.reshape(t, &[h * w, d4, c]);
        let n = self.attn_ln.forward(g, s, t);
        let pos = p(g, s, self.attn_pos);
        let qk_in = g.add(n, pos);
        let q = self.attn_q.forward(g, s, qk_in);
        let k = self.attn_k.forward(g, s, qk_in);
        let val = self.attn_v.forward(g, s, n);
        let a = attention(g, q, k, val, None);
        let a = self.attn_o.forward(g, s, a);
        let t = g.add(t, a);
        let t = g.reshape(t, &[h, w, d4, c]);
        g.permute(t, &[3, 2, 0, 1])
    }

    /// `(x, y, x') -> <f_l(x, y), f_r(x', y)>`, shape `[W/4, H/4, W/4]`.
    pub fn build_correlation_volume<T: Real>(g: &mut Graph<T>, fl: Var, fr: Var) -> Var {
        let l = g.permute(fl, &[1, 2, 0]);
        let r = g.permute(fr, &[1, 2, 0]);
        let c = g.matmul_t(l, r);
        g.permute(c, &[1, 0, 2])
    }

    /// Unary features of both views from one batched pass.
    pub fn unary_pair<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        left: Var,
        right: Var,
    ) -> Result<(Var, Var), SvlaError> {
        let sh = g.shape(left).to_vec();
        if sh != g.shape(right) || sh.len() != 3 {
            return Err(SvlaError::Shape(format!("stereo images differ: {sh:?} vs {:?}", g.shape(right))));
        }
        let l = g.reshape(left, &[1, sh[0], sh[1], sh[2]]);
        let r = g.reshape(right, &[1, sh[0], sh[1], sh[2]]);
        let both = g.concat(&[l, r], 0);
        let f = self.unary_batch(g, s, both)?;
        let fs = g.shape(f).to_vec();
        let fl = g.slice(f, 0, 0, 1);
        let fr = g.slice(f, 0, 1, 1);
        Ok((g.reshape(fl, &fs[1..]), g.reshape(fr, &fs[1..])))
    }

    /// Full geometric path for one stereo pair of `[3, H, W]` images.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        left: Var,
        right: Var,
    ) -> Result<GeoOutputs, SvlaError> {
        let (f_left, f_right) = self.unary_pair(g, s, left, right)?;
        let cost = self.build_cost_volume(g, s, f_left, f_right)?;
        let filtered = self.filter_cost_volume(g, s, cost);
        let correlation = Self::build_correlation_volume(g, f_left, f_right);
        Ok(GeoOutputs { f_left, f_right, cost, filtered, correlation })
    }

    /// Soft-argmax disparity over the hypotheses of a filtered volume,
    /// bilinearly upsampled ×4, in full-resolution pixels. Output `[H, W]`.
    pub fn disparity_head<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, v: Var) -> Var {
        let sh = g.shape(v).to_vec();
        let (d4, h, w) = (sh[1], sh[2], sh[3]);
        let t = g.permute(v, &[2, 3, 1, 0]);
        let scores = self.score.forward(g, s, t);
        let scores = g.reshape(scores, &[h * w, d4]);
        disparity_from_scores(g, scores, h, w)
    }
}

/// Soft-argmax of `[h·w, D/4]` scores with hypothesis `k` at `4k` pixels,
/// upsampled ×4 to `[4h, 4w]`.
pub fn disparity_from_scores<T: Real>(g: &mut Graph<T>, scores: Var, h: usize, w: usize) -> Var {
    let d4 = g.shape(scores)[1];
    let probs = g.softmax(scores);
    let hyp = g.constant(Tensor::from_fn(&[d4, 1], |k| T::from_usize(4 * k).unwrap()));
    let d = g.matmul(probs, hyp);
    let d = g.reshape(d, &[h, w]);
    let uh = g.constant(upsample_matrix(h, 4));
    let uw = g.constant(upsample_matrix(w, 4));
    let rows = g.matmul(uh, d);
    g.matmul_t(rows, uw)
}

/// Per-site dot-product readout over hypotheses: `<f_l(x), f_r(x - k)>`,
/// shape `[D/4, H/4, W/4]`.
pub fn shift_scores<T: Real>(g: &mut Graph<T>, fl: Var, fr: Var, hypotheses: usize) -> Var {
    let sh = g.shape(fl).to_vec();
    let mut planes = Vec::with_capacity(hypotheses);
    for k in 0..hypotheses {
        let shifted = shift_columns(g, fr, k);
        let prod = g.mul(fl, shifted);
        let dot = g.mean_axis(prod, 0);
        planes.push(g.reshape(dot, &[1, sh[1], sh[2]]));
    }
    g.concat(&planes, 0)
}

/// Index of the best hypothesis per site from `[D/4, H, W]` scores.
pub fn best_hypothesis<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let sh = scores.shape();
    let (d4, n) = (sh[0], sh[1] * sh[2]);
    let d = scores.data();
    (0..n)
        .map(|i| (0..d4).max_by(|&a, &b| d[a * n + i].partial_cmp(&d[b * n + i]).unwrap()).unwrap())
        .collect()
}

/// Stand-alone disparity estimator over the geometric encoder. The monocular
/// control feeds the left image as both views.
#[derive(Debug, Clone)]
pub struct DepthNet {
    pub geo: GeoEncoder,
    pub mono: bool,
}

/// Disparities below this many pixels are clamped before inverting to depth.
pub const MIN_DISPARITY: f64 = 1e-3;

impl DepthNet {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cfg: GeoConfig, mono: bool) -> Self {
        Self { geo: GeoEncoder::new(init, name, cfg), mono }
    }

    /// Full-resolution disparity `[H, W]` in pixels.
    pub fn predict_disparity<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, left: Var, right: Var) -> Result<Var, SvlaError> {
        let right = if self.mono { left } else { right };
        let (fl, fr) = self.geo.unary_pair(g, s, left, right)?;
        let cost = self.geo.build_cost_volume(g, s, fl, fr)?;
        let filtered = self.geo.filter_cost_volume(g, s, cost);
        Ok(self.geo.disparity_head(g, s, filtered))
    }

    /// Relative squared disparity error `mean(((d - d*) / d*)^2)` over pixels
    /// with `mask` set. Errors if the mask is empty.
    pub fn disparity_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        left: Var,
        right: Var,
        gt: &[f32],
        mask: &[bool],
    ) -> Result<Var, SvlaError> {
        let d = self.predict_disparity(g, s, left, right)?;
        let shape = g.shape(d).to_vec();
        if gt.len() != shape[0] * shape[1] || mask.len() != gt.len() {
            return Err(SvlaError::Shape(format!("disparity target of {} pixels for a {shape:?} map", gt.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(SvlaError::Dataset("no valid disparity pixels".into()));
        }
        let target = g.constant(Tensor::from_fn(&shape, |i| T::from_f64_lossy(gt[i] as f64)));
        let weight = g.constant(Tensor::from_fn(&shape, |i| {
            let v = if mask[i] { 1.0 / (gt[i] as f64).max(MIN_DISPARITY) } else { 0.0 };
            T::from_f64_lossy(v)
        }));
        let diff = g.sub(d, target);
        let rel = g.mul(diff, weight);
        let sq = g.mul(rel, rel);
        let sum = g.sum(sq);
        Ok(g.scale(sum, 1.0 / count as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (ParamStore<f64>, GeoEncoder) {
        let mut s = ParamStore::new();
        let mut init = Init::new(&mut s, 1);
        let e = GeoEncoder::new(&mut init, "geo", GeoConfig::default());
        (s, e)
    }

    #[test]
    fn unary_stride_and_determinism() {
        let (s, e) = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::from_fn(&[3, 64, 64], |_| rng.random::<f64>());
        let mut g = Graph::new();
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let fa = e.unary_features(&mut g, &s, a).unwrap();
        let fb = e.unary_features(&mut g, &s, b).unwrap();
        assert_eq!(g.shape(fa), &[32, 16, 16]);
        assert_eq!(g.value(fa), g.value(fb));
        let bad = g.constant(Tensor::zeros(&[3, 62, 64]));
        assert!(e.unary_features(&mut g, &s, bad).is_err());
    }

    #[test]
    fn volume_shapes() {
        let (s, e) = encoder();
        let mut g = Graph::new();
        let l = g.constant(Tensor::full(&[3, 64, 64], 0.3));
        let r = g.constant(Tensor::full(&[3, 64, 64], 0.6));
        let o = e.forward(&mut g, &s, l, r).unwrap();
        assert_eq!(g.shape(o.cost), &[32, 4, 16, 16]);
        assert_eq!(g.shape(o.filtered), &[32, 4, 16, 16]);
        assert_eq!(g.shape(o.correlation), &[16, 16, 16]);
        let d = e.disparity_head(&mut g, &s, o.filtered);
        assert_eq!(g.shape(d), &[64, 64]);
    }

    #[test]
    fn too_many_hypotheses_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        let mut init = Init::new(&mut s, 1);
        let e = GeoEncoder::new(&mut init, "geo", GeoConfig { channels: 4, disparity: 32 });
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[4, 4, 4]));
        assert!(e.build_cost_volume(&mut g, &s, f, f).is_err());
    }

    #[test]
    fn zero_features_give_zero_volume_before_bias() {
        let (s, e) = encoder();
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[32, 8, 8]));
        let v = e.build_cost_volume(&mut g, &s, f, f).unwrap();
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        let filtered = e.filter_cost_volume(&mut g, &s, v);
        assert!(g.value(filtered).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn filtering_is_disparity_sensitive() {
        let (s, e) = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Tensor::from_fn(&[32, 4, 4, 4], |_| rng.random_range(-1.0..1.0));
        let n = 16;
        // Swap hypotheses 0 and 2.
        let swapped = Tensor::from_fn(&[32, 4, 4, 4], |i| {
            let (c, d, r) = (i / (4 * n), (i / n) % 4, i % n);
            let d2 = [2, 1, 0, 3][d];
            v.data()[c * 4 * n + d2 * n + r]
        });
        let mut g = Graph::new();
        let a = g.constant(v);
        let b = g.constant(swapped);
        let fa = e.filter_cost_volume(&mut g, &s, a);
        let fb = e.filter_cost_volume(&mut g, &s, b);
        let fb_unswapped = {
            let t = g.value(fb).clone();
            Tensor::from_fn(&[32, 4, 4, 4], |i| {
                let (c, d, r) = (i / (4 * n), (i / n) % 4, i % n);
                t.data()[c * 4 * n + [2, 1, 0, 3][d] * n + r]
            })
        };
        assert!(g.value(fa).max_abs_diff(&fb_unswapped) > 1e-6);
    }

    #[test]
    fn one_hot_and_uniform_scores() {
        let mut g = Graph::<f64>::new();
        let one_hot = g.constant(Tensor::from_fn(&[4, 4], |i| if i % 4 == 2 { 60.0 } else { -60.0 }));
        let d = disparity_from_scores(&mut g, one_hot, 2, 2);
        assert!(g.value(d).data().iter().all(|&x| (x - 8.0).abs() < 1e-9));
        let uniform = g.constant(Tensor::zeros(&[4, 4]));
        let d = disparity_from_scores(&mut g, uniform, 2, 2);
        assert!(g.value(d).data().iter().all(|&x| (x - 6.0).abs() < 1e-9));
    }

    #[test]
    fn upsample_rows_sum_to_one() {
        let m = upsample_matrix::<f64>(5, 4);
        for row in m.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
