//! Causal transformer over visual tokens, a closed-vocabulary instruction, the
//! proprioceptive state and discretized task tokens. Its per-layer keys and
//! values condition the action expert.

use serde::{Deserialize, Serialize};
use svla_numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::codec::{coord_codec, DepthCodec, PoseCodec, UniformCodec};
use crate::nn::{offset_causal_mask, p, Block, Init, LayerNorm, Linear};
use crate::scenegen::render::BBox;
use crate::scenegen::scene::{Shape, COLORS};
use crate::scenegen::sim::STATE_DIM;
use crate::SvlaError;

/// Control tokens, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Bos,
    Bbox,
    Pose,
    Act,
    Depth,
}

const CONTROLS: usize = 5;

/// Token layout: words, control markers, image-coordinate bins, depth bins,
/// then one bin block per pose axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
    pub image_size: usize,
    pub coord_bins: usize,
    pub depth: DepthCodec,
    pub pose: PoseCodec,
}

impl Vocab {
    pub fn new(image_size: usize) -> Self {
        let mut words: Vec<String> = ["put", "the", "on", "pad"].iter().map(|w| w.to_string()).collect();
        words.extend(COLORS.iter().map(|(c, _)| c.to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
        Self { words, image_size, coord_bins: 64, depth: DepthCodec::default(), pose: PoseCodec::default() }
    }

    pub fn coord(&self) -> UniformCodec {
        coord_codec(self.image_size, self.coord_bins)
    }

    fn control_base(&self) -> usize {
        self.words.len()
    }

    fn coord_base(&self) -> usize {
        self.control_base() + CONTROLS
    }

    fn depth_base(&self) -> usize {
        self.coord_base() + self.coord_bins
    }

    fn pose_base(&self, axis: usize) -> usize {
        let before: usize = self.pose.axes[..axis].iter().map(|a| a.bins).sum();
        self.depth_base() + self.depth.bins + before
    }

    pub fn size(&self) -> usize {
        self.pose_base(3) + self.pose.axes[3].bins
    }

    pub fn control(&self, c: Control) -> usize {
        self.control_base() + c as usize
    }

    pub fn coord_range(&self) -> (usize, usize) {
        (self.coord_base(), self.coord_bins)
    }

    pub fn depth_range(&self) -> (usize, usize) {
        (self.depth_base(), self.depth.bins)
    }

    pub fn pose_range(&self, axis: usize) -> (usize, usize) {
        (self.pose_base(axis), self.pose.axes[axis].bins)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, SvlaError> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.words.iter().position(|v| *v == w).ok_or_else(|| SvlaError::UnknownWord {
                    word: w.clone(),
                    vocab: self.words.join(", "),
                })
            })
            .collect()
    }

    pub fn bbox_tokens(&self, b: &BBox) -> [usize; 4] {
        let c = self.coord();
        let base = self.coord_base();
        [b.x1, b.y1, b.x2, b.y2].map(|v| base + c.encode(v))
    }

    pub fn pose_tokens(&self, pose: [f64; 4]) -> [usize; 4] {
        let bins = self.pose.encode(pose);
        [0, 1, 2, 3].map(|a| self.pose_base(a) + bins[a])
    }

    pub fn coord_token(&self, v: f64) -> usize {
        self.coord_base() + self.coord().encode(v)
    }

    pub fn depth_token(&self, bin: usize) -> usize {
        self.depth_base() + bin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { d_model: 128, layers: 4, heads: 4, max_len: 192 }
    }
}

/// Emission stage of a cache. Progressive decoding only moves forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prompt,
    Bbox,
    Pose,
    Action,
    Depth,
}

/// Per-layer keys and values (`[len, d]`) of the processed prefix, as nodes
/// of the graph that produced them.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub len: usize,
    /// Block output at the last position, before the final norm.
    pub last: Option<Var>,
    pub stage: Stage,
}

impl KvCache {
    fn empty(layers: usize) -> Self {
        Self { keys: Vec::with_capacity(layers), values: Vec::with_capacity(layers), len: 0, last: None, stage: Stage::Prompt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBoxPrediction {
    pub bins: [usize; 4],
    pub bbox: BBox,
    /// False when the decoded corners are inverted; the box is kept as emitted.
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub vocab: Vocab,
    tok: ParamId,
    pos: ParamId,
    state: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    unembed: Linear,
}

impl Backbone {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cfg: BackboneConfig, vocab: Vocab) -> Self {
        let d = cfg.d_model;
        let n = |x: &str| format!("{name}.{x}");
        Self {
            tok: init.normal(&n("tok"), &[vocab.size(), d], 0.1),
            pos: init.normal(&n("pos"), &[cfg.max_len, d], 0.02),
            state: Linear::new(init, &n("state"), STATE_DIM, d, true),
            blocks: (0..cfg.layers).map(|i| Block::new(init, &n(&format!("block{i}")), d, cfg.heads)).collect(),
            ln_f: LayerNorm::new(init, &n("ln_f"), d),
            unembed: Linear::with_std(init, &n("unembed"), d, vocab.size(), false, 0.02),
            cfg,
            vocab,
        }
    }

    pub fn embed_tokens<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, ids: &[usize]) -> Var {
        let table = p(g, s, self.tok);
        g.embedding(table, ids)
    }

    /// `[BOS, words.., state]` embeddings appended after the visual tokens.
    fn prompt_embedding<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        visual: Var,
        instruction: &str,
        state: &[f64; STATE_DIM],
    ) -> Result<Var, SvlaError> {
        let sh = g.shape(visual).to_vec();
        if sh.len() != 2 || sh[1] != self.cfg.d_model {
            return Err(SvlaError::Shape(format!("visual tokens {sh:?}, expected [N, {}]", self.cfg.d_model)));
        }
        let mut ids = vec![self.vocab.control(Control::Bos)];
        ids.extend(self.vocab.tokenize(instruction)?);
        let words = self.embed_tokens(g, s, &ids);
        let st = g.constant(Tensor::from_fn(&[1, STATE_DIM], |i| T::from_f64_lossy(state[i])));
        let st = self.state.forward(g, s, st);
        Ok(g.concat(&[visual, words, st], 0))
    }

    /// Runs the new rows `x` (`[n, d]`) through every layer on top of `cache`.
    /// Returns the last block's output for the new rows.
    pub fn extend<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, cache: &mut KvCache, x: Var) -> Result<Var, SvlaError> {
        let n = g.shape(x)[0];
        let past = cache.len;
        if past + n > self.cfg.max_len {
            return Err(SvlaError::Shape(format!("sequence length {} exceeds {}", past + n, self.cfg.max_len)));
        }
        let pos = p(g, s, self.pos);
        let pos = g.slice(pos, 0, past, n);
        let mut h = g.add(x, pos);
        let mask = (n > 1).then(|| offset_causal_mask::<T>(n, past));
        for (li, b) in self.blocks.iter().enumerate() {
            let a_in = b.ln1.forward(g, s, h);
            let k_new = b.attn.k.forward(g, s, a_in);
            let v_new = b.attn.v.forward(g, s, a_in);
            let (k, v) = if past == 0 {
                (k_new, v_new)
            } else {
                (g.concat(&[cache.keys[li], k_new], 0), g.concat(&[cache.values[li], v_new], 0))
            };
            let a = b.attn.attend_kv(g, s, a_in, k, v, mask.as_ref());
            h = g.add(h, a);
            let m_in = b.ln2.forward(g, s, h);
            let m = b.mlp.forward(g, s, m_in);
            h = g.add(h, m);
            if past == 0 {
                cache.keys.push(k);
                cache.values.push(v);
            } else {
                cache.keys[li] = k;
                cache.values[li] = v;
            }
        }
        cache.len += n;
        cache.last = Some(g.slice(h, 0, n - 1, 1));
        Ok(h)
    }

    /// Forward over visual tokens + instruction + state. The cache holds the
    /// whole prefix.
    pub fn encode_prompt<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        visual: Var,
        instruction: &str,
        state: &[f64; STATE_DIM],
    ) -> Result<KvCache, SvlaError> {
        let x = self.prompt_embedding(g, s, visual, instruction, state)?;
        let mut cache = KvCache::empty(self.cfg.layers);
        self.extend(g, s, &mut cache, x)?;
        Ok(cache)
    }

    /// Teacher-forced forward of prompt followed by `tail` token ids. Returns
    /// block outputs for every position and the cache over the full sequence.
    pub fn teacher_forced<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        visual: Var,
        instruction: &str,
        state: &[f64; STATE_DIM],
        tail: &[usize],
    ) -> Result<(Var, KvCache), SvlaError> {
        let prompt = self.prompt_embedding(g, s, visual, instruction, state)?;
        let x = if tail.is_empty() {
            prompt
        } else {
            let t = self.embed_tokens(g, s, tail);
            g.concat(&[prompt, t], 0)
        };
        let mut cache = KvCache::empty(self.cfg.layers);
        let h = self.extend(g, s, &mut cache, x)?;
        Ok((h, cache))
    }

    /// Logits restricted to `range` for block-output rows `h` (`[n, d]`).
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, h: Var, range: (usize, usize)) -> Var {
        let n = self.ln_f.forward(g, s, h);
        let full = self.unembed.forward(g, s, n);
        g.slice(full, 1, range.0, range.1)
    }

    /// Mean cross-entropy of predicting `targets[i]` (absolute ids inside
    /// `range`) from block-output row `positions[i]` of `h`.
    pub fn token_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        h: Var,
        positions: &[usize],
        targets: &[usize],
        range: (usize, usize),
    ) -> Var {
        let rows: Vec<Var> = positions.iter().map(|&i| g.slice(h, 0, i, 1)).collect();
        let rows = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0) };
        let logits = self.logits(g, s, rows, range);
        let rel: Vec<usize> = targets.iter().map(|&t| t - range.0).collect();
        g.cross_entropy(logits, &rel)
    }

    fn greedy<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, cache: &mut KvCache, range: (usize, usize)) -> Result<usize, SvlaError> {
        let last = cache.last.ok_or_else(|| SvlaError::Query("empty cache".into()))?;
        let logits = self.logits(g, s, last, range);
        let lv = g.value(logits);
        if !lv.all_finite() {
            return Err(SvlaError::NonFinite("backbone logits".into()));
        }
        let bin = lv.argmax_last()[0];
        let e = self.embed_tokens(g, s, &[range.0 + bin]);
        self.extend(g, s, cache, e)?;
        Ok(bin)
    }

    fn push_control<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, cache: &mut KvCache, c: Control) -> Result<(), SvlaError> {
        let e = self.embed_tokens(g, s, &[self.vocab.control(c)]);
        self.extend(g, s, cache, e).map(|_| ())
    }

    /// Emits `x1, y1, x2, y2` coordinate tokens greedily.
    pub fn predict_bbox<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, cache: &mut KvCache) -> Result<BBoxPrediction, SvlaError> {
        if cache.stage != Stage::Prompt {
            return Err(SvlaError::Query(format!("bbox must follow the prompt, cache is at {:?}", cache.stage)));
        }
        self.push_control(g, s, cache, Control::Bbox)?;
        let mut bins = [0; 4];
        for b in &mut bins {
            *b = self.greedy(g, s, cache, self.vocab.coord_range())?;
        }
        cache.stage = Stage::Bbox;
        let c = self.vocab.coord();
        let [x1, y1, x2, y2] = bins.map(|b| c.decode(b));
        let bbox = BBox { x1, y1, x2, y2 };
        Ok(BBoxPrediction { bins, bbox, valid: x2 >= x1 && y2 >= y1 })
    }

    /// Emits the next keyframe `(x, y, z, yaw)`; requires the bbox first.
    pub fn predict_keyframe_pose<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, cache: &mut KvCache) -> Result<[f64; 4], SvlaError> {
        if cache.stage != Stage::Bbox {
            return Err(SvlaError::Query(format!("keyframe pose must follow the bbox, cache is at {:?}", cache.stage)));
        }
        self.push_control(g, s, cache, Control::Pose)?;
        let mut bins = [0; 4];
        for (axis, b) in bins.iter_mut().enumerate() {
            *b = self.greedy(g, s, cache, self.vocab.pose_range(axis))?;
        }
        cache.stage = Stage::Pose;
        Ok(self.vocab.pose.decode(bins))
    }

    /// Appends the action marker; the cache is then ready for the action expert.
    pub fn begin_action<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, cache: &mut KvCache) -> Result<(), SvlaError> {
        if cache.stage != Stage::Pose {
            return Err(SvlaError::Query(format!("actions must follow the keyframe pose, cache is at {:?}", cache.stage)));
        }
        self.push_control(g, s, cache, Control::Act)?;
        cache.stage = Stage::Action;
        Ok(())
    }

    /// Depth bin at pixel `(x, y)` of the left image.
    pub fn predict_point_depth<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        cache: &mut KvCache,
        x: f64,
        y: f64,
    ) -> Result<usize, SvlaError> {
        let size = self.vocab.image_size as f64;
        if !(0.0..size).contains(&x) || !(0.0..size).contains(&y) {
            return Err(SvlaError::Query(format!("depth query ({x}, {y}) outside the {size}px image")));
        }
        match cache.stage {
            Stage::Prompt => {
                self.push_control(g, s, cache, Control::Depth)?;
                cache.stage = Stage::Depth;
            }
            Stage::Depth => {}
            other => return Err(SvlaError::Query(format!("depth queries follow the prompt, cache is at {other:?}"))),
        }
        let q = self.embed_tokens(g, s, &[self.vocab.coord_token(x), self.vocab.coord_token(y)]);
        self.extend(g, s, cache, q)?;
        self.greedy(g, s, cache, self.vocab.depth_range())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> (ParamStore<f64>, Backbone) {
        let mut s = ParamStore::new();
        let mut init = Init::new(&mut s, 5);
        let cfg = BackboneConfig { d_model: 32, layers: 2, heads: 4, max_len: 96 };
        let b = Backbone::new(&mut init, "bb", cfg, Vocab::new(64));
        (s, b)
    }

    fn visual(g: &mut Graph<f64>, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.constant(Tensor::from_fn(&[64, 32], |_| rng.random_range(-1.0..1.0)))
    }

    const STATE: [f64; 5] = [0.0, 0.0, 0.2, 0.0, 1.0];

    #[test]
    fn vocab_layout_is_disjoint() {
        let v = Vocab::new(64);
        assert_eq!(v.size(), 13 + 5 + 64 + 32 + 256);
        assert_eq!(v.coord_range().0, 18);
        assert_eq!(v.depth_range().0, 82);
        assert_eq!(v.pose_range(3), (114 + 192, 64));
        let err = v.tokenize("put the teal cube on pad").unwrap_err();
        assert!(err.to_string().contains("teal") && err.to_string().contains("purple"));
    }

    #[test]
    fn prefix_length_and_determinism() {
        let (s, b) = model();
        let mut g = Graph::new();
        let v = visual(&mut g, 1);
        let c1 = b.encode_prompt(&mut g, &s, v, "put the red cube on pad", &STATE).unwrap();
        let c2 = b.encode_prompt(&mut g, &s, v, "put the red cube on pad", &STATE).unwrap();
        assert_eq!(c1.len, 64 + 1 + 6 + 1);
        assert_eq!(g.value(c1.keys[1]), g.value(c2.keys[1]));
        let c3 = b.encode_prompt(&mut g, &s, v, "put the blue cube on pad", &STATE).unwrap();
        assert!(g.value(c1.values[1]).max_abs_diff(g.value(c3.values[1])) > 1e-9);
    }

    #[test]
    fn truncated_prefix_matches_full_prefix() {
        let (s, b) = model();
        let mut g = Graph::new();
        let v = visual(&mut g, 2);
        let short = b.encode_prompt(&mut g, &s, v, "put the red cube on pad", &STATE).unwrap();
        let tail = [b.vocab.control(Control::Bbox), b.vocab.coord_token(3.0), b.vocab.coord_token(40.0)];
        let (_, long) = b.teacher_forced(&mut g, &s, v, "put the red cube on pad", &STATE, &tail).unwrap();
        for l in 0..2 {
            let lk = g.slice(long.keys[l], 0, 0, short.len);
            assert!(g.value(lk).max_abs_diff(g.value(short.keys[l])) < 1e-12);
        }
    }

    #[test]
    fn incremental_extension_matches_teacher_forcing() {
        let (s, b) = model();
        let mut g = Graph::new();
        let v = visual(&mut g, 3);
        let mut cache = b.encode_prompt(&mut g, &s, v, "put the green disc on pad", &STATE).unwrap();
        let pred = b.predict_bbox(&mut g, &s, &mut cache).unwrap();
        let mut tail = vec![b.vocab.control(Control::Bbox)];
        tail.extend(pred.bins.iter().map(|&x| b.vocab.coord_range().0 + x));
        let (_, full) = b.teacher_forced(&mut g, &s, v, "put the green disc on pad", &STATE, &tail).unwrap();
        assert_eq!(full.len, cache.len);
        assert!(g.value(full.keys[1]).max_abs_diff(g.value(cache.keys[1])) < 1e-9);
    }

    #[test]
    fn progressive_order_is_enforced() {
        let (s, b) = model();
        let mut g = Graph::new();
        let v = visual(&mut g, 4);
        let mut cache = b.encode_prompt(&mut g, &s, v, "put the red bar on pad", &STATE).unwrap();
        assert!(b.predict_keyframe_pose(&mut g, &s, &mut cache).is_err());
        assert!(b.begin_action(&mut g, &s, &mut cache).is_err());
        b.predict_bbox(&mut g, &s, &mut cache).unwrap();
        assert!(b.begin_action(&mut g, &s, &mut cache).is_err());
        b.predict_keyframe_pose(&mut g, &s, &mut cache).unwrap();
        b.begin_action(&mut g, &s, &mut cache).unwrap();
        assert_eq!(cache.len, 72 + 5 + 5 + 1);
        assert!(b.predict_point_depth(&mut g, &s, &mut cache, 1.0, 1.0).is_err());
    }

    #[test]
    fn depth_queries_must_be_in_image() {
        let (s, b) = model();
        let mut g = Graph::new();
        let v = visual(&mut g, 5);
        let mut cache = b.encode_prompt(&mut g, &s, v, "put the red bar on pad", &STATE).unwrap();
        assert!(b.predict_point_depth(&mut g, &s, &mut cache, 64.0, 3.0).is_err());
        assert!(b.predict_point_depth(&mut g, &s, &mut cache, 3.0, -0.5).is_err());
        let bin = b.predict_point_depth(&mut g, &s, &mut cache, 10.0, 20.0).unwrap();
        assert!(bin < 32);
    }
}
