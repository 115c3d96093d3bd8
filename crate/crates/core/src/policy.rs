//! The full policy: stereo-semantic visual tokens, causal backbone with
//! progressive bbox → keyframe → action decoding, and the flow-matching head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use svla_numerics::{Graph, ParamStore, Real, Tensor, Var};

use crate::actionhead::{ActionHead, ActionHeadConfig, ActionStats, FlowNoise};
use crate::auxtasks::{DepthQuery, TaskKind};
use crate::backbone::{BBoxPrediction, Backbone, BackboneConfig, Control, KvCache, Stage, Vocab};
use crate::fusion::{pool_correlation, pool_geometric, AblationConfig, Fuser, FusionMode, GeoFeature};
use crate::geoenc::{GeoConfig, GeoEncoder};
use crate::nn::Init;
use crate::scenegen::render::{BBox, StereoFrame};
use crate::scenegen::sim::{Action, STATE_DIM};
use crate::semenc::{SemConfig, SemanticEncoder};
use crate::SvlaError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub image_size: usize,
    pub geo: GeoConfig,
    pub sem: SemConfig,
    pub backbone: BackboneConfig,
    pub head: ActionHeadConfig,
    pub ablation: AblationConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            geo: GeoConfig::default(),
            sem: SemConfig::default(),
            backbone: BackboneConfig::default(),
            head: ActionHeadConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl PolicyConfig {
    /// Reduced widths for single-core runs; same topology.
    pub fn compact() -> Self {
        Self {
            geo: GeoConfig { channels: 16, disparity: 16 },
            sem: SemConfig { patch: 8, width: 32, heads: 2, layers: 1 },
            backbone: BackboneConfig { d_model: 64, layers: 3, heads: 4, max_len: 192 },
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, ablation: AblationConfig) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.sem.patch
    }

    pub fn geo_width(&self) -> usize {
        match self.ablation.geo_feature {
            GeoFeature::Vcorr => self.image_size / 4,
            GeoFeature::Vc | GeoFeature::VcPrime => self.geo.channels * self.geo.hypotheses(),
        }
    }

    /// Visual tokens per frame under the configured fusion.
    pub fn visual_tokens(&self) -> usize {
        let sites = self.grid_side().pow(2);
        if self.ablation.fusion == FusionMode::Sequence && self.ablation.semantics {
            2 * sites
        } else {
            sites
        }
    }
}

/// One progressive decoding pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub bbox: BBoxPrediction,
    pub keyframe: [f64; 4],
    pub chunk: Vec<Action>,
}

/// Supervision for one training sample. Only the fields of its kind are read.
#[derive(Debug, Clone)]
pub struct SampleTargets<'a, T> {
    pub target_bbox: BBox,
    pub keyframe: [f64; 4],
    /// Normalized `[T, A]` chunk.
    pub chunk: Tensor<T>,
    pub noise: FlowNoise<T>,
    pub queries: &'a [DepthQuery],
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub geo: GeoEncoder,
    pub sem: Option<SemanticEncoder>,
    pub fuser: Fuser,
    pub backbone: Backbone,
    pub head: ActionHead,
}

/// `H×W×3` interleaved pixels → `[3, H, W]`.
pub fn image_tensor<T: Real>(pixels: &[f32], h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, r) = (i / (h * w), i % (h * w));
        T::from_f64_lossy(pixels[r * 3 + c] as f64)
    })
}

impl Policy {
    pub fn new<T: Real>(cfg: PolicyConfig, seed: u64) -> Result<(Self, ParamStore<T>), SvlaError> {
        if !cfg.image_size.is_multiple_of(cfg.sem.patch) || !cfg.sem.patch.is_multiple_of(4) {
            return Err(SvlaError::Config(format!(
                "image size {} and patch {} must tile, with the patch a multiple of 4",
                cfg.image_size, cfg.sem.patch
            )));
        }
        if cfg.head.blocks > cfg.backbone.layers {
            return Err(SvlaError::Config("action head has more blocks than the backbone has layers".into()));
        }
        let needed = cfg.visual_tokens() + 32;
        if cfg.backbone.max_len < needed {
            return Err(SvlaError::Config(format!("backbone max_len {} below the {needed} positions needed", cfg.backbone.max_len)));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let geo = GeoEncoder::new(&mut init, "geo", cfg.geo);
        let sem = cfg.ablation.semantics.then(|| SemanticEncoder::new(&mut init, "sem", cfg.sem, cfg.image_size));
        let sem_width = sem.as_ref().map(|e| e.out_width());
        let d = cfg.backbone.d_model;
        let fuser = Fuser::new(&mut init, "fusion", cfg.ablation.fusion, cfg.geo_width(), sem_width, d);
        let backbone = Backbone::new(&mut init, "backbone", cfg.backbone, Vocab::new(cfg.image_size));
        let head = ActionHead::new(&mut init, "action", cfg.head, d, cfg.backbone.heads);
        Ok((Self { cfg, geo, sem, fuser, backbone, head }, store))
    }

    pub fn vocab(&self) -> &Vocab {
        &self.backbone.vocab
    }

    /// Fused visual tokens `[N, d_model]` of one stereo frame.
    pub fn visual_tokens<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, frame: &StereoFrame) -> Result<Var, SvlaError> {
        let size = self.cfg.image_size;
        if frame.width != size || frame.height != size {
            return Err(SvlaError::Shape(format!("frame {}x{}, policy expects {size}x{size}", frame.width, frame.height)));
        }
        let left = g.constant(image_tensor(&frame.left, size, size));
        let right = if self.cfg.ablation.single_view { left } else { g.constant(image_tensor(&frame.right, size, size)) };
        let (fl, fr) = self.geo.unary_pair(g, s, left, right)?;
        let stride = self.cfg.sem.patch;
        let geo = match self.cfg.ablation.geo_feature {
            GeoFeature::Vcorr => {
                let c = GeoEncoder::build_correlation_volume(g, fl, fr);
                pool_correlation(g, c, stride)?
            }
            GeoFeature::Vc => {
                let v = self.geo.build_cost_volume(g, s, fl, fr)?;
                pool_geometric(g, v, stride)?
            }
            GeoFeature::VcPrime => {
                let v = self.geo.build_cost_volume(g, s, fl, fr)?;
                let v = self.geo.filter_cost_volume(g, s, v);
                pool_geometric(g, v, stride)?
            }
        };
        let sem = match &self.sem {
            Some(e) => Some(e.forward(g, s, left)?),
            None => None,
        };
        self.fuser.fuse(g, s, geo, sem)
    }

    fn bbox_tail(&self, bbox: &BBox) -> Vec<usize> {
        let v = self.vocab();
        let mut tail = vec![v.control(Control::Bbox)];
        tail.extend(v.bbox_tokens(bbox));
        tail
    }

    fn pose_tail(&self, bbox: &BBox, keyframe: [f64; 4]) -> Vec<usize> {
        let v = self.vocab();
        let mut tail = self.bbox_tail(bbox);
        tail.push(v.control(Control::Pose));
        tail.extend(v.pose_tokens(keyframe));
        tail
    }

    /// Training loss of one sample of `kind`: cross-entropy over the task's
    /// tokens for bbox, pose and depth, flow-matching error for actions.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        kind: TaskKind,
        frame: &StereoFrame,
        instruction: &str,
        state: &[f64; STATE_DIM],
        targets: &SampleTargets<'_, T>,
    ) -> Result<Var, SvlaError> {
        let visual = self.visual_tokens(g, s, frame)?;
        let prompt_len = g.shape(visual)[0] + 2 + self.vocab().tokenize(instruction)?.len();
        let v = self.vocab().clone();
        match kind {
            TaskKind::Action => {
                let mut tail = self.pose_tail(&targets.target_bbox, targets.keyframe);
                tail.push(v.control(Control::Act));
                let (_, mut cache) = self.backbone.teacher_forced(g, s, visual, instruction, state, &tail)?;
                cache.stage = Stage::Action;
                self.head.fm_loss(g, s, &cache, &targets.chunk, &targets.noise)
            }
            TaskKind::Bbox => {
                let tail = self.bbox_tail(&targets.target_bbox);
                let (h, _) = self.backbone.teacher_forced(g, s, visual, instruction, state, &tail)?;
                let pos: Vec<usize> = (0..4).map(|j| prompt_len + j).collect();
                Ok(self.backbone.token_loss(g, s, h, &pos, &tail[1..], v.coord_range()))
            }
            TaskKind::Pose => {
                let tail = self.pose_tail(&targets.target_bbox, targets.keyframe);
                let (h, _) = self.backbone.teacher_forced(g, s, visual, instruction, state, &tail)?;
                let mut parts = Vec::with_capacity(4);
                for a in 0..4 {
                    let l = self.backbone.token_loss(g, s, h, &[prompt_len + 5 + a], &[tail[6 + a]], v.pose_range(a));
                    parts.push(g.reshape(l, &[1]));
                }
                let all = g.concat(&parts, 0);
                Ok(g.mean(all))
            }
            TaskKind::Depth => {
                if targets.queries.is_empty() {
                    return Err(SvlaError::MissingTarget("depth sample without queries".into()));
                }
                let mut tail = vec![v.control(Control::Depth)];
                let mut pos = Vec::new();
                let mut tgt = Vec::new();
                for q in targets.queries {
                    tail.push(v.coord_token(q.x as f64 + 0.5));
                    tail.push(v.coord_token(q.y as f64 + 0.5));
                    pos.push(prompt_len + tail.len() - 1);
                    tail.push(v.depth_token(q.bin));
                    tgt.push(v.depth_token(q.bin));
                }
                let (h, _) = self.backbone.teacher_forced(g, s, visual, instruction, state, &tail)?;
                Ok(self.backbone.token_loss(g, s, h, &pos, &tgt, v.depth_range()))
            }
        }
    }

    /// Prompt cache for one frame.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        frame: &StereoFrame,
        instruction: &str,
        state: &[f64; STATE_DIM],
    ) -> Result<KvCache, SvlaError> {
        let visual = self.visual_tokens(g, s, frame)?;
        self.backbone.encode_prompt(g, s, visual, instruction, state)
    }

    /// Progressive inference: bbox, then keyframe pose, then an action chunk
    /// sampled with `steps` Euler steps.
    #[allow(clippy::too_many_arguments)]
    pub fn act<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        frame: &StereoFrame,
        instruction: &str,
        state: &[f64; STATE_DIM],
        stats: &ActionStats,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<PolicyStep, SvlaError> {
        let mut cache = self.encode(g, s, frame, instruction, state)?;
        let bbox = self.backbone.predict_bbox(g, s, &mut cache)?;
        let keyframe = self.backbone.predict_keyframe_pose(g, s, &mut cache)?;
        self.backbone.begin_action(g, s, &mut cache)?;
        let x = self.head.fm_sample(g, s, &cache, steps, rng)?;
        Ok(PolicyStep { bbox, keyframe, chunk: stats.denormalize(&x) })
    }
}
