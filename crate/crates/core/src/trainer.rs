//! Multi-task training: task mixing, per-sample gradients reduced in index
//! order, Adam updates, metric logging and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use svla_numerics::checkpoint::{load_arrays, restore_store, save_arrays, store_arrays, NamedArray};
use svla_numerics::{adam_step, clip_grad_norm, AdamConfig, Graph, OptimState, ParamId, ParamStore, Tensor};

use crate::actionhead::{ActionStats, FlowNoise};
use crate::auxtasks::{per_task_weights, sample_depth_queries, DepthMode, TaskKind, TaskLosses, DEFAULT_QUERIES_PER_FRAME};
use crate::backbone::Vocab;
use crate::fusion::AblationConfig;
use crate::par::{map_indices, Execution};
use crate::policy::{Policy, PolicyConfig, SampleTargets};
use crate::scenegen::expert::EpisodeRecord;
use crate::SvlaError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Mixture weights for action, depth, bbox and pose samples.
    pub ratios: [f64; 4],
    pub depth_mode: DepthMode,
    pub queries_per_frame: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 1.6e-4,
            ratios: [5.0, 2.0, 2.0, 1.0],
            depth_mode: DepthMode::Interaction,
            queries_per_frame: DEFAULT_QUERIES_PER_FRAME,
            grad_clip: 1.0,
            seed: 0,
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Ratios with the depth task removed when depth supervision is off.
    pub fn effective_ratios(&self) -> [f64; 4] {
        let mut r = self.ratios;
        if self.depth_mode == DepthMode::None {
            r[TaskKind::Depth.index()] = 0.0;
        }
        r
    }

    pub fn ablation(&self) -> AblationConfig {
        self.policy.ablation
    }
}

/// Draws task kinds with probability proportional to their ratio.
#[derive(Debug, Clone)]
pub struct TaskMixer {
    dist: WeightedIndex<f64>,
}

impl TaskMixer {
    pub fn new(ratios: [f64; 4]) -> Result<Self, SvlaError> {
        if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().all(|&r| r == 0.0) {
            return Err(SvlaError::Config(format!("mixture ratios {ratios:?} must be nonnegative and not all zero")));
        }
        let dist = WeightedIndex::new(ratios).map_err(|e| SvlaError::Config(e.to_string()))?;
        Ok(Self { dist })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> TaskKind {
        TaskKind::ALL[self.dist.sample(rng)]
    }
}

/// One training sample: a task kind, a frame reference and the seed of its
/// flow noise and depth queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSample {
    pub kind: TaskKind,
    pub episode: usize,
    pub step: usize,
    pub seed: u64,
}

/// Episodes plus the flat frame index used for sampling.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub episodes: Vec<EpisodeRecord>,
    pub frames: Vec<(usize, usize)>,
    pub stats: ActionStats,
}

impl TrainData {
    pub fn new(episodes: Vec<EpisodeRecord>) -> Self {
        let frames = episodes.iter().enumerate().flat_map(|(e, ep)| (0..ep.steps.len()).map(move |s| (e, s))).collect();
        let stats = ActionStats::from_actions(episodes.iter().flat_map(|e| e.steps.iter().flat_map(|s| s.chunk.iter())));
        Self { episodes, frames, stats }
    }
}

/// Draws `batch` samples; kinds follow `mixer`, frames are uniform.
pub fn build_batch(frames: usize, mixer: &TaskMixer, batch: usize, data: &TrainData, rng: &mut impl Rng) -> Result<Vec<TaskSample>, SvlaError> {
    if frames == 0 {
        return Err(SvlaError::Dataset("no frames to sample tasks from".into()));
    }
    Ok((0..batch)
        .map(|_| {
            let kind = mixer.draw(rng);
            let (episode, step) = data.frames[rng.random_range(0..frames)];
            TaskSample { kind, episode, step, seed: rng.random() }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub losses: TaskLosses,
    pub total: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,action,depth,bbox,pose,total";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{}", self.step, l.action, l.depth, l.bbox, l.pose, self.total)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    step: usize,
    optim_step: u64,
    config: TrainConfig,
    vocab: Vocab,
    stats: ActionStats,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub policy: Policy,
    pub store: ParamStore<f32>,
    pub optim: OptimState<f32>,
    pub stats: ActionStats,
    /// Completed optimizer steps.
    pub step: usize,
    pub exec: Execution,
    mixer: TaskMixer,
}

pub(crate) fn sum_into(acc: &mut BTreeMap<ParamId, Tensor<f32>>, grads: BTreeMap<ParamId, Tensor<f32>>) {
    for (id, g) in grads {
        match acc.get_mut(&id) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
            None => {
                acc.insert(id, g);
            }
        }
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, stats: ActionStats, exec: Execution) -> Result<Self, SvlaError> {
        let mixer = TaskMixer::new(cfg.effective_ratios())?;
        let (policy, store) = Policy::new::<f32>(cfg.policy, cfg.seed)?;
        let optim = OptimState::new(&store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        Ok(Self { cfg, policy, store, optim, stats, step: 0, exec, mixer })
    }

    /// Sample stream of step `step`; independent of earlier steps, so a
    /// resumed run sees the same batches.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64 + 1);
        rng
    }

    pub fn next_batch(&self, data: &TrainData) -> Result<Vec<TaskSample>, SvlaError> {
        let mut rng = self.step_rng(self.step);
        build_batch(data.frames.len(), &self.mixer, self.cfg.batch_size, data, &mut rng)
    }

    /// Loss of one sample at `weight`, with its parameter gradients.
    fn sample_grads(
        &self,
        sample: &TaskSample,
        weight: f64,
        data: &TrainData,
    ) -> Result<(f64, BTreeMap<ParamId, Tensor<f32>>), SvlaError> {
        let ep = data
            .episodes
            .get(sample.episode)
            .ok_or_else(|| SvlaError::Dataset(format!("episode {} out of range", sample.episode)))?;
        let st = &ep.steps[sample.step];
        let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
        let noise = FlowNoise::sample(&mut rng, self.policy.head.cfg.chunk);
        let queries = if sample.kind == TaskKind::Depth {
            let f = &st.frame;
            sample_depth_queries(
                self.cfg.depth_mode,
                &st.region,
                &st.target_bbox,
                &f.depth,
                f.width,
                f.height,
                self.cfg.queries_per_frame,
                &self.policy.vocab().depth,
                &mut rng,
            )
        } else {
            Vec::new()
        };
        let targets = SampleTargets {
            target_bbox: st.target_bbox,
            keyframe: st.next_keyframe,
            chunk: self.stats.normalize(&st.chunk),
            noise,
            queries: &queries,
        };
        let mut g = Graph::new();
        let loss = self.policy.sample_loss(&mut g, &self.store, sample.kind, &st.frame, &ep.scene.instruction, &st.state, &targets)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(SvlaError::NonFinite(format!(
                "{} loss {value} at step {} (episode {}, frame {}, seed {})",
                sample.kind.name(),
                self.step,
                sample.episode,
                sample.step,
                sample.seed
            )));
        }
        let scaled = g.scale(loss, weight);
        Ok((value, g.backward(scaled)?.into_params()))
    }

    /// Forward/backward/update on `batch`. Per-task losses are means over the
    /// samples of that task.
    pub fn train_step(&mut self, batch: &[TaskSample], data: &TrainData) -> Result<StepMetrics, SvlaError> {
        let kinds: Vec<TaskKind> = batch.iter().map(|s| s.kind).collect();
        let weights = per_task_weights(&kinds);
        let results = map_indices(self.exec, batch.len(), |i| self.sample_grads(&batch[i], weights[i], data));
        let mut grads = BTreeMap::new();
        let mut losses = Vec::with_capacity(batch.len());
        for (r, k) in results.into_iter().zip(&kinds) {
            let (l, g) = r?;
            losses.push((*k, l));
            sum_into(&mut grads, g);
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        adam_step(&mut self.store, &grads, &mut self.optim)?;
        self.step += 1;
        let losses = TaskLosses::from_samples(&losses);
        Ok(StepMetrics { step: self.step, losses, total: losses.total(), grad_norm })
    }

    /// Runs `steps` more steps, appending metric rows to `log` when given.
    pub fn run(&mut self, data: &TrainData, steps: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>, SvlaError> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.next_batch(data)?;
            let m = self.train_step(&batch, data)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", m.csv_row())?;
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Writes weights, optimizer moments and a JSON sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SvlaError> {
        fs::create_dir_all(dir)?;
        save_arrays(&dir.join("weights.svla"), &store_arrays(&self.store))?;
        let mut moments = Vec::with_capacity(2 * self.store.len());
        for id in self.store.ids() {
            let name = self.store.name(id);
            moments.push(NamedArray::from_tensor(format!("m/{name}"), &self.optim.m[id.0]));
            moments.push(NamedArray::from_tensor(format!("v/{name}"), &self.optim.v[id.0]));
        }
        save_arrays(&dir.join("optim.svla"), &moments)?;
        let side = Sidecar {
            version: CHECKPOINT_VERSION,
            step: self.step,
            optim_step: self.optim.step,
            config: self.cfg.clone(),
            vocab: self.policy.vocab().clone(),
            stats: self.stats,
        };
        fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    /// Loads a checkpoint. When `expected` is given its ablation flags and
    /// depth mode must match the stored ones.
    pub fn load(dir: &Path, expected: Option<(&AblationConfig, DepthMode)>, exec: Execution) -> Result<Self, SvlaError> {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)?;
        if side.version != CHECKPOINT_VERSION {
            return Err(SvlaError::Checkpoint(format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", side.version)));
        }
        if let Some((abl, mode)) = expected {
            if *abl != side.config.policy.ablation || mode != side.config.depth_mode {
                return Err(SvlaError::Checkpoint(format!(
                    "checkpoint trained with {} / depth {}, requested {} / depth {}",
                    side.config.policy.ablation.label(),
                    side.config.depth_mode.name(),
                    abl.label(),
                    mode.name()
                )));
            }
        }
        let mut t = Trainer::new(side.config, side.stats, exec)?;
        if *t.policy.vocab() != side.vocab {
            return Err(SvlaError::Checkpoint("vocabulary differs from the one this build constructs".into()));
        }
        restore_store(&mut t.store, &load_arrays(&dir.join("weights.svla"))?)?;
        let moments = load_arrays(&dir.join("optim.svla"))?;
        if moments.len() != 2 * t.store.len() {
            return Err(SvlaError::Checkpoint(format!("{} optimizer arrays for {} parameters", moments.len(), t.store.len())));
        }
        for (i, id) in t.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let name = t.store.name(id).to_string();
            let (m, v) = (&moments[2 * i], &moments[2 * i + 1]);
            if m.name != format!("m/{name}") || v.name != format!("v/{name}") || m.shape != t.store.get(id).shape() {
                return Err(SvlaError::Checkpoint(format!("optimizer state for `{name}` is missing or misshapen")));
            }
            t.optim.m[id.0] = m.to_tensor();
            t.optim.v[id.0] = v.to_tensor();
        }
        t.optim.step = side.optim_step;
        t.step = side.step;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_proportions() {
        let m = TaskMixer::new([5.0, 2.0, 2.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut n = [0usize; 4];
        for _ in 0..100_000 {
            n[m.draw(&mut rng).index()] += 1;
        }
        for (c, p) in n.iter().zip([0.5, 0.2, 0.2, 0.1]) {
            assert!((*c as f64 / 1e5 - p).abs() < 0.005, "{n:?}");
        }
    }

    #[test]
    fn degenerate_ratios() {
        let m = TaskMixer::new([1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| m.draw(&mut rng) == TaskKind::Action));
        assert!(TaskMixer::new([0.0; 4]).is_err());
        assert!(TaskMixer::new([1.0, -1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn depth_off_removes_depth_samples() {
        let cfg = TrainConfig { depth_mode: DepthMode::None, ..TrainConfig::default() };
        assert_eq!(cfg.effective_ratios(), [5.0, 0.0, 2.0, 1.0]);
    }
}
