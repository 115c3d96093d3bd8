//! Closed-loop rollouts under the single-attempt scorer, evaluation suites,
//! depth error metrics and ablation sweeps.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use svla_numerics::{Graph, ParamStore};

use crate::actionhead::ActionStats;
use crate::geoenc::{DepthNet, MIN_DISPARITY};
use crate::par::{map_indices, Execution};
use crate::policy::{image_tensor, Policy};
use crate::scenegen::camera::{sample_camera_rig, CameraRig, CameraRole, RandomizationShell, ShellLevel};
use crate::scenegen::dataset::episode_seed;
use crate::scenegen::expert::{plan_expert, CHUNK_LEN};
use crate::scenegen::render::{render_stereo, StereoFrame};
use crate::scenegen::scene::{sample_scene, SceneSpec, TaskFamily};
use crate::scenegen::sim::{Action, RolloutOutcome, World};
use crate::SvlaError;

/// Produces the next chunk of actions from the current world and, when
/// requested, a rendered frame of it.
pub trait ChunkPolicy {
    fn needs_frame(&self) -> bool {
        true
    }
    fn next_chunk(&mut self, world: &World, frame: Option<&StereoFrame>) -> Result<Vec<Action>, SvlaError>;
}

/// Replays a fixed action list in chunks.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub actions: Vec<Action>,
    pos: usize,
}

impl ScriptedPolicy {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, pos: 0 }
    }

    /// The expert's plan for `scene`.
    pub fn expert(scene: &SceneSpec) -> Result<Self, SvlaError> {
        Ok(Self::new(plan_expert(scene)?.0))
    }
}

impl ChunkPolicy for ScriptedPolicy {
    fn needs_frame(&self) -> bool {
        false
    }

    fn next_chunk(&mut self, _: &World, _: Option<&StereoFrame>) -> Result<Vec<Action>, SvlaError> {
        let end = (self.pos + CHUNK_LEN).min(self.actions.len());
        let chunk = self.actions[self.pos..end].to_vec();
        self.pos = end;
        Ok(chunk)
    }
}

/// A trained policy driven through progressive decoding.
pub struct LearnedPolicy<'a> {
    pub policy: &'a Policy,
    pub store: &'a ParamStore<f32>,
    pub stats: ActionStats,
    pub sample_steps: usize,
    pub rng: ChaCha8Rng,
}

impl ChunkPolicy for LearnedPolicy<'_> {
    fn next_chunk(&mut self, world: &World, frame: Option<&StereoFrame>) -> Result<Vec<Action>, SvlaError> {
        let frame = frame.ok_or_else(|| SvlaError::Query("learned policy needs a frame".into()))?;
        let mut g = Graph::new();
        let step = self.policy.act(
            &mut g,
            self.store,
            frame,
            &world.scene.instruction,
            &world.robot.to_vec(),
            &self.stats,
            self.sample_steps,
            &mut self.rng,
        )?;
        Ok(step.chunk)
    }
}

/// Runs `policy` until the scorer terminates the episode or `max_steps`
/// actions have been executed. An empty chunk ends the episode early.
pub fn rollout(policy: &mut impl ChunkPolicy, scene: &SceneSpec, rig: &CameraRig, max_steps: usize) -> Result<RolloutOutcome, SvlaError> {
    let mut world = World::new(scene);
    while world.outcome().is_none() && world.steps() < max_steps {
        let frame = if policy.needs_frame() {
            Some(render_stereo(scene, rig, &world.objects, &world.robot.pose, world.robot.open)?)
        } else {
            None
        };
        let chunk = policy.next_chunk(&world, frame.as_ref())?;
        if chunk.is_empty() {
            break;
        }
        for a in &chunk {
            world.step(a);
            if world.outcome().is_some() || world.steps() >= max_steps {
                break;
            }
        }
    }
    Ok(world.outcome().unwrap_or_else(|| world.time_out()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub families: Vec<TaskFamily>,
    pub trials_per_family: usize,
    pub shell: ShellLevel,
    pub difficulty: usize,
    pub image_size: usize,
    pub max_steps: usize,
    pub sample_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            families: TaskFamily::ALL.to_vec(),
            trials_per_family: 50,
            shell: ShellLevel::Small,
            difficulty: 2,
            image_size: 64,
            max_steps: 64,
            sample_steps: 8,
            seed: 1_000_003,
        }
    }
}

impl EvalConfig {
    pub fn fingerprint(&self) -> String {
        let fams: Vec<&str> = self.families.iter().map(|f| f.name()).collect();
        format!(
            "families={} trials={} shell={} difficulty={} steps={} euler={} seed={}",
            fams.join("+"),
            self.trials_per_family,
            self.shell.name(),
            self.difficulty,
            self.max_steps,
            self.sample_steps,
            self.seed
        )
    }
}

/// Deterministic scene and rig of trial `trial` of `family`. Placements or
/// rigs that cannot be realized are redrawn with the next attempt index.
pub fn trial_setup(cfg: &EvalConfig, family: TaskFamily, trial: usize) -> Result<(SceneSpec, CameraRig, u64), SvlaError> {
    let fam = TaskFamily::ALL.iter().position(|f| *f == family).unwrap_or(0);
    for attempt in 0..64 {
        let seed = episode_seed(cfg.seed, (fam * 1_000_000 + trial) * 64 + attempt);
        let Ok(scene) = sample_scene(family, cfg.difficulty, seed) else { continue };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
        let rig = sample_camera_rig(&RandomizationShell::new(cfg.shell, CameraRole::Front), cfg.image_size, &mut rng);
        let w = World::new(&scene);
        if render_stereo(&scene, &rig, &w.objects, &w.robot.pose, w.robot.open).is_ok() {
            return Ok((scene, rig, seed));
        }
    }
    Err(SvlaError::Placement(format!("no realizable trial {trial} for {}", family.name())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub family: TaskFamily,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fingerprint: String,
    pub families: Vec<FamilyResult>,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
}

fn rate(s: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        s as f64 / n as f64
    }
}

/// Evaluates `make(trial_seed)` policies on every family. Trials run in
/// parallel; aggregation is in trial order.
pub fn eval_suite<C, F>(label: &str, cfg: &EvalConfig, exec: Execution, make: F) -> Result<EvalReport, SvlaError>
where
    C: ChunkPolicy,
    F: Fn(u64) -> C + Sync + Send,
{
    let jobs: Vec<(TaskFamily, usize)> =
        cfg.families.iter().flat_map(|&f| (0..cfg.trials_per_family).map(move |t| (f, t))).collect();
    let outcomes = map_indices(exec, jobs.len(), |i| {
        let (family, trial) = jobs[i];
        let (scene, rig, seed) = trial_setup(cfg, family, trial)?;
        let mut p = make(seed);
        rollout(&mut p, &scene, &rig, cfg.max_steps)
    });
    let mut families: Vec<FamilyResult> = Vec::new();
    for (&(family, _), out) in jobs.iter().zip(outcomes) {
        let out = out?;
        if families.last().map(|f| f.family) != Some(family) {
            families.push(FamilyResult { family, trials: 0, successes: 0, rate: 0.0, reasons: BTreeMap::new() });
        }
        let f = families.last_mut().expect("pushed above");
        f.trials += 1;
        if out.success {
            f.successes += 1;
        } else if let Some(r) = out.reason {
            *f.reasons.entry(r.name().to_string()).or_default() += 1;
        }
    }
    for f in &mut families {
        f.rate = rate(f.successes, f.trials);
    }
    let trials = families.iter().map(|f| f.trials).sum();
    let successes = families.iter().map(|f| f.successes).sum();
    Ok(EvalReport { label: label.to_string(), fingerprint: cfg.fingerprint(), families, trials, successes, rate: rate(successes, trials) })
}

/// `mean(|pred - gt| / gt)` over masked pixels.
pub fn absrel(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64, SvlaError> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(SvlaError::Shape(format!("absrel inputs of lengths {}, {}, {}", pred.len(), gt.len(), mask.len())));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if mask[i] {
            if gt[i] <= 0.0 {
                return Err(SvlaError::Dataset(format!("non-positive ground-truth depth {} at pixel {i}", gt[i])));
            }
            sum += (pred[i] - gt[i]).abs() / gt[i];
            n += 1;
        }
    }
    if n == 0 {
        return Err(SvlaError::Dataset("absrel over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Pixels whose ground-truth depth is positive and at most `max_depth`.
pub fn depth_mask(depth: &[f32], max_depth: f64) -> Vec<bool> {
    depth.iter().map(|&z| z > 0.0 && (z as f64) <= max_depth).collect()
}

/// Depth map in meters predicted by `net` for one frame.
pub fn predict_depth(net: &DepthNet, store: &ParamStore<f32>, frame: &StereoFrame) -> Result<Vec<f64>, SvlaError> {
    let (h, w) = (frame.height, frame.width);
    let mut g = Graph::new();
    let l = g.constant(image_tensor(&frame.left, h, w));
    let r = g.constant(image_tensor(&frame.right, h, w));
    let d = net.predict_disparity(&mut g, store, l, r)?;
    let fb = frame.rig.focal * frame.rig.baseline;
    Ok(g.value(d).data().iter().map(|&d| fb / (d as f64).max(MIN_DISPARITY)).collect())
}

/// AbsRel pooled over the masked pixels of all frames.
pub fn depth_absrel(
    net: &DepthNet,
    store: &ParamStore<f32>,
    frames: &[&StereoFrame],
    max_depth: f64,
    exec: Execution,
) -> Result<f64, SvlaError> {
    let per = map_indices(exec, frames.len(), |i| -> Result<(f64, usize), SvlaError> {
        let f = frames[i];
        let pred = predict_depth(net, store, f)?;
        let gt: Vec<f64> = f.depth.iter().map(|&z| z as f64).collect();
        let mask = depth_mask(&f.depth, max_depth);
        let n = mask.iter().filter(|&&m| m).count();
        Ok((absrel(&pred, &gt, &mask)? * n as f64, n))
    });
    let mut sum = 0.0;
    let mut n = 0;
    for r in per {
        let (s, k) = r?;
        sum += s;
        n += k;
    }
    if n == 0 {
        return Err(SvlaError::Dataset("no valid depth pixels".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::sim::FailureReason;

    #[test]
    fn absrel_closed_forms() {
        let gt = vec![0.5, 0.8, 1.2, 2.0];
        let mask = vec![true, true, true, false];
        assert_eq!(absrel(&gt, &gt, &mask).unwrap(), 0.0);
        let pred: Vec<f64> = gt.iter().map(|z| 1.1 * z).collect();
        assert!((absrel(&pred, &gt, &mask).unwrap() - 0.1).abs() < 1e-12);
        assert!(absrel(&pred, &gt, &[false; 4]).is_err());
    }

    #[test]
    fn expert_through_the_scorer_succeeds() {
        let cfg = EvalConfig { families: vec![TaskFamily::Bar0], trials_per_family: 3, ..EvalConfig::default() };
        let r = eval_suite("expert", &cfg, Execution::Sequential, |_| ScriptedPolicy::new(Vec::new())).unwrap();
        assert_eq!(r.successes, 0);
        let (scene, rig, _) = trial_setup(&cfg, TaskFamily::Bar0, 0).unwrap();
        let out = rollout(&mut ScriptedPolicy::expert(&scene).unwrap(), &scene, &rig, 200).unwrap();
        assert!(out.success, "{out:?}");
        assert_eq!((out.closes, out.opens), (1, 1));
    }

    #[test]
    fn immediate_close_is_early_close() {
        let cfg = EvalConfig::default();
        let (scene, rig, _) = trial_setup(&cfg, TaskFamily::General, 0).unwrap();
        let mut p = ScriptedPolicy::new(vec![[0.0, 0.0, 0.0, 0.0, 0.0]; 4]);
        let out = rollout(&mut p, &scene, &rig, 64).unwrap();
        assert_eq!(out.reason, Some(FailureReason::EarlyClose));
    }

    #[test]
    fn empty_suite_and_determinism() {
        let cfg = EvalConfig { trials_per_family: 0, ..EvalConfig::default() };
        let r = eval_suite("none", &cfg, Execution::Parallel, |_| ScriptedPolicy::new(Vec::new())).unwrap();
        assert_eq!((r.trials, r.rate), (0, 0.0));
        assert!(r.families.is_empty());
        let cfg = EvalConfig { families: vec![TaskFamily::Small], trials_per_family: 4, ..EvalConfig::default() };
        let a = eval_suite("x", &cfg, Execution::Parallel, |_| ScriptedPolicy::new(vec![[0.01, 0.0, -0.02, 0.0, 1.0]; 30])).unwrap();
        let b = eval_suite("x", &cfg, Execution::Sequential, |_| ScriptedPolicy::new(vec![[0.01, 0.0, -0.02, 0.0, 1.0]; 30])).unwrap();
        assert_eq!(a, b);
    }
}
