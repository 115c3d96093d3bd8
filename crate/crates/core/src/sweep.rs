//! Training-and-evaluation sweeps: stereo versus monocular depth heads,
//! policy ablation arms sharing seeds, and camera-shell robustness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use svla_numerics::{adam_step, clip_grad_norm, AdamConfig, Graph, OptimState, ParamStore};

use crate::auxtasks::DepthMode;
use crate::eval::{depth_absrel, eval_suite, EvalConfig, EvalReport, LearnedPolicy};
use crate::fusion::{AblationConfig, FusionMode, GeoFeature};
use crate::geoenc::{DepthNet, GeoConfig};
use crate::nn::Init;
use crate::par::{map_indices, Execution};
use crate::policy::image_tensor;
use crate::scenegen::camera::ShellLevel;
use crate::scenegen::render::StereoFrame;
use crate::trainer::{sum_into, TrainConfig, TrainData, Trainer};
use crate::SvlaError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthTrainConfig {
    pub geo: GeoConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DepthTrainConfig {
    fn default() -> Self {
        Self { geo: GeoConfig::default(), steps: 400, batch_size: 4, lr: 2e-3, grad_clip: 1.0, seed: 0 }
    }
}

/// Trains a disparity head on `frames` with the relative disparity loss.
/// Returns the network, its weights and the per-step mean batch loss.
pub fn train_depth(
    cfg: &DepthTrainConfig,
    frames: &[&StereoFrame],
    mono: bool,
    exec: Execution,
) -> Result<(DepthNet, ParamStore<f32>, Vec<f64>), SvlaError> {
    if frames.is_empty() || cfg.batch_size == 0 {
        return Err(SvlaError::Config("depth training needs frames and a positive batch size".into()));
    }
    let mut store = ParamStore::new();
    let net = {
        let mut init = Init::new(&mut store, cfg.seed);
        DepthNet::new(&mut init, "depth", cfg.geo, mono)
    };
    let mut optim = OptimState::new(&store, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64 + 1);
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rand::Rng::random_range(&mut rng, 0..frames.len())).collect();
        let results = map_indices(exec, picks.len(), |i| {
            let f = frames[picks[i]];
            let mut g = Graph::new();
            let l = g.constant(image_tensor(&f.left, f.height, f.width));
            let r = g.constant(image_tensor(&f.right, f.height, f.width));
            let mask: Vec<bool> = f.depth.iter().map(|&z| z > 0.0).collect();
            let loss = net.disparity_loss(&mut g, &store, l, r, &f.disparity, &mask)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(SvlaError::NonFinite(format!("disparity loss {value} at depth step {step}")));
            }
            let scaled = g.scale(loss, 1.0 / picks.len() as f64);
            Ok((value, g.backward(scaled)?.into_params()))
        });
        let mut grads = Default::default();
        let mut total = 0.0;
        for r in results {
            let (v, g) = r?;
            total += v;
            sum_into(&mut grads, g);
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        adam_step(&mut store, &grads, &mut optim)?;
        curve.push(total / picks.len() as f64);
    }
    Ok((net, store, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthComparison {
    pub stereo_absrel: f64,
    pub mono_absrel: f64,
    pub train_frames: usize,
    pub test_frames: usize,
    pub stereo_curve: Vec<f64>,
    pub mono_curve: Vec<f64>,
}

/// Trains stereo and monocular heads with identical seeds and budgets, then
/// scores both on held-out frames with depth up to `max_depth`.
pub fn compare_depth(
    cfg: &DepthTrainConfig,
    train: &[&StereoFrame],
    test: &[&StereoFrame],
    max_depth: f64,
    exec: Execution,
) -> Result<DepthComparison, SvlaError> {
    let (sn, ss, stereo_curve) = train_depth(cfg, train, false, exec)?;
    let (mn, ms, mono_curve) = train_depth(cfg, train, true, exec)?;
    Ok(DepthComparison {
        stereo_absrel: depth_absrel(&sn, &ss, test, max_depth, exec)?,
        mono_absrel: depth_absrel(&mn, &ms, test, max_depth, exec)?,
        train_frames: train.len(),
        test_frames: test.len(),
        stereo_curve,
        mono_curve,
    })
}

/// Evaluates a trained policy. Each trial seeds its own sampler from the
/// trial seed, so reports do not depend on scheduling.
pub fn evaluate_trainer(t: &Trainer, label: &str, cfg: &EvalConfig, exec: Execution) -> Result<EvalReport, SvlaError> {
    if t.cfg.policy.image_size != cfg.image_size {
        return Err(SvlaError::Config(format!(
            "checkpoint renders {} px but the suite asks for {} px",
            t.cfg.policy.image_size, cfg.image_size
        )));
    }
    eval_suite(label, cfg, exec, |seed| LearnedPolicy {
        policy: &t.policy,
        store: &t.store,
        stats: t.stats,
        sample_steps: cfg.sample_steps,
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5a3c_11d7),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub ablation: AblationConfig,
    pub depth_mode: DepthMode,
}

impl AblationArm {
    pub fn new(name: &str, ablation: AblationConfig, depth_mode: DepthMode) -> Self {
        Self { name: name.to_string(), ablation, depth_mode }
    }
}

/// Feature-by-semantics grid, sequence fusion, the two alternative depth
/// modes and the single-view control. The full model is `vcprime+sem`.
pub fn standard_arms() -> Vec<AblationArm> {
    let full = AblationConfig::default();
    let mut arms = Vec::new();
    for f in GeoFeature::ALL {
        for sem in [false, true] {
            let a = AblationConfig { geo_feature: f, semantics: sem, ..full };
            arms.push(AblationArm::new(&format!("{}{}", f.name(), if sem { "+sem" } else { "" }), a, DepthMode::Interaction));
        }
    }
    arms.push(AblationArm::new("sequence", AblationConfig { fusion: FusionMode::Sequence, ..full }, DepthMode::Interaction));
    arms.push(AblationArm::new("depth-uniform", full, DepthMode::Uniform));
    arms.push(AblationArm::new("depth-none", full, DepthMode::None));
    arms.push(AblationArm::new("single-view", AblationConfig { single_view: true, ..full }, DepthMode::Interaction));
    arms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: AblationArm,
    pub visual_tokens: usize,
    pub parameters: usize,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Trains one arm from `base` (same seed, data and step budget for every arm)
/// and evaluates it. Returns the trainer too, for further sweeps.
pub fn run_arm(
    base: &TrainConfig,
    arm: &AblationArm,
    data: &TrainData,
    eval: &EvalConfig,
    exec: Execution,
) -> Result<(ArmResult, Trainer), SvlaError> {
    let mut cfg = base.clone();
    cfg.policy = cfg.policy.with_ablation(arm.ablation);
    cfg.depth_mode = arm.depth_mode;
    let mut t = Trainer::new(cfg, data.stats, exec)?;
    let metrics = t.run(data, base.steps, None)?;
    // Mean of the last tenth of the curve, so one noisy batch does not dominate.
    let tail = (metrics.len() / 10).max(1);
    let final_loss = if metrics.is_empty() {
        f64::NAN
    } else {
        metrics[metrics.len() - tail..].iter().map(|m| m.total).sum::<f64>() / tail as f64
    };
    let report = evaluate_trainer(&t, &arm.name, eval, exec)?;
    let res = ArmResult {
        arm: arm.clone(),
        visual_tokens: t.policy.cfg.visual_tokens(),
        parameters: t.store.numel(),
        final_loss,
        report,
    };
    Ok((res, t))
}

pub fn run_ablations(base: &TrainConfig, arms: &[AblationArm], data: &TrainData, eval: &EvalConfig, exec: Execution) -> Result<Vec<ArmResult>, SvlaError> {
    arms.iter().map(|a| run_arm(base, a, data, eval, exec).map(|(r, _)| r)).collect()
}

/// Success of `t` under each camera shell, with all other settings fixed.
pub fn robustness_sweep(t: &Trainer, label: &str, eval: &EvalConfig, exec: Execution) -> Result<Vec<EvalReport>, SvlaError> {
    ShellLevel::ALL
        .iter()
        .map(|&shell| {
            let cfg = EvalConfig { shell, ..eval.clone() };
            evaluate_trainer(t, &format!("{label}@{}", shell.name()), &cfg, exec)
        })
        .collect()
}
