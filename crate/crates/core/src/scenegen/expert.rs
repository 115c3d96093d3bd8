//! Scripted pick-and-place expert with phase-boundary keyframes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::CameraRig;
use super::geom::{wrap_half_pi, Vec3};
use super::render::{render_stereo, BBox, StereoFrame};
use super::scene::{ObjectSpec, Pose, SceneSpec, Shape};
use super::sim::{Action, RolloutOutcome, World, MAX_TRANSLATION, MAX_YAW_STEP, REACH_X, REACH_Y, REACH_Z, STATE_DIM};
use crate::auxtasks::{interaction_region, sample_depth_queries, DepthMode, DepthQuery, DEFAULT_QUERIES_PER_FRAME, DEFAULT_REGION_MARGIN};
use crate::codec::DepthCodec;
use crate::SvlaError;

pub const CHUNK_LEN: usize = 8;
pub const APPROACH_CLEARANCE: f64 = 0.08;
pub const GRASP_DEPTH_FRACTION: f64 = 0.4;
pub const CARRY_HEIGHT: f64 = 0.15;
const CLOSE_STEPS: usize = 2;
const ALIGN_SKIP: f64 = 1.0 * std::f64::consts::PI / 180.0;
const MAX_EXPERT_STEPS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Approach,
    Align,
    Descend,
    Close,
    Lift,
    Transport,
    Open,
}

/// Pose at the end of a phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub phase: Phase,
    /// Number of actions executed when the phase ends.
    pub step: usize,
    pub pose: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub t: usize,
    pub frame: StereoFrame,
    pub state: [f64; STATE_DIM],
    pub chunk: Vec<Action>,
    pub next_keyframe: [f64; 4],
    pub target_bbox: BBox,
    pub region: BBox,
    pub queries: Vec<DepthQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub scene: SceneSpec,
    pub rig: CameraRig,
    pub steps: Vec<EpisodeStep>,
    /// Every executed action, in order.
    pub actions: Vec<Action>,
    /// `actions.len() + 1` robot states, starting with the initial one.
    pub states: Vec<[f64; STATE_DIM]>,
    pub keyframes: Vec<Keyframe>,
    pub outcome: RolloutOutcome,
}

impl EpisodeRecord {
    /// Re-executes the recorded actions and returns the resulting state trace.
    pub fn replay_states(&self) -> Vec<[f64; STATE_DIM]> {
        let mut w = World::new(&self.scene);
        let mut out = vec![w.robot.to_vec()];
        for a in &self.actions {
            w.step(a);
            out.push(w.robot.to_vec());
        }
        out
    }
}

fn pose4(p: &Pose) -> [f64; 4] {
    [p.position.x, p.position.y, p.position.z, p.yaw]
}

/// Jaw yaw closing across the object's short axis, chosen nearest to `current`.
pub fn grasp_yaw(obj: &ObjectSpec, obj_yaw: f64, current: f64) -> Option<f64> {
    match obj.shape {
        Shape::Disc => None,
        Shape::Bar => Some(current + wrap_half_pi(obj_yaw + std::f64::consts::FRAC_PI_2 - current)),
        Shape::Cube => {
            let q = std::f64::consts::FRAC_PI_2;
            let d = (obj_yaw - current + q / 2.0).rem_euclid(q) - q / 2.0;
            Some(current + d)
        }
    }
}

fn toward(from: f64, to: f64, cap: f64) -> f64 {
    (to - from).clamp(-cap, cap)
}

/// Action moving the tip toward `goal` with a norm-limited translation.
fn move_action(tip: &Pose, goal: Vec3, yaw: f64, grip: f64) -> Action {
    let d = goal - tip.position;
    let n = d.norm();
    let d = if n > MAX_TRANSLATION { d * (MAX_TRANSLATION / n) } else { d };
    [d.x, d.y, d.z, toward(tip.yaw, yaw, MAX_YAW_STEP), grip]
}

fn reachable(p: Vec3) -> bool {
    p.x.abs() <= REACH_X && p.y.abs() <= REACH_Y && (0.0..=REACH_Z).contains(&p.z)
}

/// Runs the scripted expert in a fresh world. Returns the actions, the
/// phase-end keyframes and the final world.
pub fn plan_expert(scene: &SceneSpec) -> Result<(Vec<Action>, Vec<Keyframe>, World), SvlaError> {
    let mut w = World::new(scene);
    let mut actions = Vec::new();
    let mut keyframes = Vec::new();
    let target = scene.target_object();
    let tpose = w.objects[scene.target];
    let above = Vec3::new(tpose.position.x, tpose.position.y, target.dims.z + APPROACH_CLEARANCE);
    let grasp_z = GRASP_DEPTH_FRACTION * target.dims.z;
    let place = Vec3::new(scene.pad_center.x, scene.pad_center.y, CARRY_HEIGHT);
    for p in [above, place] {
        if !reachable(p) {
            return Err(SvlaError::Infeasible(format!("waypoint {p:?} out of reach")));
        }
    }

    let run = |w: &mut World, actions: &mut Vec<Action>, goal: Vec3, yaw: f64, grip: f64| -> Result<(), SvlaError> {
        loop {
            let tip = w.robot.pose;
            if (tip.position - goal).norm() < 1e-12 && (tip.yaw - yaw).abs() < 1e-12 {
                return Ok(());
            }
            if actions.len() >= MAX_EXPERT_STEPS {
                return Err(SvlaError::Infeasible("expert step budget exhausted".into()));
            }
            let a = move_action(&tip, goal, yaw, grip);
            w.step(&a);
            actions.push(a);
        }
    };
    let mark = |w: &World, actions: &[Action], keyframes: &mut Vec<Keyframe>, phase: Phase| {
        keyframes.push(Keyframe { phase, step: actions.len(), pose: pose4(&w.robot.pose) });
    };

    let yaw0 = w.robot.pose.yaw;
    run(&mut w, &mut actions, above, yaw0, 1.0)?;
    mark(&w, &actions, &mut keyframes, Phase::Approach);
    let yaw = match grasp_yaw(target, tpose.yaw, yaw0) {
        Some(g) if (g - yaw0).abs() >= ALIGN_SKIP => {
            run(&mut w, &mut actions, above, g, 1.0)?;
            mark(&w, &actions, &mut keyframes, Phase::Align);
            g
        }
        _ => yaw0,
    };
    run(&mut w, &mut actions, Vec3::new(above.x, above.y, grasp_z), yaw, 1.0)?;
    mark(&w, &actions, &mut keyframes, Phase::Descend);
    for _ in 0..CLOSE_STEPS {
        let a = [0.0, 0.0, 0.0, 0.0, 0.0];
        w.step(&a);
        actions.push(a);
    }
    mark(&w, &actions, &mut keyframes, Phase::Close);
    run(&mut w, &mut actions, Vec3::new(above.x, above.y, CARRY_HEIGHT), yaw, 0.0)?;
    mark(&w, &actions, &mut keyframes, Phase::Lift);
    run(&mut w, &mut actions, place, yaw, 0.0)?;
    mark(&w, &actions, &mut keyframes, Phase::Transport);
    let a = [0.0, 0.0, 0.0, 0.0, 1.0];
    w.step(&a);
    actions.push(a);
    mark(&w, &actions, &mut keyframes, Phase::Open);
    Ok((actions, keyframes, w))
}

/// Pixel box around the projected corners of an object's bounding cuboid,
/// clipped to the image. Used when the object is fully occluded.
pub fn projected_bbox(rig: &CameraRig, obj: &ObjectSpec, pose: &Pose) -> BBox {
    let (s, c) = pose.yaw.sin_cos();
    let mut b: Option<BBox> = None;
    for i in [-0.5, 0.5] {
        for j in [-0.5, 0.5] {
            for k in [0.0, 1.0] {
                let (lx, ly) = (i * obj.dims.x, j * obj.dims.y);
                let p = pose.position + Vec3::new(c * lx - s * ly, s * lx + c * ly, k * obj.dims.z);
                if let Some((u, v, _)) = rig.project_left(p) {
                    let pb = BBox::new(u, v, u, v);
                    b = Some(b.map_or(pb, |b| b.union(&pb)));
                }
            }
        }
    }
    let b = b.unwrap_or(BBox::new(0.0, 0.0, 1.0, 1.0));
    let (w, h) = (rig.width as f64, rig.height as f64);
    let x1 = b.x1.floor().clamp(0.0, w - 1.0);
    let y1 = b.y1.floor().clamp(0.0, h - 1.0);
    BBox::new(x1, y1, b.x2.ceil().clamp(x1 + 1.0, w), b.y2.ceil().clamp(y1 + 1.0, h))
}

/// Target box from the segmentation if visible, else from projection.
pub fn target_bbox(frame: &StereoFrame, scene: &SceneSpec, objects: &[Pose]) -> BBox {
    frame.object_bboxes[scene.target]
        .unwrap_or_else(|| projected_bbox(&frame.rig, scene.target_object(), &objects[scene.target]))
}

/// Expert demonstration recorded at chunk boundaries.
pub fn expert_rollout(scene: &SceneSpec, rig: &CameraRig, rng: &mut impl Rng) -> Result<EpisodeRecord, SvlaError> {
    let (actions, keyframes, final_world) = plan_expert(scene)?;
    let codec = DepthCodec::default();
    let mut w = World::new(scene);
    let mut states = vec![w.robot.to_vec()];
    let mut steps = Vec::new();
    let pad: Action = [0.0, 0.0, 0.0, 0.0, 1.0];
    for t in 0..actions.len() {
        if t % CHUNK_LEN == 0 {
            let frame = render_stereo(scene, rig, &w.objects, &w.robot.pose, w.robot.open)?;
            let chunk: Vec<Action> = (t..t + CHUNK_LEN).map(|i| actions.get(i).copied().unwrap_or(pad)).collect();
            let next_keyframe = keyframes.iter().find(|k| k.step > t).map_or(keyframes[keyframes.len() - 1].pose, |k| k.pose);
            let tb = target_bbox(&frame, scene, &w.objects);
            let region = interaction_region(frame.gripper_bbox.as_ref(), &tb, DEFAULT_REGION_MARGIN, frame.width, frame.height);
            let queries = sample_depth_queries(
                DepthMode::Interaction,
                &region,
                &tb,
                &frame.depth,
                frame.width,
                frame.height,
                DEFAULT_QUERIES_PER_FRAME,
                &codec,
                rng,
            );
            steps.push(EpisodeStep { t, state: w.robot.to_vec(), frame, chunk, next_keyframe, target_bbox: tb, region, queries });
        }
        w.step(&actions[t]);
        states.push(w.robot.to_vec());
    }
    let outcome = final_world.outcome().unwrap_or_else(|| w.clone().time_out());
    Ok(EpisodeRecord { scene: scene.clone(), rig: *rig, steps, actions, states, keyframes, outcome })
}
