//! Kinematic tabletop world: delta end-effector control, jaw grasp checks,
//! and single-attempt outcome scoring.

use serde::{Deserialize, Serialize};

use super::geom::Vec3;
use super::mesh::{FINGER_WIDTH, MAX_APERTURE};
use super::scene::{ObjectSpec, Pose, SceneSpec, Shape};

/// Action layout: `[dx, dy, dz, dyaw, grip]`, grip in `[0, 1]` with values
/// `>= 0.5` commanding open.
pub const ACTION_DIM: usize = 5;
/// State layout: `[x, y, z, yaw, open_fraction]`.
pub const STATE_DIM: usize = 5;
pub const MAX_TRANSLATION: f64 = 0.03;
pub const MAX_YAW_STEP: f64 = 0.25;
/// Open fraction change per control step.
pub const GRIP_SPEED: f64 = 0.5;
pub const LIFT_FOR_GRASP: f64 = 0.05;
/// Fraction of object height below which the fingertips must be at close time.
pub const GRASP_BAND: f64 = 0.8;
pub const REACH_X: f64 = 0.4;
pub const REACH_Y: f64 = 0.35;
pub const REACH_Z: f64 = 0.4;

pub type Action = [f64; ACTION_DIM];

pub fn clip_action(a: &Action) -> Action {
    [
        a[0].clamp(-MAX_TRANSLATION, MAX_TRANSLATION),
        a[1].clamp(-MAX_TRANSLATION, MAX_TRANSLATION),
        a[2].clamp(-MAX_TRANSLATION, MAX_TRANSLATION),
        a[3].clamp(-MAX_YAW_STEP, MAX_YAW_STEP),
        a[4].clamp(0.0, 1.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    WrongObject,
    EarlyClose,
    MissedGrasp,
    Drop,
    Timeout,
    RuleViolation,
}

impl FailureReason {
    pub fn name(self) -> &'static str {
        match self {
            FailureReason::WrongObject => "wrong-object",
            FailureReason::EarlyClose => "early-close",
            FailureReason::MissedGrasp => "missed-grasp",
            FailureReason::Drop => "drop",
            FailureReason::Timeout => "timeout",
            FailureReason::RuleViolation => "rule-violation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub success: bool,
    pub reason: Option<FailureReason>,
    pub steps: usize,
    pub closes: usize,
    pub opens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GripEvent {
    None,
    Close,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose,
    pub open: f64,
    /// Latched gripper command: true once a close has been commanded.
    pub closed_cmd: bool,
}

impl RobotState {
    pub fn to_vec(&self) -> [f64; STATE_DIM] {
        let p = self.pose.position;
        [p.x, p.y, p.z, self.pose.yaw, self.open]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Grasp {
    object: usize,
    /// Object position relative to the fingertips in the gripper frame.
    local_offset: Vec3,
    yaw_offset: f64,
    start_z: f64,
}

/// Mutable world. Terminal once `outcome()` is `Some`.
#[derive(Debug, Clone)]
pub struct World {
    pub scene: SceneSpec,
    pub objects: Vec<Pose>,
    pub robot: RobotState,
    grasp: Option<Grasp>,
    max_lift: f64,
    closes: usize,
    opens: usize,
    steps: usize,
    pending_failure: Option<FailureReason>,
    outcome: Option<RolloutOutcome>,
}

fn rotate_z(v: Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Object extents along and across the jaw axis for gripper yaw `yaw`.
pub fn jaw_extents(obj: &ObjectSpec, obj_yaw: f64, yaw: f64) -> (f64, f64) {
    match obj.shape {
        Shape::Disc => (obj.dims.x, obj.dims.x),
        _ => {
            let d = obj_yaw - yaw;
            let (s, c) = (d.sin().abs(), d.cos().abs());
            (obj.dims.x * c + obj.dims.y * s, obj.dims.x * s + obj.dims.y * c)
        }
    }
}

/// Whether jaws at `tip` with yaw `yaw` and aperture `aperture` hold `obj`.
pub fn grasp_ok(obj: &ObjectSpec, obj_pose: &Pose, tip: &Pose, aperture: f64) -> bool {
    let (ext_a, ext_w) = jaw_extents(obj, obj_pose.yaw, tip.yaw);
    let rel = rotate_z(obj_pose.position - tip.position, -tip.yaw);
    let dz = tip.position.z - obj_pose.position.z;
    aperture >= ext_a
        && rel.x.abs() <= aperture / 2.0
        && rel.y.abs() <= ext_w / 2.0 + FINGER_WIDTH / 2.0
        && (0.0..=GRASP_BAND * obj.dims.z).contains(&dz)
}

impl World {
    pub fn new(scene: &SceneSpec) -> Self {
        let objects = scene.objects.iter().map(|o| Pose { position: o.position, yaw: o.yaw() }).collect();
        Self {
            scene: scene.clone(),
            objects,
            robot: RobotState { pose: scene.gripper_start, open: 1.0, closed_cmd: false },
            grasp: None,
            max_lift: 0.0,
            closes: 0,
            opens: 0,
            steps: 0,
            pending_failure: None,
            outcome: None,
        }
    }

    pub fn outcome(&self) -> Option<RolloutOutcome> {
        self.outcome
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grasped(&self) -> Option<usize> {
        self.grasp.map(|g| g.object)
    }

    fn finish(&mut self, success: bool, reason: Option<FailureReason>) {
        self.outcome =
            Some(RolloutOutcome { success, reason, steps: self.steps, closes: self.closes, opens: self.opens });
    }

    /// Ends the episode as a timeout (or an earlier pending failure).
    pub fn time_out(&mut self) -> RolloutOutcome {
        if self.outcome.is_none() {
            let reason = self.pending_failure.unwrap_or(FailureReason::Timeout);
            self.finish(false, Some(reason));
        }
        self.outcome.expect("set above")
    }

    /// Applies one clipped action. No-op once terminal.
    pub fn step(&mut self, action: &Action) -> GripEvent {
        if self.outcome.is_some() {
            return GripEvent::None;
        }
        let a = clip_action(action);
        self.steps += 1;
        let p = &mut self.robot.pose;
        p.position = Vec3::new(
            (p.position.x + a[0]).clamp(-REACH_X, REACH_X),
            (p.position.y + a[1]).clamp(-REACH_Y, REACH_Y),
            (p.position.z + a[2]).clamp(0.0, REACH_Z),
        );
        p.yaw += a[3];
        if let Some(g) = self.grasp {
            let tip = self.robot.pose;
            let obj = &mut self.objects[g.object];
            obj.position = tip.position + rotate_z(g.local_offset, tip.yaw);
            obj.yaw = tip.yaw + g.yaw_offset;
            self.max_lift = self.max_lift.max(obj.position.z - g.start_z);
        }

        let want_closed = a[4] < 0.5;
        let event = match (self.robot.closed_cmd, want_closed) {
            (false, true) => GripEvent::Close,
            (true, false) => GripEvent::Open,
            _ => GripEvent::None,
        };
        self.robot.closed_cmd = want_closed;
        match event {
            GripEvent::Close => self.on_close(),
            GripEvent::Open => self.on_open(),
            GripEvent::None => {}
        }
        let target_open = if want_closed { 0.0 } else { 1.0 };
        let o = &mut self.robot.open;
        *o = if *o < target_open { (*o + GRIP_SPEED).min(target_open) } else { (*o - GRIP_SPEED).max(target_open) };
        if let Some(g) = self.grasp {
            let (ext_a, _) = jaw_extents(&self.scene.objects[g.object], self.objects[g.object].yaw, self.robot.pose.yaw);
            *o = o.max(ext_a / MAX_APERTURE);
        }
        event
    }

    fn on_close(&mut self) {
        self.closes += 1;
        if self.closes > 1 {
            self.finish(false, Some(FailureReason::RuleViolation));
            return;
        }
        let tip = self.robot.pose;
        let aperture = self.robot.open * MAX_APERTURE;
        let candidate = (0..self.objects.len())
            .filter(|&i| grasp_ok(&self.scene.objects[i], &self.objects[i], &tip, aperture))
            .min_by(|&i, &j| {
                let di = (self.objects[i].position - tip.position).norm();
                let dj = (self.objects[j].position - tip.position).norm();
                di.total_cmp(&dj)
            });
        match candidate {
            Some(i) => {
                let obj = self.objects[i];
                self.grasp = Some(Grasp {
                    object: i,
                    local_offset: rotate_z(obj.position - tip.position, -tip.yaw),
                    yaw_offset: obj.yaw - tip.yaw,
                    start_z: obj.position.z,
                });
                if i != self.scene.target {
                    self.pending_failure = Some(FailureReason::WrongObject);
                }
            }
            None => {
                let top = self.objects[self.scene.target].position.z + self.scene.target_object().dims.z;
                self.pending_failure =
                    Some(if tip.position.z > top { FailureReason::EarlyClose } else { FailureReason::MissedGrasp });
            }
        }
    }

    fn on_open(&mut self) {
        self.opens += 1;
        let Some(g) = self.grasp.take() else {
            return;
        };
        let obj = &mut self.objects[g.object];
        obj.position.z = 0.0;
        if g.object != self.scene.target {
            self.finish(false, Some(FailureReason::WrongObject));
        } else if self.max_lift >= LIFT_FOR_GRASP - 1e-9 && self.scene.on_pad(obj.position) {
            self.finish(true, None);
        } else {
            self.finish(false, Some(FailureReason::Drop));
        }
    }
}
