use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geom::Vec3;
use crate::SvlaError;

/// Half extents of the reachable workspace on the table plane (meters).
pub const WORKSPACE_HALF_X: f64 = 0.25;
pub const WORKSPACE_HALF_Y: f64 = 0.20;
/// Side length of the square placement pad.
pub const PAD_SIZE: f64 = 0.08;
const PLACEMENT_RETRIES: usize = 1000;
const EDGE_MARGIN: f64 = 0.02;
const GAP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Bar,
    Cube,
    Disc,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Bar, Shape::Cube, Shape::Disc];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Bar => "bar",
            Shape::Cube => "cube",
            Shape::Disc => "disc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    /// Range of the largest object dimension (meters).
    pub fn max_dim_range(self) -> (f64, f64) {
        match self {
            SizeClass::Small => (0.01, 0.02),
            SizeClass::Medium => (0.03, 0.05),
            SizeClass::Large => (0.05, 0.07),
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.85, 0.15, 0.12]),
    ("green", [0.15, 0.70, 0.20]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.90, 0.85, 0.15]),
    ("purple", [0.55, 0.20, 0.75]),
    ("orange", [0.95, 0.55, 0.10]),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub size_class: SizeClass,
    /// Extent along the object's local x (long axis), local y, and height.
    pub dims: Vec3,
    /// Planar orientation of the long axis, degrees from world x.
    pub yaw_deg: f64,
    /// Center of the footprint on the table plane (z = 0).
    pub position: Vec3,
    pub color: usize,
}

impl ObjectSpec {
    pub fn yaw(&self) -> f64 {
        self.yaw_deg.to_radians()
    }

    /// Radius of a circle containing the footprint.
    pub fn footprint_radius(&self) -> f64 {
        match self.shape {
            Shape::Disc => self.dims.x / 2.0,
            _ => 0.5 * (self.dims.x * self.dims.x + self.dims.y * self.dims.y).sqrt(),
        }
    }

    pub fn max_dim(&self) -> f64 {
        self.dims.x.max(self.dims.y).max(self.dims.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    General,
    Bar0,
    Bar45,
    Bar90,
    Medium,
    Small,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] =
        [TaskFamily::General, TaskFamily::Bar0, TaskFamily::Bar45, TaskFamily::Bar90, TaskFamily::Medium, TaskFamily::Small];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::General => "general",
            TaskFamily::Bar0 => "bar-0",
            TaskFamily::Bar45 => "bar-45",
            TaskFamily::Bar90 => "bar-90",
            TaskFamily::Medium => "medium",
            TaskFamily::Small => "small",
        }
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown task family `{s}` (general|bar-0|bar-45|bar-90|medium|small)"))
    }
}

/// End-effector pose: fingertip center position and jaw-axis yaw.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub family: TaskFamily,
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    pub target: usize,
    /// Center of the square placement pad on the table.
    pub pad_center: Vec3,
    pub instruction: String,
    pub gripper_start: Pose,
}

impl SceneSpec {
    pub fn target_object(&self) -> &ObjectSpec {
        &self.objects[self.target]
    }

    pub fn on_pad(&self, p: Vec3) -> bool {
        (p.x - self.pad_center.x).abs() <= PAD_SIZE / 2.0 && (p.y - self.pad_center.y).abs() <= PAD_SIZE / 2.0
    }
}

pub fn instruction(color: usize, shape: Shape) -> String {
    format!("put the {} {} on pad", COLORS[color].0, shape.word())
}

fn sample_dims(shape: Shape, size: SizeClass, rng: &mut impl Rng) -> Vec3 {
    let (lo, hi) = size.max_dim_range();
    let m = rng.random_range(lo..=hi);
    match shape {
        Shape::Bar => {
            let w = (m * rng.random_range(0.3..0.45)).max(0.006);
            Vec3::new(m, w, w.max(0.012).min(m))
        }
        Shape::Cube => Vec3::new(m, m, m),
        Shape::Disc => Vec3::new(m, m, (0.4 * m).max(0.008)),
    }
}

fn sample_object(
    shape: Shape,
    size: SizeClass,
    yaw_deg: Option<f64>,
    color: usize,
    rng: &mut impl Rng,
) -> ObjectSpec {
    let dims = sample_dims(shape, size, rng);
    let yaw_deg = yaw_deg.unwrap_or_else(|| rng.random_range(-90.0..90.0));
    ObjectSpec { shape, size_class: size, dims, yaw_deg, position: Vec3::default(), color }
}

fn place(radius: f64, taken: &[(Vec3, f64)], rng: &mut impl Rng) -> Option<Vec3> {
    let hx = WORKSPACE_HALF_X - radius - EDGE_MARGIN;
    let hy = WORKSPACE_HALF_Y - radius - EDGE_MARGIN;
    if hx <= 0.0 || hy <= 0.0 {
        return None;
    }
    for _ in 0..PLACEMENT_RETRIES {
        let p = Vec3::new(rng.random_range(-hx..=hx), rng.random_range(-hy..=hy), 0.0);
        if taken.iter().all(|&(q, r)| ((p - q).norm()) >= radius + r + GAP) {
            return Some(p);
        }
    }
    None
}

/// Samples a scene. `difficulty` in `0..=3` sets the maximum distractor count
/// to `1 + difficulty`; the actual count is uniform in `1..=1 + difficulty`.
pub fn sample_scene(family: TaskFamily, difficulty: usize, seed: u64) -> Result<SceneSpec, SvlaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0_e5ce);
    let target_color = rng.random_range(0..COLORS.len());
    let target = match family {
        TaskFamily::Bar0 => sample_object(Shape::Bar, SizeClass::Medium, Some(0.0), target_color, &mut rng),
        TaskFamily::Bar45 => sample_object(Shape::Bar, SizeClass::Medium, Some(45.0), target_color, &mut rng),
        TaskFamily::Bar90 => sample_object(Shape::Bar, SizeClass::Medium, Some(90.0), target_color, &mut rng),
        TaskFamily::General => {
            let shape = Shape::ALL[rng.random_range(0..3)];
            let size = if rng.random_bool(0.5) { SizeClass::Medium } else { SizeClass::Large };
            sample_object(shape, size, None, target_color, &mut rng)
        }
        TaskFamily::Medium => {
            let shape = Shape::ALL[rng.random_range(0..3)];
            sample_object(shape, SizeClass::Medium, None, target_color, &mut rng)
        }
        TaskFamily::Small => {
            let shape = Shape::ALL[rng.random_range(0..3)];
            sample_object(shape, SizeClass::Small, None, target_color, &mut rng)
        }
    };
    let n_distractors = rng.random_range(1..=1 + difficulty.min(3));
    let mut objects = vec![target];
    for _ in 0..n_distractors {
        let shape = Shape::ALL[rng.random_range(0..3)];
        let size = [SizeClass::Small, SizeClass::Medium, SizeClass::Large][rng.random_range(0..3)];
        // Distractors never share the target's color, so the instruction is unambiguous.
        let color = (target_color + rng.random_range(1..COLORS.len())) % COLORS.len();
        objects.push(sample_object(shape, size, None, color, &mut rng));
    }

    let pad_radius = PAD_SIZE / std::f64::consts::SQRT_2;
    let mut taken: Vec<(Vec3, f64)> = Vec::new();
    let pad_center = place(pad_radius, &taken, &mut rng)
        .ok_or_else(|| SvlaError::Placement(format!("pad, seed {seed}")))?;
    taken.push((pad_center, pad_radius));
    for (i, o) in objects.iter_mut().enumerate() {
        let r = o.footprint_radius();
        o.position = place(r, &taken, &mut rng).ok_or_else(|| SvlaError::Placement(format!("object {i}, seed {seed}")))?;
        taken.push((o.position, r));
    }

    // Shuffle so the target index is not always 0.
    let target_pos = rng.random_range(0..objects.len());
    objects.swap(0, target_pos);

    let gripper_start = Pose {
        position: Vec3::new(rng.random_range(-0.05..=0.05), rng.random_range(-0.05..=0.05), rng.random_range(0.18..=0.22)),
        yaw: 0.0,
    };
    let t = &objects[target_pos];
    Ok(SceneSpec {
        family,
        seed,
        instruction: instruction(t.color, t.shape),
        objects,
        target: target_pos,
        pad_center,
        gripper_start,
    })
}
