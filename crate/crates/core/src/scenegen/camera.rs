use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geom::Vec3;

/// Nominal focal length at 64 px image width.
pub const NOMINAL_FOCAL_64: f64 = 80.0;
/// Nominal stereo baseline (meters).
pub const NOMINAL_BASELINE: f64 = 0.063;
/// Intrinsic/baseline jitter, as a fraction of nominal.
pub const INTRINSIC_JITTER: f64 = 0.05;

/// Rectified stereo pair. The right camera is the left camera translated by
/// `baseline` along the camera x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub position: Vec3,
    pub look_at: Vec3,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera basis in world coordinates (x right, y down, z forward).
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub origin: Vec3,
    pub right: Vec3,
    pub down: Vec3,
    pub forward: Vec3,
}

impl CameraFrame {
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(d.dot(self.right), d.dot(self.down), d.dot(self.forward))
    }

    pub fn to_world(&self, c: Vec3) -> Vec3 {
        self.origin + self.right * c.x + self.down * c.y + self.forward * c.z
    }
}

impl CameraRig {
    pub fn nominal(size: usize) -> Self {
        let scale = size as f64 / 64.0;
        Self {
            focal: NOMINAL_FOCAL_64 * scale,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            baseline: NOMINAL_BASELINE,
            position: CameraRole::Front.anchor(),
            look_at: Vec3::default(),
            width: size,
            height: size,
        }
    }

    pub fn left_frame(&self) -> CameraFrame {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(Vec3::new(0.0, 0.0, 1.0)).normalized();
        let down = forward.cross(right);
        CameraFrame { origin: self.position, right, down, forward }
    }

    pub fn right_frame(&self) -> CameraFrame {
        let mut f = self.left_frame();
        f.origin = f.origin + f.right * self.baseline;
        f
    }

    /// Pixel coordinates (continuous, pixel centers at +0.5) and depth of a
    /// world point in the left view.
    pub fn project_left(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.left_frame().to_camera(p);
        (c.z > 1e-6).then(|| (self.focal * c.x / c.z + self.cx, self.focal * c.y / c.z + self.cy, c.z))
    }

    /// Disparity (pixels) of a surface at depth `z`.
    pub fn disparity_at(&self, z: f64) -> f64 {
        self.focal * self.baseline / z
    }

    /// World point seen by the left camera at pixel `(u, v)` (pixel
    /// coordinates, centers at +0.5) and depth `z`.
    pub fn unproject_left(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let c = Vec3::new((u - self.cx) / self.focal * z, (v - self.cy) / self.focal * z, z);
        self.left_frame().to_world(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShellLevel {
    Small,
    Medium,
    Large,
}

impl ShellLevel {
    pub const ALL: [ShellLevel; 3] = [ShellLevel::Small, ShellLevel::Medium, ShellLevel::Large];

    pub fn name(self) -> &'static str {
        match self {
            ShellLevel::Small => "small",
            ShellLevel::Medium => "medium",
            ShellLevel::Large => "large",
        }
    }
}

impl std::str::FromStr for ShellLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "small" => Ok(ShellLevel::Small),
            "medium" => Ok(ShellLevel::Medium),
            "large" => Ok(ShellLevel::Large),
            _ => Err(format!("unknown shell `{s}` (small|medium|large)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraRole {
    Front,
    Side,
}

impl CameraRole {
    /// Nominal camera position, about 0.75 m from the workspace center.
    pub fn anchor(self) -> Vec3 {
        match self {
            CameraRole::Front => Vec3::new(0.0, -0.55, 0.51),
            CameraRole::Side => Vec3::new(0.55, 0.0, 0.51),
        }
    }
}

/// Cuboid of camera positions around a workspace-centered anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomizationShell {
    pub level: ShellLevel,
    pub role: CameraRole,
    /// Full extent along world x, y, z (meters).
    pub extent: Vec3,
    pub anchor: Vec3,
}

impl RandomizationShell {
    pub fn new(level: ShellLevel, role: CameraRole) -> Self {
        // Extents are (lateral, radial, vertical) relative to the view.
        let (lat, rad, vert) = match (level, role) {
            (ShellLevel::Small, _) => (0.15, 0.10, 0.15),
            (ShellLevel::Medium, CameraRole::Front) => (0.60, 0.30, 0.35),
            (ShellLevel::Medium, CameraRole::Side) => (0.45, 0.30, 0.35),
            (ShellLevel::Large, CameraRole::Front) => (1.50, 0.50, 0.60),
            (ShellLevel::Large, CameraRole::Side) => (1.00, 0.50, 0.60),
        };
        let extent = match role {
            CameraRole::Front => Vec3::new(lat, rad, vert),
            CameraRole::Side => Vec3::new(rad, lat, vert),
        };
        Self { level, role, extent, anchor: role.anchor() }
    }

    pub fn front(level: ShellLevel) -> Self {
        Self::new(level, CameraRole::Front)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let d = p - self.anchor;
        d.x.abs() <= self.extent.x / 2.0 + 1e-12
            && d.y.abs() <= self.extent.y / 2.0 + 1e-12
            && d.z.abs() <= self.extent.z / 2.0 + 1e-12
    }
}

/// Samples a rig position uniformly in the shell cuboid, aimed at the
/// workspace center, with focal length, principal point and baseline
/// jittered within ±5 % of nominal.
pub fn sample_camera_rig(shell: &RandomizationShell, size: usize, rng: &mut impl Rng) -> CameraRig {
    let nominal = CameraRig::nominal(size);
    let mut u = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let offset = Vec3::new(u(shell.extent.x / 2.0), u(shell.extent.y / 2.0), u(shell.extent.z / 2.0));
    let j = INTRINSIC_JITTER;
    let focal = nominal.focal * (1.0 + u(j));
    let cx = nominal.cx * (1.0 + u(j));
    let cy = nominal.cy * (1.0 + u(j));
    let baseline = nominal.baseline * (1.0 + u(j));
    CameraRig { focal, cx, cy, baseline, position: shell.anchor + offset, look_at: Vec3::default(), ..nominal }
}
