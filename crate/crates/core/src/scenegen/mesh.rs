use std::f64::consts::PI;

use super::geom::Vec3;
use super::scene::{ObjectSpec, Pose, SceneSpec, Shape, COLORS, PAD_SIZE};

/// Segmentation ids. Objects use `OBJECT_ID_BASE + index`.
pub const ID_ROOM: u16 = 0;
pub const ID_TABLE: u16 = 1;
pub const ID_PAD: u16 = 2;
pub const ID_GRIPPER: u16 = 3;
pub const OBJECT_ID_BASE: u16 = 10;

/// Gripper geometry (meters).
pub const MAX_APERTURE: f64 = 0.08;
pub const FINGER_WIDTH: f64 = 0.02;
pub const FINGER_THICKNESS: f64 = 0.008;
pub const FINGER_LENGTH: f64 = 0.045;

const DISC_SEGMENTS: usize = 16;
const TABLE_HALF: (f64, f64) = (0.8, 0.6);
const ROOM_HALF: f64 = 2.5;
const FLOOR_Z: f64 = -0.8;
const CEILING_Z: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Material {
    Flat([f64; 3]),
    /// Sinusoidal procedural pattern evaluated at the world point.
    Table,
    Wall,
}

impl Material {
    pub fn albedo(&self, p: Vec3) -> [f64; 3] {
        use std::f64::consts::TAU;
        match *self {
            Material::Flat(c) => c,
            Material::Table => {
                let t = 0.5
                    + 0.25 * (TAU * (p.x + 0.3 * p.y) / 0.061).sin()
                    + 0.25 * (TAU * (p.y - 0.4 * p.x) / 0.043).sin();
                let s = 0.55 + 0.45 * t;
                [0.62 * s, 0.52 * s, 0.40 * s]
            }
            Material::Wall => {
                let t = 0.5 + 0.5 * (TAU * (p.x + p.y) / 0.37).sin() * (TAU * p.z / 0.29).sin();
                let s = 0.6 + 0.4 * t;
                [0.55 * s, 0.60 * s, 0.66 * s]
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Triangle {
    pub v: [Vec3; 3],
    /// Unit normal facing toward where the face is meant to be seen from.
    pub normal: Vec3,
    pub material: Material,
    pub id: u16,
}

fn push_quad(out: &mut Vec<Triangle>, q: [Vec3; 4], normal: Vec3, material: Material, id: u16) {
    out.push(Triangle { v: [q[0], q[1], q[2]], normal, material, id });
    out.push(Triangle { v: [q[0], q[2], q[3]], normal, material, id });
}

/// Axis-aligned (in its own frame) box rotated by `yaw` about z.
/// `inward` flips normals for boxes seen from inside.
pub fn box_mesh(center: Vec3, half: Vec3, yaw: f64, material: Material, id: u16, inward: bool) -> Vec<Triangle> {
    let (s, c) = yaw.sin_cos();
    let ax = Vec3::new(c, s, 0.0);
    let ay = Vec3::new(-s, c, 0.0);
    let az = Vec3::new(0.0, 0.0, 1.0);
    let corner = |i: f64, j: f64, k: f64| center + ax * (i * half.x) + ay * (j * half.y) + az * (k * half.z);
    let axes = [ax, ay, az];
    let sign = if inward { -1.0 } else { 1.0 };
    let mut out = Vec::with_capacity(12);
    for nn in 0..3 {
        let (nu, nv) = ((nn + 1) % 3, (nn + 2) % 3);
        for side in [1.0, -1.0] {
            let pts = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(a, b)| {
                let mut l = [0.0; 3];
                l[nn] = side;
                l[nu] = a;
                l[nv] = b;
                corner(l[0], l[1], l[2])
            });
            push_quad(&mut out, pts, axes[nn] * (side * sign), material, id);
        }
    }
    out
}

/// Vertical prism with a regular polygon cross-section, bottom at `base.z`.
pub fn disc_mesh(base: Vec3, radius: f64, height: f64, material: Material, id: u16) -> Vec<Triangle> {
    let up = Vec3::new(0.0, 0.0, 1.0);
    let top = base + up * height;
    let ring = |i: usize| {
        let a = 2.0 * PI * i as f64 / DISC_SEGMENTS as f64;
        Vec3::new(a.cos() * radius, a.sin() * radius, 0.0)
    };
    let mut out = Vec::with_capacity(4 * DISC_SEGMENTS);
    for i in 0..DISC_SEGMENTS {
        let (r0, r1) = (ring(i), ring(i + 1));
        out.push(Triangle { v: [top, top + r0, top + r1], normal: up, material, id });
        out.push(Triangle { v: [base, base + r1, base + r0], normal: -up, material, id });
        let mid = (r0 + r1) * 0.5;
        push_quad(&mut out, [base + r0, base + r1, top + r1, top + r0], mid.normalized(), material, id);
    }
    out
}

pub fn object_mesh(obj: &ObjectSpec, pose: &Pose, id: u16) -> Vec<Triangle> {
    let material = Material::Flat(COLORS[obj.color].1);
    match obj.shape {
        Shape::Disc => disc_mesh(pose.position, obj.dims.x / 2.0, obj.dims.z, material, id),
        Shape::Bar | Shape::Cube => {
            let half = obj.dims * 0.5;
            box_mesh(pose.position + Vec3::new(0.0, 0.0, half.z), half, pose.yaw, material, id, false)
        }
    }
}

/// Two fingers along the jaw axis plus a palm above them. `pose.position` is
/// the fingertip center; `open` is the open fraction in `[0, 1]`.
pub fn gripper_mesh(pose: &Pose, open: f64) -> Vec<Triangle> {
    let material = Material::Flat([0.25, 0.25, 0.28]);
    let (s, c) = pose.yaw.sin_cos();
    let jaw = Vec3::new(c, s, 0.0);
    let gap = MAX_APERTURE * open.clamp(0.0, 1.0);
    let mut out = Vec::new();
    let finger_half = Vec3::new(FINGER_THICKNESS / 2.0, FINGER_WIDTH / 2.0, FINGER_LENGTH / 2.0);
    for side in [-1.0, 1.0] {
        let center = pose.position + jaw * (side * (gap + FINGER_THICKNESS) / 2.0) + Vec3::new(0.0, 0.0, FINGER_LENGTH / 2.0);
        out.extend(box_mesh(center, finger_half, pose.yaw, material, ID_GRIPPER, false));
    }
    let palm_half = Vec3::new(MAX_APERTURE / 2.0 + FINGER_THICKNESS, FINGER_WIDTH / 2.0, 0.01);
    let palm = pose.position + Vec3::new(0.0, 0.0, FINGER_LENGTH + palm_half.z);
    out.extend(box_mesh(palm, palm_half, pose.yaw, material, ID_GRIPPER, false));
    let wrist_half = Vec3::new(0.012, 0.012, 0.04);
    let wrist = palm + Vec3::new(0.0, 0.0, palm_half.z + wrist_half.z);
    out.extend(box_mesh(wrist, wrist_half, pose.yaw, material, ID_GRIPPER, false));
    out
}

/// Room, table and pad: everything that does not move.
pub fn static_mesh(pad_center: Vec3) -> Vec<Triangle> {
    let mut out = box_mesh(
        Vec3::new(0.0, 0.0, (FLOOR_Z + CEILING_Z) / 2.0),
        Vec3::new(ROOM_HALF, ROOM_HALF, (CEILING_Z - FLOOR_Z) / 2.0),
        0.0,
        Material::Wall,
        ID_ROOM,
        true,
    );
    out.extend(box_mesh(
        Vec3::new(0.0, 0.0, -0.02),
        Vec3::new(TABLE_HALF.0, TABLE_HALF.1, 0.02),
        0.0,
        Material::Table,
        ID_TABLE,
        false,
    ));
    out.extend(box_mesh(
        pad_center + Vec3::new(0.0, 0.0, 0.001),
        Vec3::new(PAD_SIZE / 2.0, PAD_SIZE / 2.0, 0.001),
        0.0,
        Material::Flat([0.92, 0.92, 0.90]),
        ID_PAD,
        false,
    ));
    out
}

/// Full scene mesh for the given object poses and gripper state.
pub fn scene_mesh(scene: &SceneSpec, objects: &[Pose], gripper: &Pose, open: f64) -> Vec<Triangle> {
    let mut out = static_mesh(scene.pad_center);
    for (i, (o, p)) in scene.objects.iter().zip(objects).enumerate() {
        out.extend(object_mesh(o, p, OBJECT_ID_BASE + i as u16));
    }
    out.extend(gripper_mesh(gripper, open));
    out
}

/// True when `p` lies strictly inside a closed solid of the scene (table or
/// an object), i.e. a camera there would be degenerate.
pub fn point_inside_solid(scene: &SceneSpec, objects: &[Pose], p: Vec3) -> bool {
    if p.z < 0.0 && p.z > -0.04 && p.x.abs() < TABLE_HALF.0 && p.y.abs() < TABLE_HALF.1 {
        return true;
    }
    if p.x.abs() >= ROOM_HALF || p.y.abs() >= ROOM_HALF || p.z <= FLOOR_Z || p.z >= CEILING_Z {
        return true;
    }
    scene.objects.iter().zip(objects).any(|(o, pose)| {
        let d = p - pose.position;
        if d.z < 0.0 || d.z > o.dims.z {
            return false;
        }
        match o.shape {
            Shape::Disc => (d.x * d.x + d.y * d.y).sqrt() < o.dims.x / 2.0,
            _ => {
                let (s, c) = pose.yaw.sin_cos();
                let lx = d.x * c + d.y * s;
                let ly = -d.x * s + d.y * c;
                lx.abs() < o.dims.x / 2.0 && ly.abs() < o.dims.y / 2.0
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_normals_point_outward() {
        let c = Vec3::new(0.1, 0.2, 0.3);
        for t in box_mesh(c, Vec3::new(0.1, 0.05, 0.02), 0.7, Material::Wall, 1, false) {
            let centroid = (t.v[0] + t.v[1] + t.v[2]) * (1.0 / 3.0);
            assert!(t.normal.dot(centroid - c) > 0.0);
            let geo = (t.v[1] - t.v[0]).cross(t.v[2] - t.v[0]).normalized();
            assert!(geo.dot(t.normal).abs() > 1.0 - 1e-9, "normal is perpendicular to the face");
        }
    }

    #[test]
    fn disc_has_expected_triangle_count() {
        let m = disc_mesh(Vec3::default(), 0.02, 0.01, Material::Wall, 5);
        assert_eq!(m.len(), 4 * DISC_SEGMENTS);
    }
}
