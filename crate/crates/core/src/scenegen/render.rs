use serde::{Deserialize, Serialize};

use super::camera::{CameraFrame, CameraRig};
use super::geom::Vec3;
use super::mesh::{self, Triangle, ID_GRIPPER, OBJECT_ID_BASE};
use super::scene::{Pose, SceneSpec};
use crate::SvlaError;

const NEAR: f64 = 0.02;
const AMBIENT: f64 = 0.35;

pub fn light_dir() -> Vec3 {
    Vec3::new(0.3, -0.5, 1.0).normalized()
}

/// Axis-aligned pixel rectangle `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn area(&self) -> f64 {
        if self.is_valid() {
            (self.x2 - self.x1) * (self.y2 - self.y1)
        } else {
            0.0
        }
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox::new(self.x1.min(o.x1), self.y1.min(o.y1), self.x2.max(o.x2), self.y2.max(o.y2))
    }

    pub fn contains_box(&self, o: &BBox) -> bool {
        self.x1 <= o.x1 && self.y1 <= o.y1 && self.x2 >= o.x2 && self.y2 >= o.y2
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = BBox::new(self.x1.max(o.x1), self.y1.max(o.y1), self.x2.min(o.x2), self.y2.min(o.y2)).area();
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Rendered rectified pair with ground truth for the left view. Images are
/// row-major `H × W × 3` in `[0, 1]`; maps are row-major `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoFrame {
    pub width: usize,
    pub height: usize,
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub depth: Vec<f32>,
    pub disparity: Vec<f32>,
    pub segmentation: Vec<u16>,
    pub rig: CameraRig,
    pub object_bboxes: Vec<Option<BBox>>,
    pub gripper_bbox: Option<BBox>,
}

/// Per-view raster output.
#[derive(Debug, Clone)]
pub struct ViewRaster {
    pub color: Vec<f32>,
    pub depth: Vec<f64>,
    pub ids: Vec<u16>,
}

fn clip_near(poly: &[(Vec3, Vec3)]) -> Vec<(Vec3, Vec3)> {
    // Sutherland-Hodgman against z >= NEAR; pairs are (camera coords, world coords).
    let mut out = Vec::with_capacity(4);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ia, ib) = (a.0.z >= NEAR, b.0.z >= NEAR);
        if ia {
            out.push(a);
        }
        if ia != ib {
            let t = (NEAR - a.0.z) / (b.0.z - a.0.z);
            out.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
        }
    }
    out
}

fn shade(t: &Triangle, world: Vec3) -> [f64; 3] {
    let lambert = AMBIENT + (1.0 - AMBIENT) * t.normal.dot(light_dir()).max(0.0);
    t.material.albedo(world).map(|c| (c * lambert).clamp(0.0, 1.0))
}

/// Z-buffered rasterization of `tris` seen through `frame` with the rig's
/// intrinsics. Depth is camera-frame z. Pixel centers sit at `+0.5`.
pub fn rasterize(tris: &[Triangle], rig: &CameraRig, frame: &CameraFrame) -> ViewRaster {
    let (w, h) = (rig.width, rig.height);
    let mut out = ViewRaster { color: vec![0.0; w * h * 3], depth: vec![f64::INFINITY; w * h], ids: vec![0; w * h] };
    for t in tris {
        let poly: Vec<(Vec3, Vec3)> = t.v.iter().map(|&p| (frame.to_camera(p), p)).collect();
        let poly = clip_near(&poly);
        for k in 1..poly.len().saturating_sub(1) {
            raster_triangle(t, [poly[0], poly[k], poly[k + 1]], rig, &mut out);
        }
    }
    out
}

fn raster_triangle(t: &Triangle, v: [(Vec3, Vec3); 3], rig: &CameraRig, out: &mut ViewRaster) {
    let (w, h) = (rig.width, rig.height);
    let s: [(f64, f64); 3] = v.map(|(c, _)| (rig.focal * c.x / c.z + rig.cx, rig.focal * c.y / c.z + rig.cy));
    let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let area = edge(s[0], s[1], s[2]);
    if area.abs() < 1e-14 {
        return;
    }
    let min_x = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_x = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(w as f64);
    let min_y = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_y = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(h as f64);
    if max_x <= 0.0 || max_y <= 0.0 {
        return;
    }
    let inv_z = v.map(|(c, _)| 1.0 / c.z);
    for py in min_y..max_y as usize {
        for px in min_x..max_x as usize {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let l0 = edge(s[1], s[2], p) / area;
            let l1 = edge(s[2], s[0], p) / area;
            let l2 = edge(s[0], s[1], p) / area;
            if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                continue;
            }
            let iz = l0 * inv_z[0] + l1 * inv_z[1] + l2 * inv_z[2];
            let z = 1.0 / iz;
            let idx = py * w + px;
            if z < out.depth[idx] {
                let world = (v[0].1 * (l0 * inv_z[0]) + v[1].1 * (l1 * inv_z[1]) + v[2].1 * (l2 * inv_z[2])) * z;
                let c = shade(t, world);
                out.depth[idx] = z;
                out.ids[idx] = t.id;
                out.color[3 * idx..3 * idx + 3].copy_from_slice(&c.map(|x| x as f32));
            }
        }
    }
}

/// Tight per-id bounding boxes from an id buffer.
pub fn id_bboxes(ids: &[u16], width: usize, wanted: &[u16]) -> Vec<Option<BBox>> {
    let mut boxes: Vec<Option<BBox>> = vec![None; wanted.len()];
    for (i, &id) in ids.iter().enumerate() {
        if let Some(k) = wanted.iter().position(|&w| w == id) {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            let b = boxes[k].get_or_insert(BBox::new(x, y, x + 1.0, y + 1.0));
            *b = b.union(&BBox::new(x, y, x + 1.0, y + 1.0));
        }
    }
    boxes
}

/// Renders a stereo pair of an arbitrary triangle soup. Returns an error if
/// any rendered pixel has non-positive or non-finite depth.
pub fn render_mesh(tris: &[Triangle], rig: &CameraRig, n_objects: usize) -> Result<StereoFrame, SvlaError> {
    if rig.focal <= 0.0 || rig.baseline <= 0.0 {
        return Err(SvlaError::DegenerateRig("focal length and baseline must be positive".into()));
    }
    let left = rasterize(tris, rig, &rig.left_frame());
    let right = rasterize(tris, rig, &rig.right_frame());
    if left.depth.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(SvlaError::DegenerateRig("a left-view ray hits nothing".into()));
    }
    let fb = rig.focal * rig.baseline;
    let depth: Vec<f32> = left.depth.iter().map(|&z| z as f32).collect();
    let disparity: Vec<f32> = depth.iter().map(|&z| (fb / z as f64) as f32).collect();
    let mut wanted: Vec<u16> = (0..n_objects as u16).map(|i| OBJECT_ID_BASE + i).collect();
    wanted.push(ID_GRIPPER);
    let mut boxes = id_bboxes(&left.ids, rig.width, &wanted);
    let gripper_bbox = boxes.pop().flatten();
    Ok(StereoFrame {
        width: rig.width,
        height: rig.height,
        left: left.color,
        right: right.color,
        depth,
        disparity,
        segmentation: left.ids,
        rig: *rig,
        object_bboxes: boxes,
        gripper_bbox,
    })
}

/// Renders the scene with objects at `objects` and the gripper at `gripper`
/// with open fraction `open`.
pub fn render_stereo(
    scene: &SceneSpec,
    rig: &CameraRig,
    objects: &[Pose],
    gripper: &Pose,
    open: f64,
) -> Result<StereoFrame, SvlaError> {
    for p in [rig.position, rig.right_frame().origin] {
        if mesh::point_inside_solid(scene, objects, p) {
            return Err(SvlaError::DegenerateRig(format!("camera at {p:?} is inside a solid")));
        }
    }
    render_mesh(&mesh::scene_mesh(scene, objects, gripper, open), rig, scene.objects.len())
}

#[cfg(test)]
mod tests {
    use super::super::mesh::{box_mesh, Material};
    use super::*;

    fn wall_rig(focal: f64, baseline: f64, dist: f64) -> (CameraRig, Vec<Triangle>) {
        let mut rig = CameraRig::nominal(64);
        rig.focal = focal;
        rig.baseline = baseline;
        rig.position = Vec3::new(0.0, -dist, 0.3);
        rig.look_at = Vec3::new(0.0, 0.0, 0.3);
        // Thin textured slab whose front face is the plane y = 0.
        let wall = box_mesh(Vec3::new(0.0, 0.05, 0.3), Vec3::new(5.0, 0.05, 5.0), 0.0, Material::Table, 1, false);
        (rig, wall)
    }

    #[test]
    fn fronto_parallel_plane_has_constant_disparity() {
        let (rig, wall) = wall_rig(100.0, 0.06, 0.6);
        let f = render_mesh(&wall, &rig, 0).unwrap();
        for &d in &f.disparity {
            assert!((d as f64 - 10.0).abs() < 1e-4, "{d}");
        }
    }

    #[test]
    fn integer_disparity_shift() {
        // f·b/z = 80·0.06/1.2 = 4 px.
        let (rig, wall) = wall_rig(80.0, 0.06, 1.2);
        let f = render_mesh(&wall, &rig, 0).unwrap();
        let d = 4;
        for y in 0..64 {
            for x in d..64 {
                for c in 0..3 {
                    let l = f.left[(y * 64 + x) * 3 + c];
                    let r = f.right[(y * 64 + x - d) * 3 + c];
                    assert!((l - r).abs() < 1e-5, "pixel ({x},{y}) ch {c}: {l} vs {r}");
                }
            }
        }
    }

    #[test]
    fn bbox_union_and_iou() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(a.union(&b), BBox::new(0.0, 0.0, 3.0, 3.0));
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
    }
}
