//! Auxiliary supervision: interaction regions, depth queries, task kinds and
//! the per-task loss aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::DepthCodec;
use crate::scenegen::render::BBox;

pub const DEFAULT_REGION_MARGIN: f64 = 2.0;
pub const DEFAULT_QUERIES_PER_FRAME: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    Interaction,
    Uniform,
    None,
}

impl DepthMode {
    pub const ALL: [DepthMode; 3] = [DepthMode::Interaction, DepthMode::Uniform, DepthMode::None];

    pub fn name(self) -> &'static str {
        match self {
            DepthMode::Interaction => "interaction",
            DepthMode::Uniform => "uniform",
            DepthMode::None => "none",
        }
    }
}

impl std::str::FromStr for DepthMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        DepthMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown depth mode `{s}` (interaction|uniform|none)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthQuery {
    /// Pixel column and row in the left image.
    pub x: usize,
    pub y: usize,
    pub depth: f64,
    pub bin: usize,
}

/// Union of the two boxes dilated by `margin` and clipped to the image. A
/// missing gripper box leaves the target box alone.
pub fn interaction_region(gripper: Option<&BBox>, target: &BBox, margin: f64, width: usize, height: usize) -> BBox {
    let u = gripper.map_or(*target, |g| g.union(target));
    BBox::new(
        (u.x1 - margin).max(0.0),
        (u.y1 - margin).max(0.0),
        (u.x2 + margin).min(width as f64),
        (u.y2 + margin).min(height as f64),
    )
}

/// Integer pixel span `[lo, hi)` covered by a real interval, clipped to `[0, n)`.
fn pixel_span(a: f64, b: f64, n: usize) -> (usize, usize) {
    let lo = a.ceil().max(0.0) as usize;
    let hi = (b.ceil().max(0.0) as usize).min(n);
    (lo, hi)
}

/// Samples `n` depth queries. Interaction mode draws pixels uniformly inside
/// `region` (falling back to `target` when `region` covers no pixel), uniform
/// mode over the whole image, and none mode returns nothing.
#[allow(clippy::too_many_arguments)]
pub fn sample_depth_queries(
    mode: DepthMode,
    region: &BBox,
    target: &BBox,
    depth: &[f32],
    width: usize,
    height: usize,
    n: usize,
    codec: &DepthCodec,
    rng: &mut impl Rng,
) -> Vec<DepthQuery> {
    let (xs, ys) = match mode {
        DepthMode::None => return Vec::new(),
        DepthMode::Uniform => ((0, width), (0, height)),
        DepthMode::Interaction => {
            let mut xs = pixel_span(region.x1, region.x2, width);
            let mut ys = pixel_span(region.y1, region.y2, height);
            if xs.0 >= xs.1 || ys.0 >= ys.1 {
                xs = pixel_span(target.x1, target.x2, width);
                ys = pixel_span(target.y1, target.y2, height);
            }
            if xs.0 >= xs.1 || ys.0 >= ys.1 {
                ((0, width), (0, height))
            } else {
                (xs, ys)
            }
        }
    };
    (0..n)
        .map(|_| {
            let x = rng.random_range(xs.0..xs.1);
            let y = rng.random_range(ys.0..ys.1);
            let d = depth[y * width + x] as f64;
            DepthQuery { x, y, depth: d, bin: codec.encode(d) }
        })
        .collect()
}

/// Training task of one sample, in mixture-ratio order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Action,
    Depth,
    Bbox,
    Pose,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Action, TaskKind::Depth, TaskKind::Bbox, TaskKind::Pose];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Action => "action",
            TaskKind::Depth => "depth",
            TaskKind::Bbox => "bbox",
            TaskKind::Pose => "pose",
        }
    }
}

/// Per-task mean losses. Tasks absent from a batch contribute 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub action: f64,
    pub depth: f64,
    pub bbox: f64,
    pub pose: f64,
}

impl TaskLosses {
    /// Averages each sample's loss within its task.
    pub fn from_samples(samples: &[(TaskKind, f64)]) -> Self {
        let mut sum = [0.0; 4];
        let mut n = [0usize; 4];
        for &(k, l) in samples {
            sum[k.index()] += l;
            n[k.index()] += 1;
        }
        let m = |i: usize| if n[i] == 0 { 0.0 } else { sum[i] / n[i] as f64 };
        Self { action: m(0), depth: m(1), bbox: m(2), pose: m(3) }
    }

    pub fn get(&self, k: TaskKind) -> f64 {
        match k {
            TaskKind::Action => self.action,
            TaskKind::Depth => self.depth,
            TaskKind::Bbox => self.bbox,
            TaskKind::Pose => self.pose,
        }
    }

    /// Unweighted sum of the four task losses.
    pub fn total(&self) -> f64 {
        self.action + self.depth + self.bbox + self.pose
    }

    pub fn is_finite(&self) -> bool {
        [self.action, self.depth, self.bbox, self.pose].iter().all(|v| v.is_finite())
    }
}

/// Weight applied to each sample's loss so that summing the weighted losses
/// gives the sum of per-task means.
pub fn per_task_weights(kinds: &[TaskKind]) -> Vec<f64> {
    let mut n = [0usize; 4];
    for k in kinds {
        n[k.index()] += 1;
    }
    kinds.iter().map(|k| 1.0 / n[k.index()] as f64).collect()
}
