//! Episode generation and on-disk datasets: one array blob per episode plus a
//! JSON manifest carrying all scalar metadata.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use svla_numerics::checkpoint::{load_arrays, save_arrays, NamedArray};

use super::camera::{sample_camera_rig, CameraRig, CameraRole, RandomizationShell, ShellLevel};
use super::expert::{expert_rollout, EpisodeRecord, EpisodeStep, Keyframe};
use super::render::{BBox, StereoFrame};
use super::scene::{sample_scene, SceneSpec, TaskFamily};
use super::sim::{Action, RolloutOutcome, STATE_DIM};
use crate::auxtasks::DepthQuery;
use crate::par::{map_indices, Execution};
use crate::SvlaError;

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub episodes: usize,
    pub families: Vec<TaskFamily>,
    pub difficulty: usize,
    pub shell: ShellLevel,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            families: TaskFamily::ALL.to_vec(),
            difficulty: 2,
            shell: ShellLevel::Small,
            image_size: 64,
            seed: 0,
        }
    }
}

pub fn episode_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

/// Samples scene and rig for attempt `i` and runs the expert.
pub fn generate_episode(cfg: &GenConfig, i: usize) -> Result<EpisodeRecord, SvlaError> {
    let seed = episode_seed(cfg.seed, i);
    let family = cfg.families[i % cfg.families.len()];
    let scene = sample_scene(family, cfg.difficulty, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca3e_7a00);
    let rig = sample_camera_rig(&RandomizationShell::new(cfg.shell, CameraRole::Front), cfg.image_size, &mut rng);
    expert_rollout(&scene, &rig, &mut rng)
}

/// Every frame of `episodes`, in episode then step order.
pub fn all_frames(episodes: &[EpisodeRecord]) -> Vec<&StereoFrame> {
    episodes.iter().flat_map(|e| e.steps.iter().map(|s| &s.frame)).collect()
}

/// Generates `cfg.episodes` successful expert episodes. Attempts whose expert
/// fails or is infeasible are skipped; attempts are indexed deterministically.
pub fn generate_episodes(cfg: &GenConfig, exec: Execution) -> Result<Vec<EpisodeRecord>, SvlaError> {
    if cfg.families.is_empty() {
        return Err(SvlaError::Config("no task families".into()));
    }
    let mut out = Vec::with_capacity(cfg.episodes);
    let mut next = 0;
    while out.len() < cfg.episodes {
        let want = cfg.episodes - out.len();
        let batch = map_indices(exec, want, |k| generate_episode(cfg, next + k));
        next += want;
        for ep in batch.into_iter().flatten() {
            if ep.outcome.success && out.len() < cfg.episodes {
                out.push(ep);
            }
        }
        if next > 4 * cfg.episodes + 100 {
            return Err(SvlaError::Config("expert fails on too many scenes".into()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    pub t: usize,
    pub state: [f64; STATE_DIM],
    pub chunk: Vec<Action>,
    pub next_keyframe: [f64; 4],
    pub target_bbox: BBox,
    pub region: BBox,
    pub queries: Vec<DepthQuery>,
    pub object_bboxes: Vec<Option<BBox>>,
    pub gripper_bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub file: String,
    pub scene: SceneSpec,
    pub rig: CameraRig,
    pub actions: Vec<Action>,
    pub states: Vec<[f64; STATE_DIM]>,
    pub keyframes: Vec<Keyframe>,
    pub outcome: RolloutOutcome,
    pub steps: Vec<StepMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub episodes: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub shell: Option<ShellLevel>,
    pub image_size: usize,
    pub rig_nominal: CameraRig,
    pub seeds: Vec<u64>,
    pub counts: Counts,
    pub episodes: Vec<EpisodeMeta>,
}

fn frame_arrays(s: usize, f: &StereoFrame) -> Vec<NamedArray> {
    let (h, w) = (f.height, f.width);
    vec![
        NamedArray::new(format!("step{s}.left"), &[h, w, 3], f.left.clone()),
        NamedArray::new(format!("step{s}.right"), &[h, w, 3], f.right.clone()),
        NamedArray::new(format!("step{s}.depth"), &[h, w], f.depth.clone()),
        NamedArray::new(format!("step{s}.disparity"), &[h, w], f.disparity.clone()),
        NamedArray::new(format!("step{s}.segmentation"), &[h, w], f.segmentation.iter().map(|&v| v as f32).collect()),
    ]
}

/// Writes episodes under `dir` and returns the manifest.
pub fn write_dataset(episodes: &[EpisodeRecord], shell: Option<ShellLevel>, dir: &Path) -> Result<Manifest, SvlaError> {
    fs::create_dir_all(dir)?;
    let image_size = episodes.first().map_or(64, |e| e.rig.width);
    let mut metas = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let file = format!("episode_{i:05}.svla");
        let arrays: Vec<NamedArray> = ep.steps.iter().enumerate().flat_map(|(s, st)| frame_arrays(s, &st.frame)).collect();
        save_arrays(&dir.join(&file), &arrays)?;
        metas.push(EpisodeMeta {
            file,
            scene: ep.scene.clone(),
            rig: ep.rig,
            actions: ep.actions.clone(),
            states: ep.states.clone(),
            keyframes: ep.keyframes.clone(),
            outcome: ep.outcome,
            steps: ep
                .steps
                .iter()
                .map(|s| StepMeta {
                    t: s.t,
                    state: s.state,
                    chunk: s.chunk.clone(),
                    next_keyframe: s.next_keyframe,
                    target_bbox: s.target_bbox,
                    region: s.region,
                    queries: s.queries.clone(),
                    object_bboxes: s.frame.object_bboxes.clone(),
                    gripper_bbox: s.frame.gripper_bbox,
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        shell,
        image_size,
        rig_nominal: CameraRig::nominal(image_size),
        seeds: episodes.iter().map(|e| e.scene.seed).collect(),
        counts: Counts { episodes: episodes.len(), frames: episodes.iter().map(|e| e.steps.len()).sum() },
        episodes: metas,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn take(arrays: &mut Vec<NamedArray>, name: &str, shape: &[usize]) -> Result<Vec<f32>, SvlaError> {
    let pos = arrays
        .iter()
        .position(|a| a.name == name)
        .ok_or_else(|| SvlaError::Dataset(format!("missing array `{name}`")))?;
    let a = arrays.swap_remove(pos);
    if a.shape != shape {
        return Err(SvlaError::Dataset(format!("array `{name}` has shape {:?}, expected {shape:?}", a.shape)));
    }
    Ok(a.data)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SvlaError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != DATASET_VERSION {
        return Err(SvlaError::Dataset(format!(
            "dataset version {} (expected {DATASET_VERSION})",
            manifest.version
        )));
    }
    if manifest.counts.episodes != manifest.episodes.len() {
        return Err(SvlaError::Dataset("manifest episode count disagrees with its episode list".into()));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<EpisodeRecord>, SvlaError> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.episodes.len());
    for meta in manifest.episodes {
        let mut arrays = load_arrays(&dir.join(&meta.file))?;
        let (h, w) = (meta.rig.height, meta.rig.width);
        let mut steps = Vec::with_capacity(meta.steps.len());
        for (s, sm) in meta.steps.into_iter().enumerate() {
            let frame = StereoFrame {
                width: w,
                height: h,
                left: take(&mut arrays, &format!("step{s}.left"), &[h, w, 3])?,
                right: take(&mut arrays, &format!("step{s}.right"), &[h, w, 3])?,
                depth: take(&mut arrays, &format!("step{s}.depth"), &[h, w])?,
                disparity: take(&mut arrays, &format!("step{s}.disparity"), &[h, w])?,
                segmentation: take(&mut arrays, &format!("step{s}.segmentation"), &[h, w])?
                    .into_iter()
                    .map(|v| v as u16)
                    .collect(),
                rig: meta.rig,
                object_bboxes: sm.object_bboxes,
                gripper_bbox: sm.gripper_bbox,
            };
            steps.push(EpisodeStep {
                t: sm.t,
                frame,
                state: sm.state,
                chunk: sm.chunk,
                next_keyframe: sm.next_keyframe,
                target_bbox: sm.target_bbox,
                region: sm.region,
                queries: sm.queries,
            });
        }
        if !arrays.is_empty() {
            return Err(SvlaError::Dataset(format!("{} unexpected arrays in {}", arrays.len(), meta.file)));
        }
        out.push(EpisodeRecord {
            scene: meta.scene,
            rig: meta.rig,
            steps,
            actions: meta.actions,
            states: meta.states,
            keyframes: meta.keyframes,
            outcome: meta.outcome,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(n: usize) -> GenConfig {
        GenConfig { episodes: n, seed: 9, ..GenConfig::default() }
    }

    #[test]
    fn round_trip_ten_episodes() {
        let eps = generate_episodes(&small_cfg(10), Execution::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&eps, Some(ShellLevel::Small), dir.path()).unwrap();
        assert_eq!(m.counts.episodes, 10);
        assert_eq!(read_manifest(dir.path()).unwrap().counts.episodes, 10);
        assert_eq!(read_dataset(dir.path()).unwrap(), eps);
    }

    #[test]
    fn corrupted_blob_is_an_error() {
        let eps = generate_episodes(&small_cfg(1), Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&eps, None, dir.path()).unwrap();
        let blob = dir.path().join("episode_00000.svla");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_dataset(dir.path()).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[1, 2, 3]);
        fs::write(&blob, &extra).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], None, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let s = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 7");
        fs::write(&p, s).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(SvlaError::Dataset(_))));
    }

    #[test]
    fn generation_is_deterministic_across_execution_modes() {
        let a = generate_episodes(&small_cfg(3), Execution::Sequential).unwrap();
        let b = generate_episodes(&small_cfg(3), Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
