//! Synthetic stereo tabletop world: scenes, camera rigs, rasterizer,
//! kinematic simulator, scripted expert and on-disk datasets.

pub mod camera;
pub mod dataset;
pub mod expert;
pub mod geom;
pub mod mesh;
pub mod render;
pub mod scene;
pub mod sim;

pub use camera::{sample_camera_rig, CameraRig, CameraRole, RandomizationShell, ShellLevel};
pub use dataset::{generate_episodes, read_dataset, write_dataset, GenConfig, Manifest};
pub use expert::{expert_rollout, EpisodeRecord, EpisodeStep, CHUNK_LEN};
pub use geom::Vec3;
pub use render::{render_stereo, BBox, StereoFrame};
pub use scene::{sample_scene, Pose, SceneSpec, Shape, TaskFamily};
pub use sim::{Action, FailureReason, RolloutOutcome, World, ACTION_DIM, STATE_DIM};
