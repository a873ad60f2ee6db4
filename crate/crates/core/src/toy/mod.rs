//! Synthetic scenes and the small feature extractor trained on them.

pub mod mlp;
pub mod scene;

pub use mlp::{backward, forward, predict, sgd_step, ForwardCache, ForwardPass, MlpGrads, MlpParams, SgdConfig};
pub use scene::{gen_scene, scene_center_counts, total_pixel_counts, Scene, SceneConfig};
