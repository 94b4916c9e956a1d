//! Shared fixtures for the criterion benches.

use diffmod::config::RunConfig;
use diffmod::features::{compute_feature_field, frame_window, FeatureField};
use diffmod::model::DiffModParams;
use diffmod::scenegen::{generate_scene, SceneSequence};

/// Desk-scale defaults with resolved seeds.
pub fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.resolve();
    cfg
}

pub fn desk_scene(cfg: &RunConfig) -> SceneSequence {
    generate_scene(&cfg.scene).expect("scene generates")
}

pub fn desk_model(cfg: &RunConfig) -> DiffModParams {
    DiffModParams::new(cfg.model.clone()).expect("model builds")
}

pub fn field_at(scene: &SceneSequence, t: usize) -> FeatureField {
    let window = frame_window(&scene.frames, t);
    compute_feature_field(&window, t).expect("field computes")
}
