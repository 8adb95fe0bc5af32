//! Fixtures shared by the benchmarks.

use goat_core::data::{synth_scene, SceneSpec, StereoSample};
use goat_core::{GoatConfig, GoatModel};

/// Default-size synthetic scene.
pub fn scene(seed: u64) -> StereoSample {
    synth_scene(&SceneSpec {
        seed,
        ..SceneSpec::default()
    })
    .expect("default spec is valid")
}

/// Smoke-scale model with fixed weights.
pub fn model() -> GoatModel {
    GoatModel::new(GoatConfig::smoke(), 0).expect("smoke config is valid")
}
