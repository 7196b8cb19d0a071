//! Shared fixtures for the micro-benchmarks.

use dornet_core::depthio::{synth_scene, DegradationSpec, Kernel, SceneSample};
use dornet_core::fusion::ModelConfig;

/// Model shape used by the training-step benchmarks.
pub fn bench_model() -> ModelConfig {
    ModelConfig { c_feat: 8, c_deg: 8, c_code: 16, t_doft: 2, scale: 2, gen_hidden: 32, ..ModelConfig::default() }
}

/// A 32x32 scene at scale 2 with a 5x5 Gaussian blur.
pub fn bench_scene(seed: u64) -> SceneSample {
    let spec = DegradationSpec { blur_kernel: Kernel::isotropic(5, 1.0).expect("kernel"), ..DegradationSpec::identity(2) };
    synth_scene(seed, 32, &spec).expect("scene")
}
