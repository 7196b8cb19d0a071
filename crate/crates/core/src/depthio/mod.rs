//! Depth/color data model, file formats, synthetic scenes and degradation operators.

pub mod dataset;
mod noise;
mod pnm;
mod resize;
mod synth;
mod types;

pub use dataset::{format_kernel_block, list_indices, parse_spec, read_sample, read_split, write_sample};
pub use noise::{add_eval_noise, gaussian_blur, gaussian_taps};
pub use pnm::{
    decode_pfm, decode_pgm_mask, decode_ppm, encode_pfm, encode_pgm_gray, encode_pgm_mask, encode_ppm, read_pfm,
    read_pgm, read_ppm, write_atomic, write_pfm, write_pgm, write_ppm,
};
pub use resize::{bicubic_plane, bicubic_resize, cubic_weight};
pub use synth::{
    correlate_reflect, degrade_clean, fill_holes, mix_seed, synth_scene, DegradationSpec, SceneSample,
    DEPTH_NORMALIZER_M, SCENE_MAX_M, SCENE_MIN_M,
};
pub use types::{normalized_cross_correlation, DepthMap, Kernel, RgbImage, ValidMask, VALID_MAX_M, VALID_MIN_M};
