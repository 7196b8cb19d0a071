use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::types::DepthMap;
use crate::autograd::kernels::reflect_index;
use crate::error::{Error, Result};

/// Normalized 1-D Gaussian taps with radius `ceil(3 * std)`.
pub fn gaussian_taps(std: f64) -> Vec<f64> {
    let r = (3.0 * std).ceil().max(1.0) as isize;
    let mut t: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * std * std)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, std: f64) -> Vec<f64> {
    let taps = gaussian_taps(std);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, &t)| t * src[y * w + reflect_index(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, &t)| t * tmp[reflect_index(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Evaluation-time corruption of an *upsampled* LR depth map: Gaussian blur of
/// `blur_std` pixels followed by additive Gaussian noise of `noise_std`, both in
/// depth normalized by `max_depth`. Output is clamped at 0.
pub fn add_eval_noise(
    d: &DepthMap,
    noise_std: f64,
    blur_std: f64,
    max_depth: f64,
    seed: u64,
) -> Result<DepthMap> {
    if !(noise_std >= 0.0 && blur_std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise std {noise_std} and blur std {blur_std} must be >= 0"
        )));
    }
    if !(max_depth > 0.0) {
        return Err(Error::InvalidArgument("max depth must be > 0".into()));
    }
    if noise_std == 0.0 && blur_std == 0.0 {
        return Ok(d.clone());
    }
    let (h, w) = d.dims();
    let mut v: Vec<f64> = d.values().iter().map(|&x| x as f64 / max_depth).collect();
    if blur_std > 0.0 {
        v = gaussian_blur(&v, h, w, blur_std);
    }
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std).expect("valid std");
        v.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
    }
    DepthMap::new(h, w, v.into_iter().map(|x| (x * max_depth).max(0.0) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strength_is_identity() {
        let d = DepthMap::from_fn(6, 6, |y, x| (y + x) as f32 * 0.1 + 1.0);
        assert_eq!(add_eval_noise(&d, 0.0, 0.0, 5.0, 1).unwrap(), d);
    }

    #[test]
    fn negative_std_rejected() {
        let d = DepthMap::filled(4, 4, 1.0);
        assert!(add_eval_noise(&d, -0.1, 0.0, 5.0, 0).is_err());
        assert!(add_eval_noise(&d, 0.0, -1.0, 5.0, 0).is_err());
    }

    #[test]
    fn default_noise_level_statistics() {
        // 0.07 noise, 3.6 blur on a constant map -> constant + pure noise.
        let d = DepthMap::filled(128, 128, 2.5);
        let out = add_eval_noise(&d, 0.07, 3.6, 5.0, 7).unwrap();
        let n = out.values().len() as f64;
        let z: Vec<f64> = out.values().iter().map(|&v| (v as f64 - 2.5) / 5.0).collect();
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var.sqrt() - 0.07).abs() < 0.05 * 0.07, "std {}", var.sqrt());
    }

    #[test]
    fn step_edge_blur_matches_1d_oracle() {
        let (h, w, std) = (8usize, 24usize, 1.7);
        let d = DepthMap::from_fn(h, w, |_, x| if x < 12 { 1.0 } else { 4.0 });
        let out = add_eval_noise(&d, 0.0, std, 5.0, 0).unwrap();
        // independent 1-D oracle: truncated Gaussian, reflect boundary
        let r = (3.0f64 * std).ceil() as isize;
        let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * std * std)).exp()).collect();
        let gs: f64 = g.iter().sum();
        let profile = |x: isize| -> f64 {
            let mut xi = x;
            if xi < 0 {
                xi = -xi;
            }
            if xi >= w as isize {
                xi = 2 * (w as isize - 1) - xi;
            }
            if xi < 12 { 1.0 / 5.0 } else { 4.0 / 5.0 }
        };
        for y in 0..h {
            for x in 0..w {
                let e: f64 = (-r..=r).map(|i| g[(i + r) as usize] / gs * profile(x as isize + i)).sum::<f64>() * 5.0;
                assert!((out.get(y, x) as f64 - e).abs() < 1e-6, "({y},{x})");
            }
        }
    }
}
