use super::types::DepthMap;
use crate::autograd::kernels::reflect_index;
use crate::error::{Error, Result};

/// Catmull-Rom parameter.
const A: f64 = -0.5;

/// Cubic convolution weight for a tap at distance `t`.
pub fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output taps along one axis: source indices (reflected) and weights.
/// Output sample `o` reads source coordinate `o * n_in / n_out`, so output
/// pixel `s * j` of an integer `s`x upscale sits exactly on input pixel `j`.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let step = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = o as f64 * step;
            let base = src.floor();
            let frac = src - base;
            let base = base as isize;
            let mut idx = [0usize; 4];
            let mut wt = [0f64; 4];
            for (n, m) in (-1isize..=2).enumerate() {
                idx[n] = reflect_index(base + m, n_in);
                wt[n] = cubic_weight(frac - m as f64);
            }
            (idx, wt)
        })
        .collect()
}

/// Separable bicubic resampling of a single plane, computed in `f64`.
pub fn bicubic_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let tx = axis_taps(w, ow);
    let ty = axis_taps(h, oh);
    let mut tmp = vec![0f64; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, (idx, wt)) in tx.iter().enumerate() {
            tmp[y * ow + x] = (0..4).map(|n| wt[n] * row[idx[n]]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for (y, (idx, wt)) in ty.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = (0..4).map(|n| wt[n] * tmp[idx[n] * ow + x]).sum();
        }
    }
    out
}

/// Catmull-Rom bicubic resize by `factor`; output dims are `round(dim * factor)`.
pub fn bicubic_resize(d: &DepthMap, factor: f64) -> Result<DepthMap> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!("resize factor {factor} must be > 0")));
    }
    let (h, w) = d.dims();
    let oh = (h as f64 * factor).round() as usize;
    let ow = (w as f64 * factor).round() as usize;
    if oh < 1 || ow < 1 {
        return Err(Error::InvalidArgument(format!(
            "resizing {h}x{w} by {factor} gives an empty map"
        )));
    }
    if oh == h && ow == w {
        return Ok(d.clone());
    }
    let src: Vec<f64> = d.values().iter().map(|&v| v as f64).collect();
    let out = bicubic_plane(&src, h, w, oh, ow);
    DepthMap::new(oh, ow, out.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity() {
        for i in 0..=20 {
            let f = i as f64 / 20.0;
            let s: f64 = (-1..=2).map(|m| cubic_weight(f - m as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn constant_is_preserved() {
        let d = DepthMap::filled(5, 7, 2.25);
        for f in [0.5, 1.5, 2.0, 3.0, 4.0] {
            let r = bicubic_resize(&d, f).unwrap();
            assert!(r.values().iter().all(|&v| (v - 2.25).abs() < 1e-6), "factor {f}");
        }
    }

    #[test]
    fn unit_factor_is_identity() {
        let d = DepthMap::from_fn(4, 6, |y, x| (y * 6 + x) as f32 * 0.37);
        assert_eq!(bicubic_resize(&d, 1.0).unwrap(), d);
    }

    #[test]
    fn upsampled_grid_hits_source_samples() {
        let d = DepthMap::from_fn(5, 5, |y, x| ((y * 7 + x * 3) % 5) as f32);
        let r = bicubic_resize(&d, 2.0).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                assert!((r.get(2 * y, 2 * x) - d.get(y, x)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_factor_errors() {
        let d = DepthMap::filled(2, 2, 1.0);
        assert!(bicubic_resize(&d, 0.1).is_err());
        assert!(bicubic_resize(&d, -1.0).is_err());
    }
}
