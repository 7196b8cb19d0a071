//! Synthetic piecewise-planar RGB-D scenes with a known degradation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::types::{DepthMap, Kernel, RgbImage, ValidMask};
use crate::autograd::kernels::reflect_index;
use crate::error::{Error, Result};

/// Depth range of generated scenes, meters.
pub const SCENE_MIN_M: f64 = 0.5;
pub const SCENE_MAX_M: f64 = 4.5;
/// Constant used to bring depth into `[0, 1]` network units.
pub const DEPTH_NORMALIZER_M: f64 = 5.0;

/// How an HR depth map is turned into LR observations.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub blur_kernel: Kernel,
    pub scale: usize,
    /// Gaussian noise std in normalized depth units.
    pub noise_std: f64,
    /// Probability that an LR pixel is erased (set to 0).
    pub hole_rate: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn identity(scale: usize) -> Self {
        Self { blur_kernel: Kernel::delta(), scale, noise_std: 0.0, hole_rate: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::InvalidArgument("scale factor must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.hole_rate) {
            return Err(Error::InvalidArgument(format!("hole_rate {} must be in [0, 1)", self.hole_rate)));
        }
        Kernel::new(self.blur_kernel.side(), self.blur_kernel.values().to_vec()).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub hr_depth: DepthMap,
    pub rgb: RgbImage,
    pub lr_depth: DepthMap,
    pub gt_mask: ValidMask,
    pub gt_kernel: Option<Kernel>,
    pub meta: DegradationSpec,
}

/// splitmix64 finalizer, used to derive independent RNG streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// Cross-correlation with reflect padding, same output size.
pub fn correlate_reflect(src: &[f64], h: usize, w: usize, k: &Kernel) -> Vec<f64> {
    let r = k.radius() as isize;
    let side = k.side();
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..side {
                let sy = reflect_index(y as isize + ky as isize - r, h);
                for kx in 0..side {
                    let sx = reflect_index(x as isize + kx as isize - r, w);
                    acc += k.get(ky, kx) * src[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// `downsample_s(kernel * hr)` with reflect padding and stride-`s` sampling at
/// offset 0. No noise, no holes.
pub fn degrade_clean(hr: &DepthMap, kernel: &Kernel, s: usize) -> Result<DepthMap> {
    let (h, w) = hr.dims();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::InvalidArgument(format!("{h}x{w} not divisible by scale {s}")));
    }
    let src: Vec<f64> = hr.values().iter().map(|&v| v as f64).collect();
    let blurred = correlate_reflect(&src, h, w, kernel);
    let (lh, lw) = (h / s, w / s);
    Ok(DepthMap::from_fn(lh, lw, |y, x| blurred[(y * s) * w + x * s] as f32))
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

struct Plane {
    base: f64,
    gy: f64,
    gx: f64,
}

impl Plane {
    fn at(&self, y: f64, x: f64) -> f64 {
        self.base + self.gy * y + self.gx * x
    }
}

/// Generates one scene. Fully determined by `(seed, hr_size, spec)`.
pub fn synth_scene(seed: u64, hr_size: usize, spec: &DegradationSpec) -> Result<SceneSample> {
    spec.validate()?;
    let s = spec.scale;
    if hr_size == 0 || hr_size % s != 0 {
        return Err(Error::InvalidArgument(format!("hr size {hr_size} not divisible by scale {s}")));
    }
    let n = hr_size;
    let nf = n as f64;
    let mut geo = rng(seed, 1);

    // Sloped background; coordinates are normalized to [0, 1).
    let bg = Plane {
        base: geo.random_range(2.8..4.2),
        gy: geo.random_range(-0.6..0.6),
        gx: geo.random_range(-0.6..0.6),
    };
    let n_obj = geo.random_range(2..=5);
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let size_y = geo.random_range(0.15..0.45);
        let size_x = geo.random_range(0.15..0.45);
        let cy = geo.random_range(0.1..0.9);
        let cx = geo.random_range(0.1..0.9);
        let shape = if geo.random_bool(0.5) {
            Shape::Rect { y0: cy - size_y / 2.0, x0: cx - size_x / 2.0, y1: cy + size_y / 2.0, x1: cx + size_x / 2.0 }
        } else {
            Shape::Ellipse { cy, cx, ry: size_y / 2.0, rx: size_x / 2.0 }
        };
        let plane = Plane {
            base: geo.random_range(0.7..3.2),
            gy: geo.random_range(-0.4..0.4),
            gx: geo.random_range(-0.4..0.4),
        };
        let color = [geo.random_range(0.05..0.95), geo.random_range(0.05..0.95), geo.random_range(0.05..0.95)];
        objects.push((shape, plane, color));
    }
    let bg_color = [
        (geo.random_range(0.1..0.9), geo.random_range(-0.3..0.3)),
        (geo.random_range(0.1..0.9), geo.random_range(-0.3..0.3)),
        (geo.random_range(0.1..0.9), geo.random_range(-0.3..0.3)),
    ];

    // Texture independent of the depth layout.
    let mut tex = rng(seed, 2);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let freq = tex.random_range(2.0..8.0) * std::f64::consts::TAU;
            let ang: f64 = tex.random_range(0.0..std::f64::consts::PI);
            (freq * ang.cos(), freq * ang.sin(), tex.random_range(0.0..std::f64::consts::TAU), tex.random_range(0.02..0.08))
        })
        .collect();
    let pixel_noise = Normal::new(0.0, 0.015).expect("valid std");

    let mut hr = vec![0f32; n * n];
    let mut rgb = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = ((y as f64 + 0.5) / nf, (x as f64 + 0.5) / nf);
            let mut depth = bg.at(fy, fx);
            let mut color = [0.0; 3];
            for c in 0..3 {
                color[c] = bg_color[c].0 + bg_color[c].1 * fy;
            }
            for (shape, plane, col) in &objects {
                if shape.contains(fy, fx) {
                    depth = plane.at(fy, fx);
                    color = *col;
                }
            }
            hr[y * n + x] = depth.clamp(SCENE_MIN_M, SCENE_MAX_M) as f32;
            let t: f64 = gratings.iter().map(|&(ky, kx, ph, amp)| amp * (ky * fy + kx * fx + ph).sin()).sum();
            for c in 0..3 {
                let v = color[c] + t + pixel_noise.sample(&mut tex);
                rgb[(c * n + y) * n + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let hr_depth = DepthMap::new(n, n, hr)?;
    let rgb = RgbImage::new(n, n, rgb)?;

    let mut lr = degrade_clean(&hr_depth, &spec.blur_kernel, s)?;
    let mut deg = rng(mix_seed(seed, spec.seed), 3);
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std * DEPTH_NORMALIZER_M).expect("valid std");
        for v in lr.values_mut() {
            *v = (*v as f64 + normal.sample(&mut deg)).max(0.0) as f32;
        }
    }
    if spec.hole_rate > 0.0 {
        for v in lr.values_mut() {
            if deg.random_bool(spec.hole_rate) {
                *v = 0.0;
            }
        }
    }

    Ok(SceneSample {
        gt_mask: ValidMask::from_depth_range(&hr_depth),
        hr_depth,
        rgb,
        lr_depth: lr,
        gt_kernel: Some(spec.blur_kernel.clone()),
        meta: spec.clone(),
    })
}

/// Replace missing (zero) pixels with their nearest valid neighbor
/// (Euclidean; ties resolved in scan order). All-missing maps are returned as is.
pub fn fill_holes(d: &DepthMap) -> DepthMap {
    let (h, w) = d.dims();
    if d.values().iter().all(|&v| v > 0.0) || d.values().iter().all(|&v| v <= 0.0) {
        return d.clone();
    }
    let mut out = d.clone();
    for y in 0..h {
        for x in 0..w {
            if d.get(y, x) > 0.0 {
                continue;
            }
            let mut best: Option<(usize, f32)> = None;
            let max_r = h.max(w);
            for r in 1..=max_r {
                if let Some((bd, _)) = best {
                    if (r * r) > bd {
                        break;
                    }
                }
                let (y0, y1) = (y as isize - r as isize, y as isize + r as isize);
                let (x0, x1) = (x as isize - r as isize, x as isize + r as isize);
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        if yy != y0 && yy != y1 && xx != x0 && xx != x1 {
                            continue;
                        }
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let v = d.get(yy as usize, xx as usize);
                        if v <= 0.0 {
                            continue;
                        }
                        let dist = ((yy - y as isize).pow(2) + (xx - x as isize).pow(2)) as usize;
                        if best.is_none_or(|(bd, _)| dist < bd) {
                            best = Some((dist, v));
                        }
                    }
                }
            }
            if let Some((_, v)) = best {
                out.set(y, x, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spec_reproduces_hr() {
        let s = synth_scene(3, 16, &DegradationSpec::identity(1)).unwrap();
        assert_eq!(s.lr_depth, s.hr_depth);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = DegradationSpec {
            blur_kernel: Kernel::isotropic(5, 1.0).unwrap(),
            scale: 2,
            noise_std: 0.01,
            hole_rate: 0.05,
            seed: 9,
        };
        let a = synth_scene(42, 32, &spec).unwrap();
        let b = synth_scene(42, 32, &spec).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(43, 32, &spec).unwrap();
        assert_ne!(a.hr_depth, c.hr_depth);
    }

    #[test]
    fn depth_and_color_ranges() {
        for seed in 0..20 {
            let s = synth_scene(seed, 32, &DegradationSpec::identity(2)).unwrap();
            assert!(s.hr_depth.values().iter().all(|&v| (0.5..=4.5).contains(&v)));
            assert!(s.rgb.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.lr_depth.dims(), (16, 16));
            assert_eq!(s.gt_mask.count(), 32 * 32);
        }
    }

    #[test]
    fn holes_are_filled_from_nearest_valid() {
        let d = DepthMap::new(1, 5, vec![1.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        let f = fill_holes(&d);
        assert_eq!(f.values(), &[1.0, 1.0, 1.0, 3.0, 3.0]);
        let d = DepthMap::new(3, 3, vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(fill_holes(&d).values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn bad_specs_rejected() {
        let mut spec = DegradationSpec::identity(2);
        assert!(synth_scene(0, 31, &spec).is_err());
        spec.hole_rate = 1.0;
        assert!(synth_scene(0, 32, &spec).is_err());
        spec.hole_rate = 0.0;
        spec.noise_std = -0.1;
        assert!(synth_scene(0, 32, &spec).is_err());
    }
}
