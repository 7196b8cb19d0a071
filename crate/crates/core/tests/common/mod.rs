//! Naive loop oracles and random fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dornet_core::degradation::{generator_side, KernelEntry, KernelSet, RouterDecision};
use dornet_core::depthio::{DepthMap, ValidMask};
use dornet_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mirror index without repeating the edge sample, computed by walking.
pub fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn random_depth(r: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap {
    DepthMap::new(h, w, (0..h * w).map(|_| r.random_range(0.2f32..4.8)).collect()).unwrap()
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> ValidMask {
    let mut v: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.7)).collect();
    v[0] = true;
    ValidMask::new(h, w, v).unwrap()
}

/// Random kernel set: random scores over `g` experts, top-k routing and
/// softmaxed random logits per kernel, scaled by the router weight.
pub fn random_kernel_set(r: &mut ChaCha8Rng, g: usize, k: usize) -> KernelSet {
    let scores: Vec<f64> = (0..g).map(|_| r.random_range(-2.0..2.0)).collect();
    let d = RouterDecision::from_scores(&scores, k).unwrap();
    let entries = d
        .indices
        .iter()
        .zip(&d.weights)
        .map(|(&e, &wgt)| {
            let side = generator_side(e);
            let logits: Vec<f64> = (0..side * side).map(|_| r.random_range(-2.0..2.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            KernelEntry { expert: e, side, weight: wgt, values: logits.iter().map(|l| l.exp() / z * wgt).collect() }
        })
        .collect();
    KernelSet { entries }
}

/// `sum_j sum_{ky,kx} S_j[ky][kx] * d[mirror(y+ky-r)][mirror(x+kx-r)]`.
pub fn filter_and_sum_loop(set: &KernelSet, d: &DepthMap) -> Vec<f64> {
    let (h, w) = d.dims();
    let mut out = vec![0.0; h * w];
    for e in &set.entries {
        let r = (e.side / 2) as isize;
        for y in 0..h {
            for x in 0..w {
                for ky in 0..e.side {
                    for kx in 0..e.side {
                        let sy = mirror(y as isize + ky as isize - r, h);
                        let sx = mirror(x as isize + kx as isize - r, w);
                        out[y * w + x] += e.values[ky * e.side + kx] * d.get(sy, sx) as f64;
                    }
                }
            }
        }
    }
    out
}

/// Dense 3x3 zero-padded cross-correlation, `w: [Cout, Cin, 3, 3]`.
pub fn conv3x3_loop(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let (cin, h, wd) = x.chw();
    let cout = w.shape()[0];
    let mut out = vec![0.0; cout * h * wd];
    for co in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                * x.data()[(ci * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
                out[(co * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
