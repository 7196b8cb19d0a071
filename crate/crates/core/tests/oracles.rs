//! Value-level operations against naive loop oracles and hand-computed cases.

mod common;

use common::*;
use rand::Rng;

use dornet_core::degradation::{effective_kernel, filter_and_sum, KernelEntry, KernelSet};
use dornet_core::depthio::{bicubic_resize, cubic_weight, degrade_clean, DepthMap, Kernel, ValidMask};
use dornet_core::evaluate::rmse_valid;
use dornet_core::fusion::deform_conv;
use dornet_core::objective::{degradation_loss, reconstruction_loss};
use dornet_core::Tensor;

#[test]
fn filter_and_sum_matches_loop() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(5..14), r.random_range(5..14));
        let set = random_kernel_set(&mut r, 4, 3);
        let d = random_depth(&mut r, h, w);
        let got: Vec<f64> = filter_and_sum(&set, &d).unwrap().values().iter().map(|&v| v as f64).collect();
        assert!(max_abs_diff(&got, &filter_and_sum_loop(&set, &d)) <= 1e-6, "seed {seed}");
    }
}

#[test]
fn effective_kernel_is_equivalent_to_the_set() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let set = random_kernel_set(&mut r, 4, 3);
        let eff = effective_kernel(&set).unwrap();
        assert_eq!(eff.side(), 9);
        // on maps of at least 9 pixels the reflected taps agree
        let d = random_depth(&mut r, 12, 11);
        let single = KernelSet { entries: vec![KernelEntry { expert: 3, side: 9, weight: 1.0, values: eff.values().to_vec() }] };
        let a = filter_and_sum(&set, &d).unwrap();
        let b = filter_and_sum(&single, &d).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }
}

#[test]
fn effective_kernel_two_uniform_kernels() {
    let set = KernelSet {
        entries: vec![
            KernelEntry { expert: 0, side: 3, weight: 0.4, values: vec![0.4 / 9.0; 9] },
            KernelEntry { expert: 1, side: 5, weight: 0.6, values: vec![0.6 / 25.0; 25] },
        ],
    };
    let eff = effective_kernel(&set).unwrap();
    assert!((eff.get(4, 4) - (0.4 / 9.0 + 0.6 / 25.0)).abs() < 1e-12);
    assert!((eff.get(2, 2) - 0.6 / 25.0).abs() < 1e-12);
    assert_eq!(eff.get(1, 4), 0.0);
    assert!((eff.mass() - 1.0).abs() < 1e-12);
}

#[test]
fn deform_conv_zero_offsets_is_dense_conv() {
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let (cin, cout, h, w) = (r.random_range(1..4), r.random_range(1..4), r.random_range(3..9), r.random_range(3..9));
        let x = random_tensor(&mut r, &[cin, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut r, &[cout, cin, 3, 3], -1.0, 1.0);
        let off = Tensor::zeros(&[18, h, w]);
        let m = Tensor::full(&[9, h, w], 1.0);
        let got = deform_conv(&x, &off, &m, &wt).unwrap();
        assert!(max_abs_diff(got.data(), &conv3x3_loop(&x, &wt)) <= 1e-6, "seed {seed}");
    }
}

#[test]
fn deform_conv_half_pixel_shift_on_ramp() {
    let (h, w) = (4, 6);
    let x = Tensor::from_vec(&[1, h, w], (0..h * w).map(|i| (i % w) as f64).collect()).unwrap();
    let mut wt = Tensor::zeros(&[1, 1, 3, 3]);
    wt.data_mut()[4] = 1.0;
    let mut off = Tensor::zeros(&[18, h, w]);
    for k in 0..9 {
        off.data_mut()[(2 * k + 1) * h * w..(2 * k + 2) * h * w].fill(0.5);
    }
    let m = Tensor::full(&[9, h, w], 1.0);
    let out = deform_conv(&x, &off, &m, &wt).unwrap();
    for y in 0..h {
        for xx in 0..w {
            // average of columns x and x+1; the right neighbour of the last column reads 0
            let right = if xx + 1 < w { (xx + 1) as f64 } else { 0.0 };
            let expect = 0.5 * xx as f64 + 0.5 * right;
            assert!((out.data()[y * w + xx] - expect).abs() < 1e-12, "({y},{xx})");
        }
    }
}

#[test]
fn deform_conv_zero_modulation_is_zero() {
    let mut r = rng(7);
    let x = random_tensor(&mut r, &[2, 5, 5], -1.0, 1.0);
    let wt = random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let off = random_tensor(&mut r, &[18, 5, 5], -2.0, 2.0);
    let out = deform_conv(&x, &off, &Tensor::zeros(&[9, 5, 5]), &wt).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn deform_conv_rejects_bad_shapes() {
    let x = Tensor::<f64>::zeros(&[2, 5, 5]);
    let wt = Tensor::zeros(&[3, 2, 3, 3]);
    assert!(deform_conv(&x, &Tensor::zeros(&[9, 5, 5]), &Tensor::zeros(&[9, 5, 5]), &wt).is_err());
    assert!(deform_conv(&x, &Tensor::zeros(&[18, 5, 5]), &Tensor::zeros(&[9, 4, 5]), &wt).is_err());
    assert!(deform_conv(&x, &Tensor::zeros(&[18, 5, 5]), &Tensor::zeros(&[9, 5, 5]), &Tensor::zeros(&[3, 1, 3, 3])).is_err());
}

/// Non-separable evaluation of the Catmull-Rom resize.
fn bicubic_loop(d: &DepthMap, s: usize) -> Vec<f64> {
    let (h, w) = d.dims();
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = (y as f64 / s as f64, x as f64 / s as f64);
            let (by, bx) = (sy.floor(), sx.floor());
            let mut acc = 0.0;
            for m in -1..=2 {
                for n in -1..=2 {
                    let wy = cubic_weight(sy - by - m as f64);
                    let wx = cubic_weight(sx - bx - n as f64);
                    let v = d.get(mirror(by as isize + m, h), mirror(bx as isize + n, w)) as f64;
                    acc += wy * wx * v;
                }
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

#[test]
fn bicubic_matches_loop() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let (h, w) = (r.random_range(3..10), r.random_range(3..10));
        let d = random_depth(&mut r, h, w);
        for s in [2, 4] {
            let up = bicubic_resize(&d, s as f64).unwrap();
            let got: Vec<f64> = up.values().iter().map(|&v| v as f64).collect();
            assert!(max_abs_diff(&got, &bicubic_loop(&d, s)) < 1e-5);
            // integer upscale interpolates: output pixel s*j is input pixel j
            assert_eq!(up.get(0, s), d.get(0, 1));
        }
    }
}

#[test]
fn degrade_clean_matches_loop() {
    let k = Kernel::gaussian(7, 1.6, 0.8, 30.0).unwrap();
    let mut r = rng(3);
    let hr = random_depth(&mut r, 16, 12);
    let lr = degrade_clean(&hr, &k, 2).unwrap();
    assert_eq!(lr.dims(), (8, 6));
    for y in 0..8 {
        for x in 0..6 {
            let mut acc = 0.0;
            for ky in 0..7 {
                for kx in 0..7 {
                    let sy = mirror(2 * y as isize + ky as isize - 3, 16);
                    let sx = mirror(2 * x as isize + kx as isize - 3, 12);
                    acc += k.get(ky, kx) * hr.get(sy, sx) as f64;
                }
            }
            assert!((lr.get(y, x) as f64 - acc).abs() < 1e-5);
        }
    }
}

#[test]
fn rmse_valid_matches_loop() {
    for seed in 0..50 {
        let mut r = rng(300 + seed);
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let gt = random_depth(&mut r, h, w);
        let pred = random_depth(&mut r, h, w);
        let mask = random_mask(&mut r, h, w);
        let (mut se, mut n) = (0.0, 0);
        for i in 0..h * w {
            if mask.values()[i] {
                se += (pred.values()[i] as f64 - gt.values()[i] as f64).powi(2);
                n += 1;
            }
        }
        let expect = (se / n as f64).sqrt() * 100.0;
        assert!((rmse_valid(&pred, &gt, &mask).unwrap() - expect).abs() < 1e-9);
    }
}

#[test]
fn rmse_valid_hand_example() {
    let gt = DepthMap::new(1, 2, vec![1.0, 2.0]).unwrap();
    let pred = DepthMap::new(1, 2, vec![1.05, 2.0]).unwrap();
    let v = rmse_valid(&pred, &gt, &ValidMask::all(1, 2)).unwrap();
    assert!((v - 3.5355).abs() < 1e-3);
    let none = ValidMask::new(1, 2, vec![false, false]).unwrap();
    assert!(rmse_valid(&pred, &gt, &none).is_err());
}

#[test]
fn losses_match_loops() {
    let mut r = rng(11);
    let items: Vec<(DepthMap, DepthMap, ValidMask)> =
        (0..3).map(|_| (random_depth(&mut r, 6, 7), random_depth(&mut r, 6, 7), random_mask(&mut r, 6, 7))).collect();
    let mut rec = 0.0;
    let mut deg = 0.0;
    for (a, b, m) in &items {
        let (mut s, mut n, mut t) = (0.0, 0, 0.0);
        for i in 0..42 {
            let d = (a.values()[i] as f64 - b.values()[i] as f64).abs();
            t += d;
            if m.values()[i] {
                s += d;
                n += 1;
            }
        }
        rec += s / n as f64 / 3.0;
        deg += t / 42.0 / 3.0;
    }
    let rb: Vec<_> = items.iter().map(|(a, b, m)| (a, b, m)).collect();
    let db: Vec<_> = items.iter().map(|(a, b, _)| (a, b)).collect();
    assert!((reconstruction_loss(&rb).unwrap() - rec).abs() < 1e-9);
    assert!((degradation_loss(&db).unwrap() - deg).abs() < 1e-9);
}
