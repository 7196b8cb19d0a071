//! Numeric kernels shared by the tape ops and the value-level helpers.
//!
//! Images are `[C, H, W]` row-major slices. Convolutions follow the deep-learning
//! convention (cross-correlation, no kernel flip).

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.h + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (self.w + 2 * self.pad - self.kw) / self.stride + 1;
        (oh, ow)
    }

    /// Half-open range of output indices whose tap `k` lands inside `[0, n)`.
    #[inline]
    fn valid(&self, out_n: usize, k: usize, n: usize) -> (usize, usize) {
        let lo = if self.pad > k { (self.pad - k).div_ceil(self.stride) } else { 0 };
        if n + self.pad <= k {
            return (0, 0);
        }
        let hi = ((n - 1 + self.pad - k) / self.stride + 1).min(out_n);
        (lo.min(hi), hi)
    }
}

#[inline]
pub fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    for v in acc {
        s += v;
    }
    s
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let mut out = vec![T::zero(); g.cout * plane];
    for co in 0..g.cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.cin {
            let xp = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(oh, ky, g.h);
                for kx in 0..g.kw {
                    let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid(ow, kx, g.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            axpy(wv, &xrow[ix0..ix0 + (ox1 - ox0)], &mut orow[ox0..ox1]);
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input<T: Real>(g: &ConvGeom, gout: &[T], wt: &[T]) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let mut gx = vec![T::zero(); g.cin * g.h * g.w];
    for co in 0..g.cout {
        let go = &gout[co * plane..(co + 1) * plane];
        for ci in 0..g.cin {
            let gxp = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(oh, ky, g.h);
                for kx in 0..g.kw {
                    let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid(ow, kx, g.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * ow..(oy + 1) * ow];
                        let xrow = &mut gxp[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            axpy(wv, &grow[ox0..ox1], &mut xrow[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                xrow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradients of a convolution with respect to its weights and bias.
pub fn conv2d_backward_params<T: Real>(g: &ConvGeom, gout: &[T], x: &[T]) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let mut gw = vec![T::zero(); g.cout * g.cin * g.kh * g.kw];
    let mut gb = vec![T::zero(); g.cout];
    for co in 0..g.cout {
        let go = &gout[co * plane..(co + 1) * plane];
        gb[co] = go.iter().copied().sum();
        for ci in 0..g.cin {
            let xp = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(oh, ky, g.h);
                for kx in 0..g.kw {
                    let (ox0, ox1) = g.valid(ow, kx, g.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * ow..(oy + 1) * ow];
                        let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            acc += dot(&grow[ox0..ox1], &xrow[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                acc += grow[ox] * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                    gw[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    (gw, gb)
}

/// Symmetric reflection of an index into `[0, n)` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`). Works for arbitrarily far indices.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn reflect_pad_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); c * ph * pw];
    let cols: Vec<usize> = (0..pw).map(|x| reflect_index(x as isize - pad as isize, w)).collect();
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect_index(y as isize - pad as isize, h);
            let src = &x[(ch * h + sy) * w..(ch * h + sy + 1) * w];
            let dst = &mut out[(ch * ph + y) * pw..(ch * ph + y + 1) * pw];
            for (d, &sx) in dst.iter_mut().zip(&cols) {
                *d = src[sx];
            }
        }
    }
    out
}

pub fn reflect_pad_backward<T: Real>(gout: &[T], c: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut gx = vec![T::zero(); c * h * w];
    let cols: Vec<usize> = (0..pw).map(|x| reflect_index(x as isize - pad as isize, w)).collect();
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect_index(y as isize - pad as isize, h);
            let src = &gout[(ch * ph + y) * pw..(ch * ph + y + 1) * pw];
            let dst = &mut gx[(ch * h + sy) * w..(ch * h + sy + 1) * w];
            for (g, &sx) in src.iter().zip(&cols) {
                dst[sx] += *g;
            }
        }
    }
    gx
}

/// Bilinear corner taps at a fractional position; corners outside the image
/// get weight 0 (zero padding).
#[derive(Clone, Copy, Debug)]
pub struct Bilinear<T> {
    pub idx: [usize; 4],
    pub wt: [T; 4],
    /// d(weight)/dy and d(weight)/dx for each corner.
    pub dwy: [T; 4],
    pub dwx: [T; 4],
}

impl<T: Real> Bilinear<T> {
    #[inline]
    pub fn at(y: T, x: T, h: usize, w: usize) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let hy = T::one() - ly;
        let hx = T::one() - lx;
        let iy0 = y0.to_isize().unwrap_or(isize::MIN / 2);
        let ix0 = x0.to_isize().unwrap_or(isize::MIN / 2);
        let mut b = Bilinear {
            idx: [0; 4],
            wt: [T::zero(); 4],
            dwy: [T::zero(); 4],
            dwx: [T::zero(); 4],
        };
        let corners = [
            (iy0, ix0, hy * hx, -hx, -hy),
            (iy0, ix0 + 1, hy * lx, -lx, hy),
            (iy0 + 1, ix0, ly * hx, hx, -ly),
            (iy0 + 1, ix0 + 1, ly * lx, lx, ly),
        ];
        for (n, &(cy, cx, wv, dy, dx)) in corners.iter().enumerate() {
            if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                b.idx[n] = cy as usize * w + cx as usize;
                b.wt[n] = wv;
                b.dwy[n] = dy;
                b.dwx[n] = dx;
            }
        }
        b
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        self.wt[0] * plane[self.idx[0]]
            + self.wt[1] * plane[self.idx[1]]
            + self.wt[2] * plane[self.idx[2]]
            + self.wt[3] * plane[self.idx[3]]
    }
}

/// Geometry of a 3x3, stride-1, pad-1 modulated deformable convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub const DCN_TAPS: usize = 9;

/// Bilinear samples for every (input channel, tap, pixel); layout `[cin * 9 + k][p]`.
/// Offsets are `[2 * 9, H, W]` with `(dy, dx)` pairs per tap.
pub fn deform_sample<T: Real>(g: &DeformGeom, x: &[T], offset: &[T]) -> Vec<T> {
    let hw = g.h * g.w;
    let mut sampled = vec![T::zero(); g.cin * DCN_TAPS * hw];
    for k in 0..DCN_TAPS {
        let (ky, kx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
        for py in 0..g.h {
            for px in 0..g.w {
                let p = py * g.w + px;
                let y = T::lit(py as f64 + ky) + offset[2 * k * hw + p];
                let xx = T::lit(px as f64 + kx) + offset[(2 * k + 1) * hw + p];
                let b = Bilinear::at(y, xx, g.h, g.w);
                for ci in 0..g.cin {
                    sampled[(ci * DCN_TAPS + k) * hw + p] = b.sample(&x[ci * hw..(ci + 1) * hw]);
                }
            }
        }
    }
    sampled
}

/// `out[co][p] = sum_j w[co][j] * mask[j % 9][p] * sampled[j][p]`.
pub fn deform_forward<T: Real>(g: &DeformGeom, sampled: &[T], mask: &[T], wt: &[T]) -> Vec<T> {
    let hw = g.h * g.w;
    let j_n = g.cin * DCN_TAPS;
    let mut col = vec![T::zero(); j_n * hw];
    for j in 0..j_n {
        let k = j % DCN_TAPS;
        let m = &mask[k * hw..(k + 1) * hw];
        let s = &sampled[j * hw..(j + 1) * hw];
        for ((c, &mv), &sv) in col[j * hw..(j + 1) * hw].iter_mut().zip(m).zip(s) {
            *c = mv * sv;
        }
    }
    let mut out = vec![T::zero(); g.cout * hw];
    for co in 0..g.cout {
        let o = &mut out[co * hw..(co + 1) * hw];
        for j in 0..j_n {
            axpy(wt[co * j_n + j], &col[j * hw..(j + 1) * hw], o);
        }
    }
    out
}

pub struct DeformGrads<T> {
    pub x: Vec<T>,
    pub offset: Vec<T>,
    pub mask: Vec<T>,
    pub w: Vec<T>,
}

pub fn deform_backward<T: Real>(
    g: &DeformGeom,
    x: &[T],
    offset: &[T],
    mask: &[T],
    wt: &[T],
    sampled: &[T],
    gout: &[T],
) -> DeformGrads<T> {
    let hw = g.h * g.w;
    let j_n = g.cin * DCN_TAPS;

    // d/d(col) and d/d(w)
    let mut gcol = vec![T::zero(); j_n * hw];
    let mut gw = vec![T::zero(); g.cout * j_n];
    for co in 0..g.cout {
        let go = &gout[co * hw..(co + 1) * hw];
        for j in 0..j_n {
            axpy(wt[co * j_n + j], go, &mut gcol[j * hw..(j + 1) * hw]);
        }
    }
    let mut col = vec![T::zero(); hw];
    for j in 0..j_n {
        let k = j % DCN_TAPS;
        let m = &mask[k * hw..(k + 1) * hw];
        let s = &sampled[j * hw..(j + 1) * hw];
        for ((c, &mv), &sv) in col.iter_mut().zip(m).zip(s) {
            *c = mv * sv;
        }
        for co in 0..g.cout {
            gw[co * j_n + j] = dot(&gout[co * hw..(co + 1) * hw], &col);
        }
    }

    let mut gmask = vec![T::zero(); DCN_TAPS * hw];
    let mut goff = vec![T::zero(); 2 * DCN_TAPS * hw];
    let mut gx = vec![T::zero(); g.cin * hw];
    for k in 0..DCN_TAPS {
        let (ky, kx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
        for py in 0..g.h {
            for px in 0..g.w {
                let p = py * g.w + px;
                let y = T::lit(py as f64 + ky) + offset[2 * k * hw + p];
                let xx = T::lit(px as f64 + kx) + offset[(2 * k + 1) * hw + p];
                let b = Bilinear::at(y, xx, g.h, g.w);
                let mv = mask[k * hw + p];
                let (mut gm, mut gy, mut gxo) = (T::zero(), T::zero(), T::zero());
                for ci in 0..g.cin {
                    let j = ci * DCN_TAPS + k;
                    let gc = gcol[j * hw + p];
                    if gc == T::zero() {
                        continue;
                    }
                    gm += gc * sampled[j * hw + p];
                    let gs = gc * mv;
                    let plane = &x[ci * hw..(ci + 1) * hw];
                    let gplane = &mut gx[ci * hw..(ci + 1) * hw];
                    for n in 0..4 {
                        let v = plane[b.idx[n]];
                        gy += gs * b.dwy[n] * v;
                        gxo += gs * b.dwx[n] * v;
                        gplane[b.idx[n]] += gs * b.wt[n];
                    }
                }
                gmask[k * hw + p] = gm;
                goff[2 * k * hw + p] = gy;
                goff[(2 * k + 1) * hw + p] = gxo;
            }
        }
    }
    DeformGrads { x: gx, offset: goff, mask: gmask, w: gw }
}

pub fn avg_pool2_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[(ch * oh + y) * ow + xx] = s * q;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(gout: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let gv = gout[(ch * oh + y) * ow + xx] * q;
                let base = ch * h * w;
                gx[base + 2 * y * w + 2 * xx] += gv;
                gx[base + 2 * y * w + 2 * xx + 1] += gv;
                gx[base + (2 * y + 1) * w + 2 * xx] += gv;
                gx[base + (2 * y + 1) * w + 2 * xx + 1] += gv;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_folds() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-3, 4), 3);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(6, 4), 0);
        assert_eq!(reflect_index(-7, 4), 1);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn strided_conv_matches_loop() {
        let g = ConvGeom { cin: 2, h: 7, w: 6, cout: 3, kh: 3, kw: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13) % 7) as f64 * 0.1).collect();
        let out = conv2d_forward(&g, &x, &wt, None);
        let (oh, ow) = g.out_hw();
        for co in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && iy < 7 && ix < 6 {
                                    s += wt[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x[(ci * 7 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((s - out[(co * oh + oy) * ow + ox]).abs() < 1e-12);
                }
            }
        }
    }
}
