use super::kernels::{self, ConvGeom, DeformGeom, DCN_TAPS};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Relu,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ReflectPad { x: Var, pad: usize },
    Deform { x: Var, offset: Var, mask: Var, w: Var, geom: DeformGeom, sampled: Vec<T> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    ChannelScale { x: Var, s: Var },
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    Softmax(Var),
    ScaleByElem { x: Var, s: Var, idx: usize },
    AvgPool2(Var),
    MeanAbsDiff { a: Var, b: Var, mask: Option<Vec<bool>>, count: usize },
    Ratio { num: Var, den: Var, eps: T },
    Sum(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape. Values are computed eagerly as ops are recorded.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input (gradient is tracked).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `x: [Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`. Zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be 4-D");
        assert_eq!(ws[1], cin, "conv input channels");
        let geom = ConvGeom { cin, h, w: wd, cout: ws[0], kh: ws[2], kw: ws[3], stride, pad };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let (oh, ow) = geom.out_hw();
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::from_vec(&[geom.cout, oh, ow], out).unwrap(),
            Op::Conv2d { x, w, b, geom },
            ng,
        )
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let out = kernels::reflect_pad_forward(self.value(x).data(), c, h, w, pad);
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[c, h + 2 * pad, w + 2 * pad], out).unwrap(),
            Op::ReflectPad { x, pad },
            ng,
        )
    }

    /// Modulated 3x3 deformable convolution (stride 1, pad 1, no bias).
    /// `offset: [18, H, W]` as `(dy, dx)` per tap, `mask: [9, H, W]`,
    /// `w: [Cout, Cin, 3, 3]`.
    pub fn deform_conv(&mut self, x: Var, offset: Var, mask: Var, w: Var) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws, vec![ws[0], cin, 3, 3], "deform conv weight shape");
        assert_eq!(self.shape(offset), &[2 * DCN_TAPS, h, wd], "offset shape");
        assert_eq!(self.shape(mask), &[DCN_TAPS, h, wd], "modulation shape");
        let geom = DeformGeom { cin, cout: ws[0], h, w: wd };
        let sampled =
            kernels::deform_sample(&geom, self.value(x).data(), self.value(offset).data());
        let out = kernels::deform_forward(
            &geom,
            &sampled,
            self.value(mask).data(),
            self.value(w).data(),
        );
        let ng = self.ng(x) || self.ng(offset) || self.ng(mask) || self.ng(w);
        self.push(
            Tensor::from_vec(&[geom.cout, h, wd], out).unwrap(),
            Op::Deform { x, offset, mask, w, geom, sampled },
            ng,
        )
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Var {
        same_shape(self.value(a), self.value(b), what);
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, f: T) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(f);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, f), ng)
    }

    pub fn act(&mut self, x: Var, a: Activation) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&z| match a {
                Activation::Silu => z * sigmoid(z),
                Activation::Sigmoid => sigmoid(z),
                Activation::Relu => z.max(T::zero()),
            })
            .collect();
        let out = Tensor::from_vec(v.shape(), data).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::Act(x, a), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.act(x, Activation::Sigmoid)
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[1..], sb[1..], "concat: trailing dims differ");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Concat(a, b), ng)
    }

    /// `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let d = self.value(x).data();
        let data = (0..c).map(|ch| d[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c], data).unwrap(), Op::GlobalAvgPool(x), ng)
    }

    /// `x: [n]`, `w: [m, n]`, `b: [m]` -> `[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n = self.value(x).len();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        assert_eq!(ws[1], n, "linear input width");
        let m = ws[0];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let data = (0..m).map(|r| bv[r] + kernels::dot(&wv[r * n..(r + 1) * n], xv)).collect();
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::from_vec(&[m], data).unwrap(), Op::Linear { x, w, b }, ng)
    }

    /// Scale each channel of `x: [C, H, W]` by `s: [C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(s).len(), c, "channel scale length");
        let hw = h * w;
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for ch in 0..c {
            out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v *= sv[ch]);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ChannelScale { x, s }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape).expect("reshape element count");
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Select entries of a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let d = self.value(x).data();
        let data = idx.iter().map(|&i| d[i]).collect();
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[idx.len()], data).unwrap(),
            Op::Gather { x, idx: idx.to_vec() },
            ng,
        )
    }

    /// Softmax over all entries of `x`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), softmax(v.data())).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// `x * s[idx]` for a 1-D `s`.
    pub fn scale_by_elem(&mut self, x: Var, s: Var, idx: usize) -> Var {
        let f = self.value(s).data()[idx];
        let mut out = self.value(x).clone();
        out.scale_assign(f);
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ScaleByElem { x, s, idx }, ng)
    }

    /// 2x2 average pooling, floor on odd dims.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let out = kernels::avg_pool2_forward(self.value(x).data(), c, h, w);
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, h / 2, w / 2], out).unwrap(), Op::AvgPool2(x), ng)
    }

    /// Mean of `|a - b|`, optionally restricted to `mask`. Scalar output.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var, mask: Option<&[bool]>) -> Var {
        same_shape(self.value(a), self.value(b), "mean_abs_diff");
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (sum, count) = match mask {
            Some(m) => {
                assert_eq!(m.len(), va.len(), "mask length");
                va.iter().zip(vb).zip(m).filter(|(_, &keep)| keep).fold(
                    (T::zero(), 0usize),
                    |(s, n), ((&x, &y), _)| (s + (x - y).abs(), n + 1),
                )
            }
            None => (va.iter().zip(vb).map(|(&x, &y)| (x - y).abs()).sum(), va.len()),
        };
        assert!(count > 0, "mean_abs_diff over an empty set");
        let value = sum / T::lit(count as f64);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::scalar(value),
            Op::MeanAbsDiff { a, b, mask: mask.map(|m| m.to_vec()), count },
            ng,
        )
    }

    /// Scalar `num / (den + eps)`.
    pub fn ratio(&mut self, num: Var, den: Var, eps: T) -> Var {
        let v = self.value(num).item() / (self.value(den).item() + eps);
        let ng = self.ng(num) || self.ng(den);
        self.push(Tensor::scalar(v), Op::Ratio { num, den, eps }, ng)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum of nothing");
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            same_shape(&out, self.value(x), "sum");
            out.add_assign(self.value(x));
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(out, Op::Sum(xs.to_vec()), ng)
    }

    /// Reverse pass from a scalar output. Returns per-node gradients
    /// (`None` for nodes that do not influence `out` or carry no gradient).
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.nodes[out.0].value.shape().to_vec();
        grads[out.0] = Some(Tensor::full(&seed_shape, T::one()));
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape();
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(data) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(Tensor::from_vec(shape, data).unwrap()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.ng(*x) {
                    acc(*x, kernels::conv2d_backward_input(geom, gd, self.value(*w).data()));
                }
                if self.ng(*w) || b.is_some_and(|b| self.ng(b)) {
                    let (gw, gb) = kernels::conv2d_backward_params(geom, gd, self.value(*x).data());
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
            }
            Op::ReflectPad { x, pad } => {
                let (c, h, w) = self.value(*x).chw();
                acc(*x, kernels::reflect_pad_backward(gd, c, h, w, *pad));
            }
            Op::Deform { x, offset, mask, w, geom, sampled } => {
                let r = kernels::deform_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*offset).data(),
                    self.value(*mask).data(),
                    self.value(*w).data(),
                    sampled,
                    gd,
                );
                acc(*x, r.x);
                acc(*offset, r.offset);
                acc(*mask, r.mask);
                acc(*w, r.w);
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    acc(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.ng(*b) {
                    acc(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(x, f) => acc(*x, gd.iter().map(|&v| v * *f).collect()),
            Op::Act(x, a) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let data = gd
                    .iter()
                    .zip(xv)
                    .zip(yv)
                    .map(|((&g, &z), &y)| match a {
                        Activation::Silu => {
                            let s = sigmoid(z);
                            g * (s + z * s * (T::one() - s))
                        }
                        Activation::Sigmoid => g * y * (T::one() - y),
                        Activation::Relu => {
                            if z > T::zero() {
                                g
                            } else {
                                T::zero()
                            }
                        }
                    })
                    .collect();
                acc(*x, data);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                acc(*a, gd[..na].to_vec());
                acc(*b, gd[na..].to_vec());
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).chw();
                let hw = h * w;
                let inv = T::one() / T::lit(hw as f64);
                let mut data = vec![T::zero(); c * hw];
                for ch in 0..c {
                    data[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = gd[ch] * inv);
                }
                acc(*x, data);
            }
            Op::Linear { x, w, b } => {
                let n = self.value(*x).len();
                let m = gd.len();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.ng(*x) {
                    let mut gx = vec![T::zero(); n];
                    for r in 0..m {
                        kernels::axpy(gd[r], &wv[r * n..(r + 1) * n], &mut gx);
                    }
                    acc(*x, gx);
                }
                if self.ng(*w) {
                    let mut gw = vec![T::zero(); m * n];
                    for r in 0..m {
                        kernels::axpy(gd[r], xv, &mut gw[r * n..(r + 1) * n]);
                    }
                    acc(*w, gw);
                }
                acc(*b, gd.to_vec());
            }
            Op::ChannelScale { x, s } => {
                let (c, h, w) = self.value(*x).chw();
                let hw = h * w;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if self.ng(*x) {
                    let mut gx = gd.to_vec();
                    for ch in 0..c {
                        gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v *= sv[ch]);
                    }
                    acc(*x, gx);
                }
                if self.ng(*s) {
                    let gs = (0..c)
                        .map(|ch| kernels::dot(&gd[ch * hw..(ch + 1) * hw], &xv[ch * hw..(ch + 1) * hw]))
                        .collect();
                    acc(*s, gs);
                }
            }
            Op::Reshape(x) => acc(*x, gd.to_vec()),
            Op::Gather { x, idx } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&i, &gv) in idx.iter().zip(gd) {
                    gx[i] += gv;
                }
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let inner: T = gd.iter().zip(y).map(|(&g, &p)| g * p).sum();
                acc(*x, gd.iter().zip(y).map(|(&g, &p)| p * (g - inner)).collect());
            }
            Op::ScaleByElem { x, s, idx } => {
                let f = self.value(*s).data()[*idx];
                if self.ng(*x) {
                    acc(*x, gd.iter().map(|&v| v * f).collect());
                }
                if self.ng(*s) {
                    let mut gs = vec![T::zero(); self.value(*s).len()];
                    gs[*idx] = kernels::dot(gd, self.value(*x).data());
                    acc(*s, gs);
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw();
                acc(*x, kernels::avg_pool2_backward(gd, c, h, w));
            }
            Op::MeanAbsDiff { a, b, mask, count } => {
                let scale = gd[0] / T::lit(*count as f64);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .enumerate()
                    .map(|(i, (&x, &y))| {
                        if mask.as_ref().is_some_and(|m| !m[i]) {
                            return T::zero();
                        }
                        let d = x - y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.ng(*b) {
                    acc(*b, ga.iter().map(|&v| -v).collect());
                }
                acc(*a, ga);
            }
            Op::Ratio { num, den, eps } => {
                let n = self.value(*num).item();
                let d = self.value(*den).item() + *eps;
                acc(*num, vec![gd[0] / d]);
                acc(*den, vec![-gd[0] * n / (d * d)]);
            }
            Op::Sum(xs) => {
                for &x in xs {
                    acc(x, gd.to_vec());
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
