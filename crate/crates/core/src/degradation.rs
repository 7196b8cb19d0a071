//! Degradation learning and degradation regularization.
//!
//! The upsampled depth is encoded into a spatial degradation map and a global
//! degradation code. A routing encoder scores `g` kernel generators of sizes
//! `3, 5, 7, ...`; the top `k` are kept and softmax-weighted. Each selected
//! generator maps the code to a kernel whose entries sum to its router weight,
//! so the whole set has unit mass. Reblurring the predicted HR depth with the
//! set (filter-and-sum) gives the degraded depth compared against the input.

use crate::autograd::kernels::{reflect_index, reflect_pad_forward};
use crate::autograd::{softmax, Tape, Var};
use crate::depthio::{DepthMap, Kernel};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, Linear, ParamBuilder, ParamId, ResBlock};
use crate::tensor::{Real, Tensor};

/// Smallest side of [`effective_kernel`] output.
pub const EFFECTIVE_KERNEL_SIDE: usize = 9;

/// Spatial degradation representation, `[C, H, W]` at HR resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationMap(pub Tensor<f32>);

/// Global degradation representation.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationCode(pub Vec<f32>);

/// Top-k routing result. `indices[j]` is a 0-based generator id (generator `i`
/// in 1-based size terms has side `2 * (indices[j] + 1) + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Top-k by score, ties resolved toward the lower index. Ordered by descending score.
pub fn top_k_indices<T: Real>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("router needs 1 <= k <= g, got k={k}, g={}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

impl RouterDecision {
    /// Softmax over the `k` selected scores only; unselected experts get no weight.
    pub fn from_scores(scores: &[f64], k: usize) -> Result<Self> {
        let indices = top_k_indices(scores, k)?;
        let sel: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
        Ok(Self { indices, weights: softmax(&sel) })
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Dense weight vector over all `g` experts (zeros for unselected).
    pub fn dense_weights(&self, g: usize) -> Vec<f64> {
        let mut w = vec![0.0; g];
        for (&i, &v) in self.indices.iter().zip(&self.weights) {
            w[i] = v;
        }
        w
    }

    pub fn weight_of(&self, expert: usize) -> Option<f64> {
        self.indices.iter().position(|&i| i == expert).map(|j| self.weights[j])
    }
}

/// Side of the kernel produced by 0-based generator `expert`.
pub fn generator_side(expert: usize) -> usize {
    2 * (expert + 1) + 1
}

/// One generated kernel; `values` sum to `weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelEntry {
    pub expert: usize,
    pub side: usize,
    pub weight: f64,
    pub values: Vec<f64>,
}

impl KernelEntry {
    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct KernelSet {
    pub entries: Vec<KernelEntry>,
}

impl KernelSet {
    pub fn mass(&self) -> f64 {
        self.entries.iter().map(KernelEntry::mass).sum()
    }

    pub fn max_side(&self) -> usize {
        self.entries.iter().map(|e| e.side).max().unwrap_or(1)
    }
}

fn check_entry(e: &KernelEntry) -> Result<()> {
    if e.side % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel side {} must be odd", e.side)));
    }
    if e.values.len() != e.side * e.side {
        return Err(Error::Shape(format!("kernel side {} with {} values", e.side, e.values.len())));
    }
    Ok(())
}

/// `D_d = sum_j conv(d_hr, S_j)` with reflect padding; output keeps `d_hr` dims.
pub fn filter_and_sum(kernels: &KernelSet, d_hr: &DepthMap) -> Result<DepthMap> {
    let (h, w) = d_hr.dims();
    let src: Vec<f64> = d_hr.values().iter().map(|&v| v as f64).collect();
    let mut out = vec![0f64; h * w];
    for e in &kernels.entries {
        check_entry(e)?;
        let r = e.side / 2;
        let padded = reflect_pad_forward(&src, 1, h, w, r);
        let pw = w + 2 * r;
        for y in 0..h {
            for ky in 0..e.side {
                let prow = &padded[(y + ky) * pw..(y + ky + 1) * pw];
                for kx in 0..e.side {
                    let kv = e.values[ky * e.side + kx];
                    let orow = &mut out[y * w..(y + 1) * w];
                    for (o, &p) in orow.iter_mut().zip(&prow[kx..kx + w]) {
                        *o += kv * p;
                    }
                }
            }
        }
    }
    DepthMap::new(h, w, out.into_iter().map(|v| v as f32).collect())
}

/// Single kernel equivalent to a kernel set: every kernel zero-padded to a
/// common side (at least 9, centers aligned) and summed.
pub fn effective_kernel(kernels: &KernelSet) -> Result<Kernel> {
    let side = kernels.max_side().max(EFFECTIVE_KERNEL_SIDE);
    let mut values = vec![0f64; side * side];
    for e in &kernels.entries {
        check_entry(e)?;
        let off = (side - e.side) / 2;
        for y in 0..e.side {
            for x in 0..e.side {
                values[(y + off) * side + x + off] += e.values[y * e.side + x];
            }
        }
    }
    Kernel::unnormalized(side, values)
}

/// Reference loop used by tests: reflect-padded correlation with one kernel.
pub fn correlate_entry(e: &KernelEntry, d: &DepthMap) -> Vec<f64> {
    let (h, w) = d.dims();
    let r = (e.side / 2) as isize;
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..e.side {
                for kx in 0..e.side {
                    let sy = reflect_index(y as isize + ky as isize - r, h);
                    let sx = reflect_index(x as isize + kx as isize - r, w);
                    acc += e.values[ky * e.side + kx] * d.get(sy, sx) as f64;
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// `f_rb` (stem + two residual blocks) followed by the strided encoder `E_d`.
#[derive(Clone, Debug)]
pub struct DegradationEncoder {
    stem: Conv,
    blocks: [ResBlock; 2],
    down1: Conv,
    down2: Conv,
    fc1: Linear,
    fc2: Linear,
}

impl DegradationEncoder {
    pub fn new(b: &mut ParamBuilder, c_deg: usize, c_code: usize) -> Self {
        Self {
            stem: b.conv("deg.stem", 1, c_deg, 3, 1, Init::He(1.0)),
            blocks: [ResBlock::new(b, "deg.rb0", c_deg), ResBlock::new(b, "deg.rb1", c_deg)],
            down1: b.conv("deg.enc.down1", c_deg, c_deg, 3, 2, Init::He(1.0)),
            down2: b.conv("deg.enc.down2", c_deg, 2 * c_deg, 3, 2, Init::He(1.0)),
            fc1: b.linear("deg.enc.fc1", 2 * c_deg, c_code, Init::He(1.0)),
            fc2: b.linear("deg.enc.fc2", c_code, c_code, Init::He(0.5)),
        }
    }

    /// Returns `(degradation map [c_deg, H, W], code [c_code])`.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, d_up: Var) -> (Var, Var) {
        let mut h = self.stem.apply(tape, p, d_up);
        for b in &self.blocks {
            h = b.apply(tape, p, h);
        }
        let dmap = h;
        let e = self.down1.apply(tape, p, dmap);
        let e = tape.silu(e);
        let e = self.down2.apply(tape, p, e);
        let e = tape.silu(e);
        let e = tape.global_avg_pool(e);
        let e = self.fc1.apply(tape, p, e);
        let e = tape.silu(e);
        let code = self.fc2.apply(tape, p, e);
        (dmap, code)
    }
}

/// `E_r`: two strided convs, global pooling and a linear head producing `g` scores.
#[derive(Clone, Debug)]
pub struct RoutingEncoder {
    c1: Conv,
    c2: Conv,
    pub head: Linear,
}

impl RoutingEncoder {
    pub fn new(b: &mut ParamBuilder, width: usize, g: usize) -> Self {
        Self {
            c1: b.conv("router.conv1", 1, width, 3, 2, Init::He(1.0)),
            c2: b.conv("router.conv2", width, width, 3, 2, Init::He(1.0)),
            head: b.linear("router.head", width, g, Init::He(1.0)),
        }
    }

    pub fn scores<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, d_up: Var) -> Var {
        let h = self.c1.apply(tape, p, d_up);
        let h = tape.silu(h);
        let h = self.c2.apply(tape, p, h);
        let h = tape.silu(h);
        let h = tape.global_avg_pool(h);
        self.head.apply(tape, p, h)
    }
}

/// Records top-k selection and the softmax over the selected scores.
/// Returns the selected expert ids and a `[k]` weight var.
pub fn route_on_tape<T: Real>(tape: &mut Tape<T>, scores: Var, k: usize) -> Result<(Vec<usize>, Var)> {
    let idx = top_k_indices(tape.value(scores).data(), k)?;
    let sel = tape.gather(scores, &idx);
    Ok((idx, tape.softmax(sel)))
}

/// `f_g^{2i+1}`: two-layer MLP from the code to `(2i+1)^2` kernel logits.
#[derive(Clone, Debug)]
pub struct KernelGenerator {
    pub expert: usize,
    pub side: usize,
    fc1: Linear,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl KernelGenerator {
    pub fn new(b: &mut ParamBuilder, expert: usize, c_code: usize, hidden: usize) -> Self {
        let side = generator_side(expert);
        let name = format!("gen{side}");
        let fc1 = b.linear(&format!("{name}.fc1"), c_code, hidden, Init::He(1.0));
        let fc2_w = b.tensor(&format!("{name}.fc2.weight"), &[side * side, hidden], hidden, Init::He(0.1));
        let fc2_b = b.tensor(&format!("{name}.fc2.bias"), &[side * side], 1, Init::Zero);
        Self { expert, side, fc1, fc2_w, fc2_b }
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, code: Var) -> Var {
        let h = self.fc1.apply(tape, p, code);
        let h = tape.silu(h);
        tape.linear(h, p.var(self.fc2_w), p.var(self.fc2_b))
    }

    /// `softmax(logits) * weights[slot]`, reshaped to `[1, 1, side, side]`.
    pub fn kernel<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, code: Var, weights: Var, slot: usize) -> Var {
        let l = self.logits(tape, p, code);
        let sm = tape.softmax(l);
        let k = tape.scale_by_elem(sm, weights, slot);
        tape.reshape(k, &[1, 1, self.side, self.side])
    }
}

/// Degradation learning + regularization parameters.
#[derive(Clone, Debug)]
pub struct DegradationModule {
    pub encoder: DegradationEncoder,
    pub router: RoutingEncoder,
    pub generators: Vec<KernelGenerator>,
    pub k: usize,
}

/// Vars produced by the degradation branch on a tape.
#[derive(Clone, Debug)]
pub struct DegradationVars {
    pub dmap: Var,
    pub code: Var,
    pub scores: Var,
    pub selected: Vec<usize>,
    pub weights: Var,
}

impl DegradationModule {
    pub fn new(b: &mut ParamBuilder, c_deg: usize, c_code: usize, g: usize, k: usize, gen_hidden: usize) -> Self {
        let encoder = DegradationEncoder::new(b, c_deg, c_code);
        let router = RoutingEncoder::new(b, c_deg, g);
        let generators = (0..g).map(|e| KernelGenerator::new(b, e, c_code, gen_hidden)).collect();
        Self { encoder, router, generators, k }
    }

    pub fn g(&self) -> usize {
        self.generators.len()
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, d_up: Var) -> Result<DegradationVars> {
        let (dmap, code) = self.encoder.apply(tape, p, d_up);
        let scores = self.router.scores(tape, p, d_up);
        let (selected, weights) = route_on_tape(tape, scores, self.k)?;
        Ok(DegradationVars { dmap, code, scores, selected, weights })
    }

    /// Kernel vars for every selected generator, in routing order.
    pub fn kernels<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, v: &DegradationVars) -> Vec<Var> {
        v.selected
            .iter()
            .enumerate()
            .map(|(slot, &e)| self.generators[e].kernel(tape, p, v.code, v.weights, slot))
            .collect()
    }

    /// Filter-and-sum of `d_hr: [1, H, W]` with kernel vars from [`Self::kernels`].
    pub fn reblur<T: Real>(&self, tape: &mut Tape<T>, kernels: &[Var], d_hr: Var) -> Var {
        let outs: Vec<Var> = kernels
            .iter()
            .map(|&k| {
                let r = tape.shape(k)[2] / 2;
                let padded = tape.reflect_pad(d_hr, r);
                tape.conv2d(padded, k, None, 1, 0)
            })
            .collect();
        tape.sum(&outs)
    }

    /// Materialize kernel vars as a [`KernelSet`].
    pub fn kernel_set<T: Real>(&self, tape: &Tape<T>, v: &DegradationVars, kernels: &[Var]) -> KernelSet {
        let weights = tape.value(v.weights).data();
        KernelSet {
            entries: v
                .selected
                .iter()
                .zip(kernels)
                .enumerate()
                .map(|(slot, (&e, &kv))| KernelEntry {
                    expert: e,
                    side: generator_side(e),
                    weight: weights[slot].as_f64(),
                    values: tape.value(kv).data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }
}

/// Kernel for expert `expert` given a routing decision and a code, computed
/// with the module's generator parameters.
pub fn generate_kernel<T: Real>(
    module: &DegradationModule,
    params: &crate::nn::ParamStore<T>,
    expert: usize,
    decision: &RouterDecision,
    code: &[T],
) -> Result<Vec<T>> {
    let slot = decision
        .indices
        .iter()
        .position(|&i| i == expert)
        .ok_or_else(|| Error::InvalidArgument(format!("generator {expert} is not selected")))?;
    let gen = module
        .generators
        .get(expert)
        .ok_or_else(|| Error::InvalidArgument(format!("no generator {expert}")))?;
    let mut tape = Tape::new();
    let p = params.register(&mut tape);
    let c = tape.constant(Tensor::from_vec(&[code.len()], code.to_vec())?);
    let w = tape.constant(Tensor::from_vec(
        &[decision.k()],
        decision.weights.iter().map(|&v| T::lit(v)).collect(),
    )?);
    let k = gen.kernel(&mut tape, &p, c, w, slot);
    Ok(tape.value(k).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn router_example_scores() {
        let d = RouterDecision::from_scores(&[1.0, 2.0, 3.0, 4.0], 3).unwrap();
        assert_eq!(d.indices, vec![3, 2, 1]);
        // softmax([4, 3, 2]) by hand: e^0, e^-1, e^-2 normalized
        let z = 1.0 + (-1f64).exp() + (-2f64).exp();
        let expect = [1.0 / z, (-1f64).exp() / z, (-2f64).exp() / z];
        for (a, b) in d.weights.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((d.weights[0] - 0.6652).abs() < 1e-4);
        assert!((d.weights[1] - 0.2447).abs() < 1e-4);
        assert!((d.weights[2] - 0.0900).abs() < 1e-4);
    }

    #[test]
    fn router_ties_prefer_lower_index() {
        let d = RouterDecision::from_scores(&[0.5; 4], 3).unwrap();
        assert_eq!(d.indices, vec![0, 1, 2]);
        for w in &d.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_k_is_plain_softmax() {
        let s = [0.3, -1.0, 2.0, 0.1];
        let d = RouterDecision::from_scores(&s, 4).unwrap();
        let full = softmax(&s);
        for (&i, &w) in d.indices.iter().zip(&d.weights) {
            assert!((full[i] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn k_larger_than_g_is_config_error() {
        assert!(matches!(RouterDecision::from_scores(&[1.0, 2.0], 3), Err(Error::Config(_))));
        assert!(RouterDecision::from_scores(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn delta_kernel_is_identity() {
        let d = DepthMap::from_fn(5, 6, |y, x| (y * 6 + x) as f32 * 0.3);
        let set = KernelSet { entries: vec![KernelEntry { expert: 0, side: 3, weight: 1.0, values: vec![0., 0., 0., 0., 1., 0., 0., 0., 0.] }] };
        assert_eq!(filter_and_sum(&set, &d).unwrap(), d);
        let eff = effective_kernel(&set).unwrap();
        assert_eq!(eff.side(), 9);
        assert_eq!(eff.get(4, 4), 1.0);
        assert_eq!(eff.mass(), 1.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let d = DepthMap::filled(4, 4, 1.0);
        let set = KernelSet { entries: vec![KernelEntry { expert: 0, side: 2, weight: 1.0, values: vec![0.25; 4] }] };
        assert!(filter_and_sum(&set, &d).is_err());
    }

    #[test]
    fn effective_kernel_of_two_uniform_kernels() {
        let set = KernelSet {
            entries: vec![
                KernelEntry { expert: 0, side: 3, weight: 0.4, values: vec![0.4 / 9.0; 9] },
                KernelEntry { expert: 1, side: 5, weight: 0.6, values: vec![0.6 / 25.0; 25] },
            ],
        };
        let eff = effective_kernel(&set).unwrap();
        assert!((eff.get(4, 4) - (0.4 / 9.0 + 0.6 / 25.0)).abs() < 1e-15);
        assert!((eff.get(2, 2) - 0.6 / 25.0).abs() < 1e-15);
        assert_eq!(eff.get(1, 1), 0.0);
        assert!((eff.mass() - 1.0).abs() < 1e-12);
    }
}
