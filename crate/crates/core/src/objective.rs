//! Reconstruction, degradation and contrastive losses, and the fixed latent
//! feature extractor the contrastive term is measured in.

use crate::autograd::{Tape, Var};
use crate::depthio::{DepthMap, ValidMask};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Denominator guard of the contrastive ratio.
pub const CONTRASTIVE_EPS: f64 = 1e-6;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Multi-scale latent features of one depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPyramid {
    pub levels: Vec<Tensor<f64>>,
}

/// A frozen, differentiable map from depth `[1, H, W]` to a feature pyramid.
pub trait FeatureExtractor {
    fn levels(&self) -> usize;

    fn extract<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var>;

    /// Value-level convenience.
    fn pyramid(&self, d: &DepthMap) -> LatentPyramid {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(d.to_tensor());
        let levels = self.extract(&mut tape, x).into_iter().map(|v| tape.value(v).clone()).collect();
        LatentPyramid { levels }
    }
}

/// Level `z` = `[gaussian(x_z), d/dx x_z, d/dy x_z]` where `x_1 = x` and
/// `x_{z+1}` is `x_z` 2x2-average-pooled. Borders are reflect padded.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPyramid {
    pub levels: usize,
    pub sigma: f64,
}

impl Default for GradientPyramid {
    fn default() -> Self {
        Self { levels: 3, sigma: 1.0 }
    }
}

impl GradientPyramid {
    /// `[3, 1, 5, 5]` filter bank: Gaussian, horizontal and vertical central differences.
    pub fn filter_bank<T: Real>(&self) -> Tensor<T> {
        let mut w = vec![0f64; 3 * 25];
        let mut s = 0.0;
        for y in 0..5 {
            for x in 0..5 {
                let (dy, dx) = (y as f64 - 2.0, x as f64 - 2.0);
                let v = (-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp();
                w[y * 5 + x] = v;
                s += v;
            }
        }
        w[..25].iter_mut().for_each(|v| *v /= s);
        // d/dx: centre row, columns 1 and 3
        w[25 + 2 * 5 + 1] = -0.5;
        w[25 + 2 * 5 + 3] = 0.5;
        // d/dy: centre column, rows 1 and 3
        w[50 + 5 + 2] = -0.5;
        w[50 + 3 * 5 + 2] = 0.5;
        Tensor::from_vec(&[3, 1, 5, 5], w.into_iter().map(T::lit).collect()).unwrap()
    }
}

impl FeatureExtractor for GradientPyramid {
    fn levels(&self) -> usize {
        self.levels
    }

    fn extract<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var> {
        let bank = tape.constant(self.filter_bank());
        let mut out = Vec::with_capacity(self.levels);
        let mut cur = x;
        for z in 0..self.levels {
            if z > 0 {
                cur = tape.avg_pool2(cur);
            }
            let padded = tape.reflect_pad(cur, 2);
            out.push(tape.conv2d(padded, bank, None, 1, 0));
        }
        out
    }
}

/// Mean L1 distance between two equally shaped tensors.
fn mean_l1(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// `sum_z alpha_z * L1(pos_z - anchor_z) / (L1(neg_z - anchor_z) + eps)`.
pub fn contrastive_loss(pos: &LatentPyramid, anchor: &LatentPyramid, neg: &LatentPyramid, alpha: &[f64]) -> Result<f64> {
    let m = anchor.levels.len();
    if pos.levels.len() != m || neg.levels.len() != m || alpha.len() != m || m == 0 {
        return Err(Error::Shape("contrastive pyramids and weights must have equal depth".into()));
    }
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidArgument("contrastive weights must be > 0".into()));
    }
    let mut total = 0.0;
    for z in 0..m {
        let (p, a, n) = (&pos.levels[z], &anchor.levels[z], &neg.levels[z]);
        if p.shape() != a.shape() || n.shape() != a.shape() {
            return Err(Error::Shape(format!("pyramid level {z} shapes differ")));
        }
        total += alpha[z] * mean_l1(p, a) / (mean_l1(n, a) + CONTRASTIVE_EPS);
    }
    Ok(total)
}

/// Tape version of [`contrastive_loss`].
pub fn contrastive_on_tape<T: Real>(tape: &mut Tape<T>, pos: &[Var], anchor: &[Var], neg: &[Var], alpha: &[f64]) -> Var {
    let mut terms = Vec::with_capacity(anchor.len());
    for z in 0..anchor.len() {
        let num = tape.mean_abs_diff(pos[z], anchor[z], None);
        let den = tape.mean_abs_diff(neg[z], anchor[z], None);
        let r = tape.ratio(num, den, T::lit(CONTRASTIVE_EPS));
        terms.push(tape.scale(r, T::lit(alpha[z])));
    }
    tape.sum(&terms)
}

fn check_dims(a: &DepthMap, b: &DepthMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over pixels, averaged over the batch.
pub fn degradation_loss(batch: &[(&DepthMap, &DepthMap)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for (up, dd) in batch {
        check_dims(up, dd)?;
        let s: f64 = up.values().iter().zip(dd.values()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
        total += s / up.values().len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Mean absolute error over valid pixels, averaged over the batch.
pub fn reconstruction_loss(batch: &[(&DepthMap, &DepthMap, &ValidMask)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for (gt, hr, mask) in batch {
        check_dims(gt, hr)?;
        if mask.dims() != gt.dims() {
            return Err(Error::Shape("mask dims differ".into()));
        }
        let n = mask.count();
        if n == 0 {
            return Err(Error::InvalidArgument("mask has no valid pixels".into()));
        }
        let s: f64 = gt
            .values()
            .iter()
            .zip(hr.values())
            .zip(mask.values())
            .filter(|(_, &m)| m)
            .map(|((&a, &b), _)| (a as f64 - b as f64).abs())
            .sum();
        total += s / n as f64;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: DEFAULT_LAMBDA, lambda2: DEFAULT_LAMBDA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_deg: f64,
    pub l_cont: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `l_rec + lambda1 * l_deg + lambda2 * l_cont`.
pub fn total_loss(l_rec: f64, l_deg: f64, l_cont: f64, w: LossWeights) -> Result<LossReport> {
    if w.lambda1 < 0.0 || w.lambda2 < 0.0 {
        return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
    }
    Ok(LossReport {
        l_rec,
        l_deg,
        l_cont,
        l_total: l_rec + w.lambda1 * l_deg + w.lambda2 * l_cont,
        lambda1: w.lambda1,
        lambda2: w.lambda2,
    })
}

/// Loss vars of one sample in normalized units.
#[derive(Clone, Copy, Debug)]
pub struct SampleLossVars {
    pub rec: Var,
    pub deg: Var,
    pub cont: Var,
    pub total: Var,
}

/// Assemble the three losses for one sample from `d_up`, `d_hr`, `d_d` and the
/// ground truth. `neg` is the map behind the negative features, normally `d_hr`
/// itself. Terms with zero weight are left out of `total`.
#[allow(clippy::too_many_arguments)]
pub fn sample_losses<T: Real, E: FeatureExtractor>(
    tape: &mut Tape<T>,
    extractor: &E,
    d_up: Var,
    d_hr: Var,
    d_d: Var,
    neg: Var,
    gt: Var,
    mask: &[bool],
    w: LossWeights,
) -> SampleLossVars {
    let rec = tape.mean_abs_diff(gt, d_hr, Some(mask));
    let deg = tape.mean_abs_diff(d_up, d_d, None);
    let fp = extractor.extract(tape, d_up);
    let fa = extractor.extract(tape, d_d);
    let fnv = extractor.extract(tape, neg);
    let alpha = vec![1.0; extractor.levels()];
    let cont = contrastive_on_tape(tape, &fp, &fa, &fnv, &alpha);
    let mut parts = vec![rec];
    if w.lambda1 > 0.0 {
        parts.push(tape.scale(deg, T::lit(w.lambda1)));
    }
    if w.lambda2 > 0.0 {
        parts.push(tape.scale(cont, T::lit(w.lambda2)));
    }
    let total = tape.sum(&parts);
    SampleLossVars { rec, deg, cont, total }
}
