//! Central-difference gradient checks and the suite run over every
//! differentiable building block of the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{build_objective, prepare_sample, PreparedSample};
use crate::autograd::{Tape, Var};
use crate::degradation::top_k_indices;
use crate::depthio::{synth_scene, DegradationSpec, Kernel};
use crate::error::{Error, Result};
use crate::fusion::{Dornet, ModelConfig};
use crate::nn::{Bound, ParamStore};
use crate::objective::{contrastive_on_tape, sample_losses, FeatureExtractor, GradientPyramid, LossWeights};
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates sampled per input tensor; `0` checks every coordinate.
    pub max_coords: usize,
    /// Only these inputs are checked (all when `None`).
    pub only: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: DEFAULT_H, max_coords: 0, only: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Worst>,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar output, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compare reverse-mode gradients of `f` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar output, got {:?}", tape.value(out).shape())));
    }
    let grads = tape.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        if opts.only.as_ref().is_some_and(|o| !o.contains(&i)) {
            continue;
        }
        let analytic = grads.get(vars[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        let coords: Vec<usize> = if opts.max_coords == 0 || t.len() <= opts.max_coords {
            (0..t.len()).collect()
        } else {
            (0..opts.max_coords).map(|_| rng.random_range(0..t.len())).collect()
        };
        for c in coords {
            let x0 = t.data()[c];
            work[i].data_mut()[c] = x0 + opts.h;
            let fp = eval_scalar(&f, &work)?;
            work[i].data_mut()[c] = x0 - opts.h;
            let fm = eval_scalar(&f, &work)?;
            work[i].data_mut()[c] = x0;
            let n = (fp - fm) / (2.0 * opts.h);
            let e = rel_err(analytic[c], n);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some(Worst { input: i, coord: c, analytic: analytic[c], numeric: n });
            }
        }
    }
    Ok(report)
}

/// `sum(y * r)` with fixed standard-normal `r`; turns any tensor into a
/// scalar whose gradient touches every entry.
pub fn random_projection(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let w = tape.constant(Tensor::from_vec(&[1, n], r).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    let flat = tape.reshape(y, &[n]);
    tape.linear(flat, w, b)
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < SUITE_TOLERANCE
    }
}

/// Model used by the suite: 8x8 inputs, 4 feature channels, two DOFT steps.
pub fn suite_model_config() -> ModelConfig {
    ModelConfig { c_feat: 4, c_deg: 4, c_code: 8, t_doft: 2, g: 4, k: 3, scale: 2, tiny: false, gen_hidden: 8, wgen_hidden: 8, ca_reduction: 2 }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); std * z }).collect::<Vec<f64>>()).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>()).unwrap()
}

/// Shift the router bias so the scores at the check point sit on a fixed
/// ladder, keeping the k-th and (k+1)-th apart by far more than `10 h`.
fn separate_router_scores(model: &Dornet, params: &mut ParamStore<f64>, d_up: &Tensor<f64>) {
    let mut tape = Tape::new();
    let p = params.register(&mut tape);
    let x = tape.constant(d_up.clone());
    let s = model.degradation.router.scores(&mut tape, &p, x);
    let scores = tape.value(s).data().to_vec();
    let order = top_k_indices(&scores, scores.len()).expect("g >= 1");
    let bias = params.get_mut(model.degradation.router.head.b).data_mut();
    for (rank, &e) in order.iter().enumerate() {
        bias[e] += (1.0 - 0.4 * rank as f64) - scores[e];
    }
}

fn indices_with_prefix(params: &ParamStore<f64>, prefixes: &[&str]) -> Vec<usize> {
    params.names().iter().enumerate().filter(|(_, n)| prefixes.iter().any(|p| n.starts_with(p))).map(|(i, _)| i).collect()
}

struct Fixture {
    model: Dornet,
    params: ParamStore<f64>,
    sample: PreparedSample<f64>,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let cfg = suite_model_config();
    let (model, p32) = Dornet::init(&cfg, seed, true)?;
    let mut params = p32.cast::<f64>();
    let spec = DegradationSpec { blur_kernel: Kernel::isotropic(3, 0.8)?, ..DegradationSpec::identity(cfg.scale) };
    let scene = synth_scene(seed, 8, &spec)?;
    let sample = prepare_sample::<f64>(&model, &scene, None, 0.0)?;
    separate_router_scores(&model, &mut params, &sample.d_up);
    Ok(Fixture { model, params, sample })
}

fn with_params(params: &ParamStore<f64>, extra: Vec<Tensor<f64>>) -> Vec<Tensor<f64>> {
    let mut v = params.tensors().to_vec();
    v.extend(extra);
    v
}

fn bound(vars: &[Var], n: usize) -> Bound {
    Bound::from_vars(vars[..n].to_vec())
}

/// Run every case. `max_coords` bounds the coordinates sampled per tensor.
pub fn run_suite(seed: u64, max_coords: usize) -> Result<Vec<CaseResult>> {
    let fx = fixture(seed)?;
    let (model, params) = (&fx.model, &fx.params);
    let np = params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let opts = |only: Option<Vec<usize>>| GradCheckOptions { h: DEFAULT_H, max_coords, only, seed };
    let mut out = Vec::new();
    let c = model.cfg.feat();
    let cd = model.cfg.deg();
    let d_up = fx.sample.d_up.clone();

    // degradation branch
    let mut only = indices_with_prefix(params, &["deg."]);
    only.push(np);
    let report = grad_check(
        |t, v| {
            let p = bound(v, np);
            let (dmap, code) = model.degradation.encoder.apply(t, &p, v[np]);
            let a = random_projection(t, dmap, 1);
            let b = random_projection(t, code, 2);
            Ok(t.add(a, b))
        },
        &with_params(params, vec![d_up.clone()]),
        &opts(Some(only)),
    )?;
    out.push(CaseResult { name: "encode_degradation", report });

    let mut only = indices_with_prefix(params, &["deg.", "router.", "gen"]);
    only.push(np);
    let report = grad_check(
        |t, v| {
            let p = bound(v, np);
            let dv = model.degradation.encode(t, &p, v[np])?;
            let ks = model.degradation.kernels(t, &p, &dv);
            let parts: Vec<Var> = ks.iter().enumerate().map(|(j, &k)| random_projection(t, k, 10 + j as u64)).collect();
            Ok(t.sum(&parts))
        },
        &with_params(params, vec![d_up.clone()]),
        &opts(Some(only)),
    )?;
    out.push(CaseResult { name: "route_and_generators", report });

    // filter-and-sum w.r.t. both kernels and the image
    let k3 = uniform(&mut rng, &[1, 1, 3, 3], 0.05, 0.3);
    let k5 = uniform(&mut rng, &[1, 1, 5, 5], 0.01, 0.06);
    let img = uniform(&mut rng, &[1, 8, 8], 0.1, 0.9);
    let report = grad_check(
        |t, v| {
            let y = model.degradation.reblur(t, &[v[1], v[2]], v[0]);
            Ok(random_projection(t, y, 3))
        },
        &[img, k3, k5],
        &opts(None),
    )?;
    out.push(CaseResult { name: "filter_and_sum", report });

    // deformable conv; offsets keep their fractional part away from the
    // bilinear kinks at integer sample positions
    let x = randn(&mut rng, &[c, 8, 8], 1.0);
    let off = Tensor::from_vec(
        &[18, 8, 8],
        (0..18 * 64).map(|_| rng.random_range(-2i32..2) as f64 + rng.random_range(0.05..0.95)).collect(),
    )?;
    let mask = uniform(&mut rng, &[9, 8, 8], 0.05, 0.95);
    let w = randn(&mut rng, &[c, c, 3, 3], 0.3);
    let report = grad_check(
        |t, v| {
            let y = t.deform_conv(v[0], v[1], v[2], v[3]);
            Ok(random_projection(t, y, 4))
        },
        &[x, off, mask, w],
        &opts(None),
    )?;
    out.push(CaseResult { name: "deform_conv", report });

    let rg = &model.dofts[0].rg;
    let mut only = indices_with_prefix(params, &["doft0.rg."]);
    only.push(np);
    let report = grad_check(
        |t, v| {
            let y = rg.apply(t, &bound(v, np), v[np]);
            Ok(random_projection(t, y, 5))
        },
        &with_params(params, vec![randn(&mut rng, &[c, 8, 8], 1.0)]),
        &opts(Some(only)),
    )?;
    out.push(CaseResult { name: "residual_group", report });

    let doft = &model.dofts[0];
    let mut only = indices_with_prefix(params, &["doft0."]);
    only.extend(np..np + 4);
    let extra = vec![
        randn(&mut rng, &[cd, 8, 8], 0.5),
        randn(&mut rng, &[model.cfg.c_code], 1.0),
        randn(&mut rng, &[c, 8, 8], 1.0),
        randn(&mut rng, &[c, 8, 8], 1.0),
    ];
    let report = grad_check(
        |t, v| {
            let s = doft.step(t, &bound(v, np), v[np], v[np + 1], v[np + 2], v[np + 3]);
            let a = random_projection(t, s.f_d, 6);
            let b = random_projection(t, s.f_r, 7);
            Ok(t.add(a, b))
        },
        &with_params(params, extra),
        &opts(Some(only)),
    )?;
    out.push(CaseResult { name: "doft_step", report });

    let ex = GradientPyramid::default();
    let report = grad_check(
        |t, v| {
            let lv = ex.extract(t, v[0]);
            let parts: Vec<Var> = lv.iter().enumerate().map(|(z, &l)| random_projection(t, l, 20 + z as u64)).collect();
            Ok(t.sum(&parts))
        },
        &[uniform(&mut rng, &[1, 8, 8], 0.1, 0.9)],
        &opts(None),
    )?;
    out.push(CaseResult { name: "feature_extractor", report });

    // losses; pairs differ by at least 0.05 so no |.| kink is within reach of h
    let gt = uniform(&mut rng, &[1, 8, 8], 0.1, 0.9);
    let pred = away_from(&mut rng, &gt);
    let mask: Vec<bool> = (0..64).map(|i| i % 2 == 0 || i % 3 == 0).collect();
    let report = grad_check(|t, v| Ok(t.mean_abs_diff(v[0], v[1], Some(&mask))), &[gt.clone(), pred.clone()], &opts(None))?;
    out.push(CaseResult { name: "reconstruction_loss", report });

    let report = grad_check(|t, v| Ok(t.mean_abs_diff(v[0], v[1], None)), &[gt.clone(), pred], &opts(None))?;
    out.push(CaseResult { name: "degradation_loss", report });

    let a = uniform(&mut rng, &[1, 8, 8], 0.1, 0.9);
    let pos = uniform(&mut rng, &[1, 8, 8], 0.1, 0.9);
    let neg = uniform(&mut rng, &[1, 8, 8], 0.1, 0.9);
    let report = grad_check(
        |t, v| {
            let (fp, fa, fnv) = (ex.extract(t, v[0]), ex.extract(t, v[1]), ex.extract(t, v[2]));
            Ok(contrastive_on_tape(t, &fp, &fa, &fnv, &[1.0, 1.0, 1.0]))
        },
        &[pos, a, neg],
        &opts(None),
    )?;
    out.push(CaseResult { name: "contrastive_loss", report });

    // total loss as a function of the prediction alone, kernels held fixed
    let kset = [uniform(&mut rng, &[1, 1, 3, 3], 0.05, 0.2), uniform(&mut rng, &[1, 1, 5, 5], 0.01, 0.03)];
    let (up, gt_n, m) = (d_up.clone(), fx.sample.gt.clone(), fx.sample.mask.clone());
    let d_hr0 = away_from(&mut rng, &gt_n);
    let report = grad_check(
        |t, v| {
            let k: Vec<Var> = kset.iter().map(|k| t.constant(k.clone())).collect();
            let upv = t.constant(up.clone());
            let gtv = t.constant(gt_n.clone());
            let d_d = model.degradation.reblur(t, &k, v[0]);
            Ok(sample_losses(t, &ex, upv, v[0], d_d, v[0], gtv, &m, LossWeights::default()).total)
        },
        &[d_hr0],
        &opts(None),
    )?;
    out.push(CaseResult { name: "total_loss_wrt_prediction", report });

    let report = grad_check(
        |t, v| Ok(build_objective(t, model, &bound(v, np), &fx.sample, LossWeights::default(), false, &ex)?.1.total),
        params.tensors(),
        &opts(None),
    )?;
    out.push(CaseResult { name: "total_loss_end_to_end", report });
    Ok(out)
}

fn away_from(rng: &mut ChaCha8Rng, base: &Tensor<f64>) -> Tensor<f64> {
    let data = base
        .data()
        .iter()
        .map(|&g| {
            let d = rng.random_range(0.05..0.3);
            if rng.random::<bool>() { g + d } else { g - d }
        })
        .collect();
    Tensor::from_vec(base.shape(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0]);
                Ok(random_sum(t, sq))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    fn random_sum(t: &mut Tape<f64>, y: Var) -> Var {
        let n = t.value(y).len();
        let w = t.constant(Tensor::full(&[1, n], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        t.linear(y, w, b)
    }

    #[test]
    fn linear_map_and_rel_err() {
        let x = Tensor::from_vec(&[1], vec![0.7]).unwrap();
        let r = grad_check(
            |t, v| {
                let w = t.constant(Tensor::full(&[1, 1], 3.0));
                let b = t.constant(Tensor::zeros(&[1]));
                Ok(t.linear(v[0], w, b))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9);
        assert_eq!(rel_err(2.0, 4.0), 0.5);
        assert_eq!(rel_err(0.0, 0.0), 0.0);
    }
}
