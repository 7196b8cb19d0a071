//! Evaluation and reporting: valid-mask RMSE, dataset evaluation against the
//! bicubic baseline, noise sweeps, kernel export and ablation runs.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::degradation::{effective_kernel, KernelSet};
use crate::depthio::{
    add_eval_noise, encode_pgm_gray, format_kernel_block, list_indices, mix_seed, read_split, Kernel, SceneSample, DepthMap,
    RgbImage, ValidMask, DEPTH_NORMALIZER_M,
};
use crate::error::{Error, Result};
use crate::fusion::Dornet;
use crate::nn::ParamStore;
use crate::train::{test_scenes, train_loop, Checkpoint, TrainConfig};

pub const SWEEP_STDS: [f64; 5] = [0.04, 0.07, 0.10, 0.13, 0.16];
pub const SWEEP_BLUR: f64 = 3.6;
pub const LATENCY_WARMUP: usize = 3;
pub const LATENCY_RUNS: usize = 20;

/// `sqrt(mean over valid pixels of (pred - gt)^2)`, meters in, centimeters out.
pub fn rmse_valid(pred: &DepthMap, gt: &DepthMap, mask: &ValidMask) -> Result<f64> {
    if pred.dims() != gt.dims() || mask.dims() != gt.dims() {
        return Err(Error::Shape(format!("pred {:?}, gt {:?}, mask {:?}", pred.dims(), gt.dims(), mask.dims())));
    }
    let (mut se, mut n) = (0.0f64, 0usize);
    for ((&p, &g), &m) in pred.values().iter().zip(gt.values()).zip(mask.values()) {
        if m {
            let d = p as f64 - g as f64;
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask has no valid pixels".into()));
    }
    Ok((se / n as f64).sqrt() * 100.0)
}

/// Something that maps LR depth (+ RGB guide) to HR depth in meters.
pub enum Predictor {
    /// `d_hr = d_up`: the bicubic baseline.
    Identity { scale: usize },
    Network { model: Dornet, params: ParamStore<f32> },
}

impl Predictor {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Predictor::Network { model: Dornet::architecture(&ck.config.model)?, params: ck.params.clone() })
    }

    pub fn scale(&self) -> usize {
        match self {
            Predictor::Identity { scale } => *scale,
            Predictor::Network { model, .. } => model.cfg.scale,
        }
    }

    pub fn params(&self) -> usize {
        match self {
            Predictor::Identity { .. } => 0,
            Predictor::Network { params, .. } => params.element_count(),
        }
    }

    /// Hole-filled bicubic upsampling, identical for every predictor.
    pub fn upsample(&self, lr: &DepthMap) -> Result<DepthMap> {
        let filled = crate::depthio::fill_holes(lr);
        crate::depthio::bicubic_resize(&filled, self.scale() as f64)
    }

    pub fn predict_upsampled(&self, d_up: &DepthMap, rgb: &RgbImage) -> Result<DepthMap> {
        match self {
            Predictor::Identity { .. } => Ok(d_up.clone()),
            Predictor::Network { model, params } => Ok(model.predict_upsampled(params, d_up, rgb)?.d_hr),
        }
    }

    pub fn predict(&self, lr: &DepthMap, rgb: &RgbImage) -> Result<DepthMap> {
        let up = self.upsample(lr)?;
        self.predict_upsampled(&up, rgb)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean of per-sample valid-mask RMSE.
    pub rmse_cm: f64,
    /// Same protocol with `d_hr = d_up`.
    pub baseline_rmse_cm: f64,
    pub n_samples: usize,
    pub params: usize,
    /// Median wall-clock forward latency on the first sample.
    pub latency_ms: f64,
    pub per_sample: Vec<(usize, f64)>,
    pub config: String,
}

impl EvalReport {
    /// `index,rmse_cm` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("index,rmse_cm\n");
        for (i, r) in &self.per_sample {
            writeln!(s, "{i},{r}").unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "samples={} rmse_cm={:.4} bicubic_rmse_cm={:.4} params={} latency_ms={:.3}\n",
            self.n_samples, self.rmse_cm, self.baseline_rmse_cm, self.params, self.latency_ms
        )
    }
}

fn check_scale(p: &Predictor, s: &SceneSample) -> Result<()> {
    let (h, w) = s.lr_depth.dims();
    let sc = p.scale();
    if s.hr_depth.dims() != (h * sc, w * sc) {
        return Err(Error::Shape(format!("model scale {sc} does not match sample {:?} -> {:?}", s.lr_depth.dims(), s.hr_depth.dims())));
    }
    Ok(())
}

/// Evaluate on in-memory samples; `measure_latency` times the first sample.
pub fn eval_samples(p: &Predictor, samples: &[(usize, SceneSample)], measure_latency: bool) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to evaluate".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut base = 0.0;
    for (i, s) in samples {
        check_scale(p, s)?;
        let up = p.upsample(&s.lr_depth)?;
        let pred = p.predict_upsampled(&up, &s.rgb)?;
        per_sample.push((*i, rmse_valid(&pred, &s.hr_depth, &s.gt_mask)?));
        base += rmse_valid(&up, &s.hr_depth, &s.gt_mask)?;
    }
    let n = samples.len();
    let latency_ms = if measure_latency { median_latency_ms(p, &samples[0].1)? } else { 0.0 };
    let config = match p {
        Predictor::Identity { scale } => format!("identity scale={scale}\n"),
        Predictor::Network { model, .. } => model.cfg.to_kv(""),
    };
    Ok(EvalReport {
        rmse_cm: per_sample.iter().map(|r| r.1).sum::<f64>() / n as f64,
        baseline_rmse_cm: base / n as f64,
        n_samples: n,
        params: p.params(),
        latency_ms,
        per_sample,
        config,
    })
}

pub fn median_latency_ms(p: &Predictor, s: &SceneSample) -> Result<f64> {
    for _ in 0..LATENCY_WARMUP {
        p.predict(&s.lr_depth, &s.rgb)?;
    }
    let mut t: Vec<f64> = Vec::with_capacity(LATENCY_RUNS);
    for _ in 0..LATENCY_RUNS {
        let start = Instant::now();
        p.predict(&s.lr_depth, &s.rgb)?;
        t.push(start.elapsed().as_secs_f64() * 1e3);
    }
    t.sort_by(f64::total_cmp);
    Ok((t[LATENCY_RUNS / 2 - 1] + t[LATENCY_RUNS / 2]) / 2.0)
}

/// Load the `test` split of a dataset directory with its indices.
pub fn load_test_split(dataset_dir: &Path) -> Result<Vec<(usize, SceneSample)>> {
    let idx = list_indices(dataset_dir, "test")?;
    let samples = read_split(dataset_dir, "test")?;
    Ok(idx.into_iter().zip(samples).collect())
}

pub fn eval_dataset(ckpt_dir: &Path, dataset_dir: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt_dir)?;
    let p = Predictor::from_checkpoint(&ck)?;
    eval_samples(&p, &load_test_split(dataset_dir)?, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub blur_std: f64,
    /// `(noise_std, rmse_cm)`, noise strictly increasing.
    pub levels: Vec<(f64, f64)>,
    /// Identity-model RMSE at each level.
    pub baseline: Vec<f64>,
}

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut s = String::from("noise_std,rmse_cm\n");
        for (n, r) in &self.levels {
            writeln!(s, "{n},{r}").unwrap();
        }
        s
    }

    pub fn svg(&self) -> String {
        line_plot_svg("noise std", "RMSE (cm)", &[("model", &self.levels), ("bicubic", &self.levels.iter().zip(&self.baseline).map(|(l, &b)| (l.0, b)).collect::<Vec<_>>())])
    }
}

/// Evaluate under the blur + noise protocol applied to the upsampled input.
/// A `0` noise level is the uncorrupted reference. Each sample keeps one
/// noise seed across levels, so levels differ only in strength.
pub fn noise_sweep(p: &Predictor, samples: &[(usize, SceneSample)], stds: &[f64], blur_std: f64, seed: u64) -> Result<SweepResult> {
    if samples.is_empty() {
        return Err(Error::Dataset("no samples to evaluate".into()));
    }
    if stds.is_empty() || stds.windows(2).any(|w| !(w[1] > w[0])) || stds[0] < 0.0 {
        return Err(Error::InvalidArgument("noise levels must be non-negative and strictly increasing".into()));
    }
    let mut levels = Vec::with_capacity(stds.len());
    let mut baseline = Vec::with_capacity(stds.len());
    for &std in stds {
        let (mut m, mut b) = (0.0, 0.0);
        for (i, s) in samples {
            check_scale(p, s)?;
            let clean = p.upsample(&s.lr_depth)?;
            let up = if std == 0.0 {
                clean
            } else {
                add_eval_noise(&clean, std, blur_std, DEPTH_NORMALIZER_M, mix_seed(seed, *i as u64))?
            };
            let pred = p.predict_upsampled(&up, &s.rgb)?;
            m += rmse_valid(&pred, &s.hr_depth, &s.gt_mask)?;
            b += rmse_valid(&up, &s.hr_depth, &s.gt_mask)?;
        }
        let n = samples.len() as f64;
        levels.push((std, m / n));
        baseline.push(b / n);
    }
    Ok(SweepResult { blur_std, levels, baseline })
}

/// Kernels routed for one sample plus their single-kernel equivalent.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelExport {
    pub set: KernelSet,
    pub effective: Kernel,
}

impl KernelExport {
    /// One `kernel <side> <weight>` block per routed kernel, then `effective <side>`.
    pub fn text(&self) -> String {
        let mut s = String::new();
        for e in &self.set.entries {
            let k = Kernel::unnormalized(e.side, e.values.clone()).expect("odd side");
            s.push_str(&format_kernel_block("kernel", &k, Some(e.weight)));
        }
        s.push_str(&format_kernel_block("effective", &self.effective, None));
        s
    }

    /// 8-bit heatmap of the effective kernel, each cell drawn as `cell x cell` pixels.
    pub fn heatmap_pgm(&self, cell: usize) -> Vec<u8> {
        kernel_heatmap(&self.effective, cell)
    }
}

pub fn kernel_heatmap(k: &Kernel, cell: usize) -> Vec<u8> {
    let side = k.side();
    let max = k.values().iter().cloned().fold(0.0, f64::max).max(1e-12);
    let n = side * cell;
    let mut px = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            px[y * n + x] = (k.get(y / cell, x / cell).max(0.0) / max * 255.0).round() as u8;
        }
    }
    encode_pgm_gray(n, n, &px)
}

pub fn export_kernels(model: &Dornet, params: &ParamStore<f32>, sample: &SceneSample) -> Result<KernelExport> {
    let up = model.upsample_input(&sample.lr_depth)?;
    let mut tape = crate::autograd::Tape::<f32>::new();
    let p = params.register(&mut tape);
    let mut t = up.to_tensor::<f32>();
    t.scale_assign((1.0 / DEPTH_NORMALIZER_M) as f32);
    let x = tape.constant(t);
    let dv = model.degradation.encode(&mut tape, &p, x)?;
    let ks = model.degradation.kernels(&mut tape, &p, &dv);
    let set = model.degradation.kernel_set(&tape, &dv, &ks);
    let effective = effective_kernel(&set)?;
    Ok(KernelExport { set, effective })
}

/// Average of the effective kernels over `samples` (all padded to a common side).
pub fn mean_effective_kernel(model: &Dornet, params: &ParamStore<f32>, samples: &[SceneSample]) -> Result<Kernel> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let ks: Vec<Kernel> = samples.iter().map(|s| export_kernels(model, params, s).map(|e| e.effective)).collect::<Result<_>>()?;
    let side = ks.iter().map(Kernel::side).max().unwrap();
    let mut acc = vec![0.0; side * side];
    for k in &ks {
        for (a, v) in acc.iter_mut().zip(k.padded_to(side)?.values()) {
            *a += v / ks.len() as f64;
        }
    }
    Kernel::unnormalized(side, acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Doft,
    Loss,
    Router,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doft" => Ok(AblationAxis::Doft),
            "loss" => Ok(AblationAxis::Loss),
            "router" => Ok(AblationAxis::Router),
            _ => Err(Error::InvalidArgument(format!("unknown ablation axis {s:?} (doft | loss | router)"))),
        }
    }
}

/// `(setting, config)` pairs of one axis, all derived from `base`.
pub fn ablation_settings(axis: AblationAxis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Doft => (1..=8).map(|t| (format!("t{t}"), with(&|c| c.model.t_doft = t))).collect(),
        AblationAxis::Loss => [("rec", 0.0, 0.0), ("rec+deg", 0.1, 0.0), ("rec+cont", 0.0, 0.1), ("all", 0.1, 0.1)]
            .into_iter()
            .map(|(n, l1, l2)| {
                (
                    n.to_string(),
                    with(&|c| {
                        c.lambda1 = l1;
                        c.lambda2 = l2;
                    }),
                )
            })
            .collect(),
        AblationAxis::Router => [(1, 1), (2, 1), (3, 1), (4, 1), (5, 1), (4, 2), (4, 3), (4, 4)]
            .into_iter()
            .map(|(g, k)| {
                (
                    format!("g{g}k{k}"),
                    with(&|c| {
                        c.model.g = g;
                        c.model.k = k;
                    }),
                )
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub rmse_cm: f64,
    pub params: usize,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,rmse_cm,params\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.setting, r.rmse_cm, r.params).unwrap();
    }
    s
}

/// Train every setting of `axis` from `base` and evaluate on `n_test` held-out scenes.
pub fn ablate(axis: AblationAxis, base: &TrainConfig, n_test: usize) -> Result<Vec<AblationRow>> {
    let scenes: Vec<(usize, SceneSample)> = test_scenes(base, n_test)?.into_iter().enumerate().collect();
    ablation_settings(axis, base)
        .into_iter()
        .map(|(setting, cfg)| {
            let ck = train_loop(&cfg, None)?;
            let p = Predictor::from_checkpoint(&ck)?;
            let r = eval_samples(&p, &scenes, false)?;
            Ok(AblationRow { setting, rmse_cm: r.rmse_cm, params: r.params })
        })
        .collect()
}

/// Minimal SVG line chart; the CSV next to it is the authoritative artifact.
pub fn line_plot_svg(xlabel: &str, ylabel: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, w / 2.0, h - 12.0).unwrap();
    writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{ylabel}</text>"#, h / 2.0, h / 2.0).unwrap();
    writeln!(s, r#"<text x="{m}" y="{}" text-anchor="middle">{x0:.3}</text>"#, h - m + 14.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.3}</text>"#, w - m, h - m + 14.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.2}</text>"#, m - 4.0, h - m).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.2}</text>"#, m - 4.0, m + 4.0).unwrap();
    for (j, (name, pts)) in series.iter().enumerate() {
        let c = colors[j % colors.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" ")).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#, w - m - 60.0, m + 14.0 * j as f64).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let gt = DepthMap::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let pred = DepthMap::new(1, 3, vec![1.03, 2.04, 100.0]).unwrap();
        let m = ValidMask::new(1, 3, vec![true, true, false]).unwrap();
        let r = rmse_valid(&pred, &gt, &m).unwrap();
        assert!((r - 3.5355).abs() < 1e-3, "{r}");
        assert_eq!(rmse_valid(&gt, &gt, &m).unwrap(), 0.0);
        let exact = DepthMap::new(1, 3, vec![1.0, 2.0, 1e6]).unwrap();
        assert_eq!(rmse_valid(&exact, &gt, &m).unwrap(), 0.0);
        assert!(rmse_valid(&gt, &gt, &ValidMask::new(1, 3, vec![false; 3]).unwrap()).is_err());
    }

    #[test]
    fn ablation_axes_have_expected_rows() {
        let base = TrainConfig::default();
        assert_eq!(ablation_settings(AblationAxis::Doft, &base).len(), 8);
        assert_eq!(ablation_settings(AblationAxis::Loss, &base).len(), 4);
        let r: Vec<String> = ablation_settings(AblationAxis::Router, &base).into_iter().map(|s| s.0).collect();
        assert_eq!(r, ["g1k1", "g2k1", "g3k1", "g4k1", "g5k1", "g4k2", "g4k3", "g4k4"]);
    }
}
