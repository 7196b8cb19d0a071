//! Optimization loop, seeding, checkpointing, parameter counting and the
//! finite-difference gradient-check harness.

mod adam;
mod checkpoint;
mod config;
pub mod gradcheck;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

pub use adam::{Adam, BETA1, BETA2, EPS};
pub use checkpoint::{Checkpoint, BIN_FILE, MAGIC, MANIFEST_FILE};
pub use config::{test_seed, DataConfig, KernelSpec, TrainConfig};

use crate::autograd::Tape;
use crate::depthio::{add_eval_noise, synth_scene, SceneSample, DEPTH_NORMALIZER_M};
use crate::error::{Error, Result};
use crate::fusion::{Dornet, ForwardVars, ModelConfig};
use crate::nn::{Bound, ParamStore};
use crate::objective::{sample_losses, FeatureExtractor, GradientPyramid, LossWeights, SampleLossVars};
use crate::tensor::{Real, Tensor};

pub const CSV_HEADER: &str = "step,l_rec,l_deg,l_cont,l_total,rmse_cm";
pub const LOG_FILE: &str = "train.csv";
pub const CKPT_DIR: &str = "checkpoint";

/// Network-ready tensors of one sample, depth normalized by the 5 m constant.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub d_up: Tensor<T>,
    pub rgb: Tensor<T>,
    pub gt: Tensor<T>,
    pub mask: Vec<bool>,
}

/// Upsample (and optionally corrupt) the LR input of a scene.
/// `aug` is `(noise_std, seed)` for the evaluation-time blur + noise protocol.
pub fn prepare_sample<T: Real>(model: &Dornet, s: &SceneSample, aug: Option<(f64, u64)>, blur_std: f64) -> Result<PreparedSample<T>> {
    let mut d_up = model.upsample_input(&s.lr_depth)?;
    if let Some((std, seed)) = aug {
        d_up = add_eval_noise(&d_up, std, blur_std, DEPTH_NORMALIZER_M, seed)?;
    }
    if d_up.dims() != s.hr_depth.dims() {
        return Err(Error::Shape(format!("upsampled {:?} vs HR {:?}", d_up.dims(), s.hr_depth.dims())));
    }
    let norm = T::lit(1.0 / DEPTH_NORMALIZER_M);
    let mut up = d_up.to_tensor::<T>();
    up.scale_assign(norm);
    let mut gt = s.hr_depth.to_tensor::<T>();
    gt.scale_assign(norm);
    Ok(PreparedSample { d_up: up, rgb: s.rgb.to_tensor(), gt, mask: s.gt_mask.values().to_vec() })
}

/// Forward pass plus the three losses of one sample on `tape`. With
/// `detach_hr` the reblur and the negative features see a constant copy of
/// `d_hr`, so only reconstruction updates it.
pub fn build_objective<T: Real, E: FeatureExtractor>(
    tape: &mut Tape<T>,
    model: &Dornet,
    p: &Bound,
    s: &PreparedSample<T>,
    w: LossWeights,
    detach_hr: bool,
    extractor: &E,
) -> Result<(ForwardVars, SampleLossVars)> {
    if s.mask.iter().all(|&m| !m) {
        return Err(Error::InvalidArgument("sample has no valid ground-truth pixels".into()));
    }
    let d_up = tape.constant(s.d_up.clone());
    let rgb = tape.constant(s.rgb.clone());
    let gt = tape.constant(s.gt.clone());
    let f = model.forward(tape, p, d_up, rgb)?;
    let kernels = model.degradation.kernels(tape, p, &f.deg);
    let hr = if detach_hr {
        let v = tape.value(f.d_hr).clone();
        tape.constant(v)
    } else {
        f.d_hr
    };
    let d_d = model.degradation.reblur(tape, &kernels, hr);
    let l = sample_losses(tape, extractor, d_up, f.d_hr, d_d, hr, gt, &s.mask, w);
    Ok((f, l))
}

/// Valid-pixel RMSE in centimeters between normalized maps.
pub fn rmse_cm_normalized<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> f64 {
    let (mut se, mut n) = (0.0, 0usize);
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if m {
            let d = (p.as_f64() - g.as_f64()) * DEPTH_NORMALIZER_M;
            se += d * d;
            n += 1;
        }
    }
    (se / n.max(1) as f64).sqrt() * 100.0
}

/// Batch-averaged values logged after one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based index of the update this row describes.
    pub step: usize,
    pub l_rec: f64,
    pub l_deg: f64,
    pub l_cont: f64,
    pub l_total: f64,
    pub rmse_cm: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.l_rec, self.l_deg, self.l_cont, self.l_total, self.rmse_cm)
    }
}

/// Result of one sample's forward/backward.
pub struct SampleGrad<T> {
    pub l_rec: f64,
    pub l_deg: f64,
    pub l_cont: f64,
    pub l_total: f64,
    pub rmse_cm: f64,
    pub grads: Vec<Tensor<T>>,
}

pub fn sample_gradients<T: Real, E: FeatureExtractor>(
    model: &Dornet,
    params: &ParamStore<T>,
    s: &PreparedSample<T>,
    w: LossWeights,
    detach_hr: bool,
    extractor: &E,
) -> Result<SampleGrad<T>> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape);
    let (f, l) = build_objective(&mut tape, model, &p, s, w, detach_hr, extractor)?;
    let mut g = tape.backward(l.total);
    let grads = p
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let item = |v| tape.value(v).item().as_f64();
    Ok(SampleGrad {
        l_rec: item(l.rec),
        l_deg: item(l.deg),
        l_cont: item(l.cont),
        l_total: item(l.total),
        rmse_cm: rmse_cm_normalized(tape.value(f.d_hr).data(), s.gt.data(), &s.mask),
        grads,
    })
}

/// Stepwise trainer; [`train_loop`] drives it end to end.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Dornet,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    /// Updates applied so far.
    pub step: usize,
    extractor: GradientPyramid,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Dornet::init(&cfg.model, cfg.seed, false)?;
        let adam = Adam::new(&params);
        Ok(Self { cfg: cfg.clone(), model, params, adam, step: 0, extractor: GradientPyramid::default() })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = Dornet::architecture(&ck.config.model)?;
        Ok(Self {
            cfg: ck.config.clone(),
            model,
            params: ck.params.clone(),
            adam: ck.adam.clone(),
            step: ck.step as usize,
            extractor: GradientPyramid::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.cfg.clone(), step: self.step as u64, params: self.params.clone(), adam: self.adam.clone() }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.cfg.lambda1, lambda2: self.cfg.lambda2 }
    }

    /// Draw the training sample with `seed`.
    pub fn training_sample(&self, seed: u64) -> Result<PreparedSample<f32>> {
        let data = &self.cfg.data;
        let spec = data.spec_for(seed, self.cfg.model.scale)?;
        let scene = synth_scene(seed, data.hr_size, &spec)?;
        prepare_sample(&self.model, &scene, data.augmentation(seed), data.aug_blur)
    }

    /// One Adam update over a freshly synthesized batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let b = self.cfg.batch_size;
        let seeds: Vec<u64> = (0..b).map(|i| self.cfg.sample_seed(self.step, i)).collect();
        let inv = 1.0 / b as f32;
        let mut acc: Vec<Tensor<f32>> = self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut log = StepLog { step: self.step + 1, l_rec: 0.0, l_deg: 0.0, l_cont: 0.0, l_total: 0.0, rmse_cm: 0.0 };
        let w = self.weights();
        for &seed in &seeds {
            let s = self.training_sample(seed)?;
            let r = sample_gradients(&self.model, &self.params, &s, w, self.cfg.detach_hr, &self.extractor)?;
            if !r.l_total.is_finite() || r.grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { step: self.step + 1, seeds });
            }
            for (a, g) in acc.iter_mut().zip(&r.grads) {
                for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y * inv;
                }
            }
            log.l_rec += r.l_rec / b as f64;
            log.l_deg += r.l_deg / b as f64;
            log.l_cont += r.l_cont / b as f64;
            log.l_total += r.l_total / b as f64;
            log.rmse_cm += r.rmse_cm / b as f64;
        }
        self.adam.step(&mut self.params, &acc, self.cfg.lr);
        self.step += 1;
        Ok(log)
    }

    /// Run until `until` total updates, calling `on_log` for every logged row.
    pub fn run_until(&mut self, until: usize, mut on_log: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        while self.step < until {
            let row = self.step()?;
            if row.step % self.cfg.eval_every == 0 || row.step == self.cfg.steps || row.step == until {
                on_log(&row)?;
            }
        }
        Ok(())
    }
}

/// Train for `cfg.steps` updates. With `out_dir`, writes `train.csv` and the
/// checkpoint directory (also every `ckpt_every` steps). A non-finite loss
/// aborts the run and leaves `nonfinite.txt` naming the batch seeds.
pub fn train_loop(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(cfg)?;
    let mut csv = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            let mut f = BufWriter::new(File::create(d.join(LOG_FILE))?);
            writeln!(f, "{CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let ckpt_every = if cfg.ckpt_every == 0 { cfg.steps } else { cfg.ckpt_every };
    while trainer.step < cfg.steps {
        let until = ((trainer.step / ckpt_every + 1) * ckpt_every).min(cfg.steps);
        let res = trainer.run_until(until, |row| {
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", row.csv_row())?;
            }
            Ok(())
        });
        if let Some(f) = csv.as_mut() {
            f.flush()?;
        }
        if let Err(e) = res {
            if let (Error::NonFiniteLoss { step, seeds }, Some(d)) = (&e, out_dir) {
                let dump = format!("step={step}\nseeds={}\n", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
                fs::write(d.join("nonfinite.txt"), dump)?;
            }
            return Err(e);
        }
        if let Some(d) = out_dir {
            trainer.checkpoint().save(d.join(CKPT_DIR))?;
        }
    }
    Ok(trainer.checkpoint())
}

/// Held-out scenes for a configuration, drawn from the test seed stream.
pub fn test_scenes(cfg: &TrainConfig, n: usize) -> Result<Vec<SceneSample>> {
    (0..n)
        .map(|i| {
            let seed = cfg.test_seed(i);
            let spec = cfg.data.spec_for(seed, cfg.model.scale)?;
            synth_scene(seed, cfg.data.hr_size, &spec)
        })
        .collect()
}

/// Number of trainable scalars of a model configuration.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(Dornet::init(cfg, 0, false)?.1.element_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig { steps: 2, batch_size: 2, lr: 1e-3, ..TrainConfig::default() };
        cfg.model = ModelConfig { c_feat: 4, c_deg: 4, c_code: 8, t_doft: 1, scale: 2, gen_hidden: 8, wgen_hidden: 4, ..ModelConfig::default() };
        cfg.data.hr_size = 16;
        cfg
    }

    #[test]
    fn single_conv_count() {
        assert_eq!(crate::nn::conv_param_count(4, 8, 3), 296);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let cfg = TrainConfig { steps: 1, lr: 0.0, ..tiny_cfg() };
        let before = Trainer::new(&cfg).unwrap().params;
        let ck = train_loop(&cfg, None).unwrap();
        assert_eq!(ck.params, before);
        assert_eq!(ck.step, 1);
    }

    #[test]
    fn trainer_is_deterministic() {
        let cfg = tiny_cfg();
        let a = train_loop(&cfg, None).unwrap();
        let b = train_loop(&cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn detached_hr_leaves_the_head_to_reconstruction() {
        let cfg = tiny_cfg();
        let tr = Trainer::new(&cfg).unwrap();
        let (model, params) = Dornet::init(&cfg.model, 3, true).unwrap();
        let s = tr.training_sample(11).unwrap();
        let ex = GradientPyramid::default();
        let w = LossWeights::default();
        let rec_only = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        let head = model.head_out.w.index();
        let detached = sample_gradients(&model, &params, &s, w, true, &ex).unwrap().grads[head].clone();
        let plain = sample_gradients(&model, &params, &s, rec_only, false, &ex).unwrap().grads[head].clone();
        let attached = sample_gradients(&model, &params, &s, w, false, &ex).unwrap().grads[head].clone();
        let diff = |a: &Tensor<f32>, b: &Tensor<f32>| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff(&detached, &plain) <= 1e-6, "{}", diff(&detached, &plain));
        assert!(diff(&attached, &plain) > 1e-4);
    }

    #[test]
    fn checkpoint_round_trip_and_manifest_count() {
        let cfg = tiny_cfg();
        let ck = train_loop(&cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let rows = manifest.lines().filter(|l| l.split_whitespace().count() == 3).count();
        assert_eq!(rows, 3 * ck.params.len());
    }
}
