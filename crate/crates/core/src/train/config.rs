use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depthio::{mix_seed, DegradationSpec, Kernel};
use crate::error::{Error, Result};
use crate::fusion::ModelConfig;

/// Seed stream tags so training, test and augmentation draws never collide.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
const TEST_STREAM: u64 = 0x7465_7374_0000_0000;
const AUG_STREAM: u64 = 0x6175_6700_0000_0000;

/// Blur applied by the synthetic degradation.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    Delta,
    Gaussian { side: usize, std_x: f64, std_y: f64, angle_deg: f64 },
    /// Fresh anisotropic Gaussian per sample, stds uniform in `[min_std, max_std]`.
    Random { side: usize, min_std: f64, max_std: f64 },
}

impl KernelSpec {
    pub fn kernel(&self, seed: u64) -> Result<Kernel> {
        match *self {
            KernelSpec::Delta => Ok(Kernel::delta()),
            KernelSpec::Gaussian { side, std_x, std_y, angle_deg } => Kernel::gaussian(side, std_x, std_y, angle_deg),
            KernelSpec::Random { side, min_std, max_std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6b65_726e));
                let sx = rng.random_range(min_std..=max_std);
                let sy = rng.random_range(min_std..=max_std);
                let angle = rng.random_range(0.0..180.0);
                Kernel::gaussian(side, sx, sy, angle)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Delta => Ok(()),
            KernelSpec::Gaussian { .. } => self.kernel(0).map(|_| ()),
            KernelSpec::Random { min_std, max_std, .. } => {
                if !(min_std > 0.0 && max_std >= min_std) {
                    return Err(Error::Config("random kernel needs 0 < min_std <= max_std".into()));
                }
                self.kernel(0).map(|_| ())
            }
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Delta => write!(f, "delta"),
            KernelSpec::Gaussian { side, std_x, std_y, angle_deg } => write!(f, "gaussian {side} {std_x} {std_y} {angle_deg}"),
            KernelSpec::Random { side, min_std, max_std } => write!(f, "random {side} {min_std} {max_std}"),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Config(format!("bad kernel spec {s:?}; expected delta | gaussian SIDE SX SY ANGLE | random SIDE MIN MAX"));
        let num = |i: usize| parts.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
        let side = || parts.get(1).and_then(|v| v.parse::<usize>().ok()).ok_or_else(bad);
        match parts.first().copied() {
            Some("delta") if parts.len() == 1 => Ok(KernelSpec::Delta),
            Some("gaussian") if parts.len() == 5 => {
                Ok(KernelSpec::Gaussian { side: side()?, std_x: num(2)?, std_y: num(3)?, angle_deg: num(4)? })
            }
            Some("random") if parts.len() == 4 => Ok(KernelSpec::Random { side: side()?, min_std: num(2)?, max_std: num(3)? }),
            _ => Err(bad()),
        }
    }
}

/// Synthetic training data.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub hr_size: usize,
    pub kernel: KernelSpec,
    /// LR noise std, normalized depth units.
    pub noise_std: f64,
    pub hole_rate: f64,
    /// Probability of corrupting a training input with the evaluation-time
    /// blur + noise protocol (noise std uniform in `[aug_noise_min, aug_noise_max]`).
    pub aug_prob: f64,
    pub aug_noise_min: f64,
    pub aug_noise_max: f64,
    pub aug_blur: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            hr_size: 32,
            kernel: KernelSpec::Gaussian { side: 7, std_x: 1.6, std_y: 0.8, angle_deg: 30.0 },
            noise_std: 0.0,
            hole_rate: 0.0,
            aug_prob: 0.0,
            aug_noise_min: 0.04,
            aug_noise_max: 0.16,
            aug_blur: 3.6,
        }
    }
}

impl DataConfig {
    /// Degradation of the sample drawn with `seed`.
    pub fn spec_for(&self, seed: u64, scale: usize) -> Result<DegradationSpec> {
        Ok(DegradationSpec {
            blur_kernel: self.kernel.kernel(seed)?,
            scale,
            noise_std: self.noise_std,
            hole_rate: self.hole_rate,
            seed,
        })
    }

    /// Augmentation noise std for a sample, or `None` when it stays clean.
    pub fn augmentation(&self, seed: u64) -> Option<(f64, u64)> {
        if self.aug_prob <= 0.0 {
            return None;
        }
        let s = mix_seed(seed, AUG_STREAM);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        if rng.random::<f64>() >= self.aug_prob {
            return None;
        }
        Some((rng.random_range(self.aug_noise_min..=self.aug_noise_max), s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Write a checkpoint every N steps (0: only at the end).
    pub ckpt_every: usize,
    /// Log a CSV row every N steps; the last step is always logged.
    pub eval_every: usize,
    /// Stop the regularization losses from updating `d_hr` (see `build_objective`).
    pub detach_hr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            lambda1: 0.1,
            lambda2: 0.1,
            model: ModelConfig { scale: 2, ..ModelConfig::default() },
            data: DataConfig::default(),
            ckpt_every: 0,
            eval_every: 1,
            detach_hr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps < 1 || self.batch_size < 1 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        // lr = 0 is allowed: it is the null-update fixpoint
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be >= 0", self.lr)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        let d = &self.data;
        if d.hr_size < 8 || d.hr_size % self.model.scale != 0 {
            return Err(Error::Config(format!("hr_size {} must be >= 8 and divisible by scale {}", d.hr_size, self.model.scale)));
        }
        if !(0.0..=1.0).contains(&d.aug_prob) || !(d.aug_noise_min >= 0.0 && d.aug_noise_max >= d.aug_noise_min) || d.aug_blur < 0.0 {
            return Err(Error::Config("bad augmentation settings".into()));
        }
        d.kernel.validate()?;
        d.spec_for(0, self.model.scale)?.validate()
    }

    /// Seed of batch element `b` at 0-based step `step`.
    pub fn sample_seed(&self, step: usize, b: usize) -> u64 {
        mix_seed(self.seed ^ TRAIN_STREAM, (step * self.batch_size + b) as u64)
    }

    /// Seed of held-out sample `i`, disjoint from every training draw.
    pub fn test_seed(&self, i: usize) -> u64 {
        test_seed(self.seed, i)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("ckpt_every", self.ckpt_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("detach_hr", self.detach_hr.to_string()),
            ("data.hr_size", self.data.hr_size.to_string()),
            ("data.kernel", self.data.kernel.to_string()),
            ("data.noise_std", self.data.noise_std.to_string()),
            ("data.hole_rate", self.data.hole_rate.to_string()),
            ("data.aug_prob", self.data.aug_prob.to_string()),
            ("data.aug_noise_min", self.data.aug_noise_min.to_string()),
            ("data.aug_noise_max", self.data.aug_noise_max.to_string()),
            ("data.aug_blur", self.data.aug_blur.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s.push_str(&self.model.to_kv("model."));
        s
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "steps" => self.steps = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "lambda1" => self.lambda1 = p(key, value)?,
            "lambda2" => self.lambda2 = p(key, value)?,
            "ckpt_every" => self.ckpt_every = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "detach_hr" => self.detach_hr = p(key, value)?,
            "data.hr_size" => self.data.hr_size = p(key, value)?,
            "data.kernel" => self.data.kernel = value.parse()?,
            "data.noise_std" => self.data.noise_std = p(key, value)?,
            "data.hole_rate" => self.data.hole_rate = p(key, value)?,
            "data.aug_prob" => self.data.aug_prob = p(key, value)?,
            "data.aug_noise_min" => self.data.aug_noise_min = p(key, value)?,
            "data.aug_noise_max" => self.data.aug_noise_max = p(key, value)?,
            "data.aug_blur" => self.data.aug_blur = p(key, value)?,
            _ => {
                let known = key.strip_prefix("model.").map(|k| self.model.set(k, value)).transpose()?;
                if known != Some(true) {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("bad line {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn test_seed(seed: u64, i: usize) -> u64 {
    mix_seed(seed ^ TEST_STREAM, i as u64)
}
