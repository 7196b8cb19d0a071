use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dornet_core::depthio::{read_sample, synth_scene, write_atomic, write_sample};
use dornet_core::evaluate::{
    ablate, ablation_csv, eval_samples, export_kernels, load_test_split, noise_sweep, AblationAxis, Predictor, SWEEP_BLUR,
    SWEEP_STDS,
};
use dornet_core::train::gradcheck::{run_suite, SUITE_TOLERANCE};
use dornet_core::train::{test_seed, train_loop, Checkpoint, KernelSpec, TrainConfig, CKPT_DIR};
use dornet_core::{Error, Result};

/// Blind guided depth super-resolution: synthesis, training and evaluation.
#[derive(Parser)]
#[command(name = "dornet", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic samples (hr/lr/rgb/mask/spec) to a dataset directory.
    Synth(SynthArgs),
    /// Train a model; writes train.csv and a checkpoint directory.
    Train(TrainArgs),
    /// Valid-mask RMSE of a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// RMSE under increasing input noise (CSV + SVG).
    Sweep(SweepArgs),
    /// Export routed kernels and the effective kernel for one sample.
    Kernels(KernelArgs),
    /// Finite-difference gradient checks over every module.
    Gradcheck(GradArgs),
    /// Train and evaluate one ablation axis (doft | loss | router).
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// HR side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// delta | gaussian SIDE SX SY ANGLE | random SIDE MIN MAX
    #[arg(long, default_value = "gaussian 7 1.6 0.8 30")]
    kernel: String,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    holes: f64,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.t_doft=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_kv(&fs::read_to_string(p)?)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, or `identity` for the bicubic baseline.
    #[arg(long)]
    ckpt: String,
    #[arg(long)]
    data: PathBuf,
    /// Per-sample CSV (`index,rmse_cm`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    stds: Option<Vec<f64>>,
    #[arg(long, default_value_t = SWEEP_BLUR)]
    blur: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KernelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per tensor (0 = all).
    #[arg(long, default_value_t = 16)]
    coords: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    axis: String,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Held-out scenes per setting.
    #[arg(long, default_value_t = 8)]
    test_n: usize,
    #[arg(long)]
    out: PathBuf,
}

fn predictor(ckpt: &str, scale_hint: usize) -> Result<Predictor> {
    if ckpt == "identity" {
        return Ok(Predictor::Identity { scale: scale_hint });
    }
    let path = Path::new(ckpt);
    // accept either the checkpoint itself or a training output directory
    let dir = if path.join(CKPT_DIR).is_dir() { path.join(CKPT_DIR) } else { path.to_path_buf() };
    Predictor::from_checkpoint(&Checkpoint::load(dir)?)
}

fn dataset_scale(data: &Path) -> Result<usize> {
    let split = load_test_split(data)?;
    Ok(split[0].1.meta.scale)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => {
            let kernel: KernelSpec = a.kernel.parse()?;
            for i in 0..a.n {
                let seed = test_seed(a.seed, i);
                let spec = dornet_core::depthio::DegradationSpec {
                    blur_kernel: kernel.kernel(seed)?,
                    scale: a.scale,
                    noise_std: a.noise,
                    hole_rate: a.holes,
                    seed,
                };
                let s = synth_scene(seed, a.size, &spec)?;
                write_sample(&a.out, &a.split, i, &s)?;
            }
            println!("wrote {} samples to {}", a.n, a.out.join(&a.split).display());
        }
        Cmd::Train(a) => {
            let cfg = a.cfg.resolve()?;
            fs::create_dir_all(&a.out)?;
            fs::write(a.out.join("config.txt"), cfg.to_kv())?;
            let ck = train_loop(&cfg, Some(&a.out))?;
            println!("trained {} steps; checkpoint in {}", ck.step, a.out.join(CKPT_DIR).display());
        }
        Cmd::Eval(a) => {
            let split = load_test_split(&a.data)?;
            let p = predictor(&a.ckpt, split[0].1.meta.scale)?;
            let r = eval_samples(&p, &split, true)?;
            print!("{}", r.summary());
            if let Some(out) = a.out {
                write_atomic(&out, r.csv().as_bytes())?;
            }
        }
        Cmd::Sweep(a) => {
            let split = load_test_split(&a.data)?;
            let p = predictor(&a.ckpt, split[0].1.meta.scale)?;
            let stds = a.stds.unwrap_or_else(|| SWEEP_STDS.to_vec());
            let r = noise_sweep(&p, &split, &stds, a.blur, a.seed)?;
            fs::create_dir_all(&a.out)?;
            write_atomic(&a.out.join("sweep.csv"), r.csv().as_bytes())?;
            write_atomic(&a.out.join("sweep.svg"), r.svg().as_bytes())?;
            print!("{}", r.csv());
        }
        Cmd::Kernels(a) => {
            let p = predictor(a.ckpt.to_str().unwrap_or_default(), dataset_scale(&a.data)?)?;
            let Predictor::Network { model, params } = p else { unreachable!("checkpoint path") };
            let sample = read_sample(&a.data, &a.split, a.index)?;
            let ex = export_kernels(&model, &params, &sample)?;
            fs::create_dir_all(&a.out)?;
            write_atomic(&a.out.join("kernels.txt"), ex.text().as_bytes())?;
            write_atomic(&a.out.join("effective.pgm"), &ex.heatmap_pgm(16))?;
            println!("{} kernels, total mass {:.6}", ex.set.entries.len(), ex.set.mass());
        }
        Cmd::Gradcheck(a) => {
            let cases = run_suite(a.seed, a.coords)?;
            let mut ok = true;
            for c in &cases {
                println!("{:<28} max_rel_err={:.3e} checked={} {}", c.name, c.report.max_rel_err, c.report.checked, if c.passed() { "ok" } else { "FAIL" });
                ok &= c.passed();
            }
            if !ok {
                return Err(Error::InvalidArgument(format!("gradient check above {SUITE_TOLERANCE}")));
            }
        }
        Cmd::Ablate(a) => {
            let axis: AblationAxis = a.axis.parse()?;
            let cfg = a.cfg.resolve()?;
            let rows = ablate(axis, &cfg, a.test_n)?;
            fs::create_dir_all(&a.out)?;
            let csv = ablation_csv(&rows);
            write_atomic(&a.out.join(format!("ablate_{}.csv", a.axis)), csv.as_bytes())?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
