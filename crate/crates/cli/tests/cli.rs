use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dornet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dornet")).args(args).output().expect("spawn dornet")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 14] = [
    "--set", "model.c_feat=4", "--set", "model.c_deg=4", "--set", "model.c_code=8", "--set", "model.t_doft=1", "--set",
    "batch_size=1", "--set", "data.hr_size=16", "--set", "model.gen_hidden=8",
];

#[test]
fn unknown_flag_is_usage_error() {
    let out = dornet(&["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(dornet(&[]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dornet(&["eval", "--ckpt", "identity", "--data", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_writes_complete_quintuples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dornet(&["synth", "--seed", "0", "--n", "8", "--out", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = fs::read_dir(dir.path().join("test")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.len(), 40);
    for i in 0..8 {
        for suffix in ["hr.pfm", "lr.pfm", "rgb.ppm", "mask.pgm", "spec.txt"] {
            assert!(names.contains(&format!("{i:04}_{suffix}")), "missing {i} {suffix}");
        }
    }
}

#[test]
fn identity_eval_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(dornet(&["synth", "--n", "2", "--size", "16", "--out", p(&data)]).status.success());
    let csv = dir.path().join("eval.csv");
    let out = dornet(&["eval", "--ckpt", "identity", "--data", p(&data), "--out", p(&csv)]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let field = |k: &str| text.split_whitespace().find_map(|t| t.strip_prefix(k)).unwrap().to_string();
    assert_eq!(field("rmse_cm="), field("bicubic_rmse_cm="));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);

    let sweep = dir.path().join("sweep");
    assert!(dornet(&["sweep", "--ckpt", "identity", "--data", p(&data), "--out", p(&sweep)]).status.success());
    let rows = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().next(), Some("noise_std,rmse_cm"));
    assert_eq!(rows.lines().count(), 6);
    assert!(sweep.join("sweep.svg").exists());
}

#[test]
fn train_then_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--steps", "2", "--out", p(&run)];
    args.extend(TINY);
    let out = dornet(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run.join("train.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,l_rec,l_deg,l_cont,l_total,rmse_cm"));
    assert_eq!(log.lines().count(), 3);
    assert!(run.join("checkpoint/manifest.txt").exists());

    let data = dir.path().join("data");
    assert!(dornet(&["synth", "--n", "1", "--size", "16", "--out", p(&data)]).status.success());
    let kout = dir.path().join("k");
    let out = dornet(&["kernels", "--ckpt", p(&run), "--data", p(&data), "--out", p(&kout)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(kout.join("kernels.txt")).unwrap();
    let blocks: Vec<&str> = text.lines().filter(|l| l.starts_with("kernel ")).collect();
    assert_eq!(blocks.len(), 3);
    let mass: f64 = blocks.iter().map(|l| l.split_whitespace().nth(2).unwrap().parse::<f64>().unwrap()).sum();
    assert!((mass - 1.0).abs() < 1e-6);
    assert!(text.contains("effective 9"));
    assert!(kout.join("effective.pgm").exists());

    let out = dornet(&["eval", "--ckpt", p(&run), "--data", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes() {
    let out = dornet(&["gradcheck", "--coords", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("total_loss_end_to_end"));
}

#[test]
fn ablate_loss_axis_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--axis", "loss", "--steps", "1", "--test-n", "1", "--out", p(dir.path())];
    args.extend(TINY);
    let out = dornet(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("ablate_loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "setting,rmse_cm,params");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("rec,"));
    assert!(dornet(&["ablate", "--axis", "nope", "--out", p(dir.path())]).status.code() == Some(1));
}
