//! On-disk dataset layout: `<root>/<split>/<index>_{hr.pfm, lr.pfm, rgb.ppm, mask.pgm, spec.txt}`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{read_pfm, read_pgm, read_ppm, write_atomic, write_pfm, write_pgm, write_ppm};
use super::synth::{DegradationSpec, SceneSample};
use super::types::Kernel;
use crate::error::{Error, Result};

pub const SAMPLE_SUFFIXES: [&str; 5] = ["hr.pfm", "lr.pfm", "rgb.ppm", "mask.pgm", "spec.txt"];

fn sample_path(dir: &Path, index: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{index:04}_{suffix}"))
}

pub fn format_spec(spec: &DegradationSpec) -> String {
    let mut s = String::new();
    writeln!(s, "scale={}", spec.scale).unwrap();
    writeln!(s, "noise_std={}", spec.noise_std).unwrap();
    writeln!(s, "hole_rate={}", spec.hole_rate).unwrap();
    writeln!(s, "seed={}", spec.seed).unwrap();
    s.push_str(&format_kernel_block("kernel", &spec.blur_kernel, None));
    s
}

/// `<tag> <side> [weight]` followed by `side` rows of whitespace-separated floats.
pub fn format_kernel_block(tag: &str, k: &Kernel, weight: Option<f64>) -> String {
    let mut s = String::new();
    match weight {
        Some(wt) => writeln!(s, "{tag} {} {wt}", k.side()).unwrap(),
        None => writeln!(s, "{tag} {}", k.side()).unwrap(),
    }
    for y in 0..k.side() {
        let row: Vec<String> = (0..k.side()).map(|x| format!("{:e}", k.get(y, x))).collect();
        writeln!(s, "{}", row.join(" ")).unwrap();
    }
    s
}

pub fn parse_spec(text: &str) -> Result<DegradationSpec> {
    let mut spec = DegradationSpec::identity(1);
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let bad = |what: &str| Error::Format(format!("spec.txt: bad {what}"));
    while let Some(line) = lines.next() {
        if let Some(rest) = line.strip_prefix("kernel") {
            let side: usize = rest.split_whitespace().next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("kernel header"))?;
            let mut vals = Vec::with_capacity(side * side);
            while vals.len() < side * side {
                let row = lines.next().ok_or_else(|| bad("kernel rows"))?;
                for t in row.split_whitespace() {
                    vals.push(t.parse::<f64>().map_err(|_| bad("kernel value"))?);
                }
            }
            if vals.len() != side * side {
                return Err(bad("kernel size"));
            }
            // renormalize away text rounding
            let sum: f64 = vals.iter().sum();
            vals.iter_mut().for_each(|v| *v /= sum);
            spec.blur_kernel = Kernel::new(side, vals)?;
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad("line"))?;
        match k.trim() {
            "scale" => spec.scale = v.trim().parse().map_err(|_| bad("scale"))?,
            "noise_std" => spec.noise_std = v.trim().parse().map_err(|_| bad("noise_std"))?,
            "hole_rate" => spec.hole_rate = v.trim().parse().map_err(|_| bad("hole_rate"))?,
            "seed" => spec.seed = v.trim().parse().map_err(|_| bad("seed"))?,
            _ => {}
        }
    }
    Ok(spec)
}

pub fn write_sample(root: &Path, split: &str, index: usize, sample: &SceneSample) -> Result<()> {
    let dir = root.join(split);
    fs::create_dir_all(&dir)?;
    write_pfm(&sample.hr_depth, sample_path(&dir, index, "hr.pfm"))?;
    write_pfm(&sample.lr_depth, sample_path(&dir, index, "lr.pfm"))?;
    write_ppm(&sample.rgb, sample_path(&dir, index, "rgb.ppm"))?;
    write_pgm(&sample.gt_mask, sample_path(&dir, index, "mask.pgm"))?;
    write_atomic(&sample_path(&dir, index, "spec.txt"), format_spec(&sample.meta).as_bytes())
}

pub fn read_sample(root: &Path, split: &str, index: usize) -> Result<SceneSample> {
    let dir = root.join(split);
    let missing: Vec<&str> = SAMPLE_SUFFIXES.iter().copied().filter(|s| !sample_path(&dir, index, s).exists()).collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("sample {index}: missing {}", missing.join(", "))));
    }
    let meta = parse_spec(&fs::read_to_string(sample_path(&dir, index, "spec.txt"))?)?;
    let sample = SceneSample {
        hr_depth: read_pfm(sample_path(&dir, index, "hr.pfm"))?,
        lr_depth: read_pfm(sample_path(&dir, index, "lr.pfm"))?,
        rgb: read_ppm(sample_path(&dir, index, "rgb.ppm"))?,
        gt_mask: read_pgm(sample_path(&dir, index, "mask.pgm"))?,
        gt_kernel: Some(meta.blur_kernel.clone()),
        meta,
    };
    let s = sample.meta.scale;
    let (h, w) = sample.hr_depth.dims();
    if sample.lr_depth.dims() != (h / s, w / s) || sample.rgb.dims() != (h, w) || sample.gt_mask.dims() != (h, w) {
        return Err(Error::Dataset(format!("sample {index}: inconsistent dimensions")));
    }
    Ok(sample)
}

/// Indices present in a split (any file of the quintuple counts).
pub fn list_indices(root: &Path, split: &str) -> Result<Vec<usize>> {
    let dir = root.join(split);
    let entries = fs::read_dir(&dir).map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?;
    let mut set = BTreeSet::new();
    for e in entries {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some((idx, suffix)) = name.split_once('_') {
            if SAMPLE_SUFFIXES.contains(&suffix) {
                if let Ok(i) = idx.parse::<usize>() {
                    set.insert(i);
                }
            }
        }
    }
    Ok(set.into_iter().collect())
}

/// Loads a full split, failing with every incomplete index listed.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<SceneSample>> {
    let idx = list_indices(root, split)?;
    if idx.is_empty() {
        return Err(Error::Dataset(format!("{}: no samples", root.join(split).display())));
    }
    let dir = root.join(split);
    let incomplete: Vec<String> = idx
        .iter()
        .filter(|&&i| SAMPLE_SUFFIXES.iter().any(|s| !sample_path(&dir, i, s).exists()))
        .map(|i| i.to_string())
        .collect();
    if !incomplete.is_empty() {
        return Err(Error::Dataset(format!("incomplete samples: {}", incomplete.join(", "))));
    }
    idx.into_iter().map(|i| read_sample(root, split, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthio::synth::synth_scene;

    #[test]
    fn spec_text_round_trip() {
        let spec = DegradationSpec {
            blur_kernel: Kernel::gaussian(7, 1.6, 0.8, 30.0).unwrap(),
            scale: 2,
            noise_std: 0.01,
            hole_rate: 0.02,
            seed: 5,
        };
        let back = parse_spec(&format_spec(&spec)).unwrap();
        assert_eq!(back.scale, 2);
        assert_eq!(back.seed, 5);
        assert_eq!(back.noise_std, 0.01);
        for (a, b) in back.blur_kernel.values().iter().zip(spec.blur_kernel.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_round_trip_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_scene(1, 16, &DegradationSpec::identity(2)).unwrap();
        write_sample(dir.path(), "test", 3, &s).unwrap();
        let back = read_sample(dir.path(), "test", 3).unwrap();
        assert_eq!(back.hr_depth, s.hr_depth);
        assert_eq!(back.lr_depth, s.lr_depth);
        assert_eq!(list_indices(dir.path(), "test").unwrap(), vec![3]);
        fs::remove_file(dir.path().join("test/0003_rgb.ppm")).unwrap();
        let err = read_split(dir.path(), "test").unwrap_err().to_string();
        assert!(err.contains('3'), "{err}");
    }

    #[test]
    fn empty_split_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("test")).unwrap();
        assert!(read_split(dir.path(), "test").is_err());
        assert!(read_split(dir.path(), "nope").is_err());
    }
}
