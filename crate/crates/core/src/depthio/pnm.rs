//! PFM (`Pf`, little-endian), binary PPM (`P6`) and binary PGM (`P5`).
//!
//! PFM scanlines are stored bottom-to-top as the format prescribes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::types::{DepthMap, RgbImage, ValidMask};
use crate::error::{Error, Result};

/// Largest accepted width or height.
const MAX_DIM: usize = 1 << 16;

pub fn encode_pfm(map: &DepthMap) -> Result<Vec<u8>> {
    if map.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("depth map contains non-finite values".into()));
    }
    let (h, w) = map.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&map.get(y, x).to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits `count` whitespace-separated header tokens off the front of `bytes`.
/// A single whitespace byte terminates the last token.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::Format("header not followed by raster data".into()));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str) -> Result<usize> {
    let v: usize = tok.parse().map_err(|_| Error::Format(format!("bad dimension {tok:?}")))?;
    if v == 0 || v > MAX_DIM {
        return Err(Error::Format(format!("dimension {v} out of range")));
    }
    Ok(v)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let (tok, start) = header_tokens(bytes, 4)?;
    match tok[0].as_str() {
        "Pf" => {}
        "PF" => return Err(Error::Format("expected single-channel PFM (Pf), found color (PF)".into())),
        other => return Err(Error::Format(format!("not a PFM file (magic {other:?})"))),
    }
    let w = parse_dim(&tok[1])?;
    let h = parse_dim(&tok[2])?;
    let scale: f32 = tok[3].parse().map_err(|_| Error::Format(format!("bad scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format(format!("bad scale {scale}")));
    }
    let little = scale < 0.0;
    let n = w.checked_mul(h).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let raster = &bytes[start..];
    if raster.len() < n {
        return Err(Error::Format(format!("raster has {} bytes, expected {n}", raster.len())));
    }
    let mut values = vec![0f32; w * h];
    for (i, chunk) in raster[..n].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        if !v.is_finite() {
            return Err(Error::Format("non-finite depth value".into()));
        }
        let (row, x) = (i / w, i % w);
        values[(h - 1 - row) * w + x] = v;
    }
    DepthMap::new(h, w, values)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let (h, w) = img.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(img.get(c, y, x)));
            }
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_maxval(tok: &str) -> Result<()> {
    match tok.parse::<u32>() {
        Ok(255) => Ok(()),
        _ => Err(Error::Format(format!("unsupported maxval {tok:?} (only 255)"))),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (tok, start) = header_tokens(bytes, 4)?;
    if tok[0] != "P6" {
        return Err(Error::Format(format!("expected binary PPM (P6), found {:?}", tok[0])));
    }
    let w = parse_dim(&tok[1])?;
    let h = parse_dim(&tok[2])?;
    check_maxval(&tok[3])?;
    let raster = &bytes[start..];
    if raster.len() < 3 * w * h {
        return Err(Error::Format("truncated PPM raster".into()));
    }
    let mut values = vec![0f32; 3 * w * h];
    for p in 0..w * h {
        for c in 0..3 {
            values[c * w * h + p] = raster[3 * p + c] as f32 / 255.0;
        }
    }
    RgbImage::new(h, w, values)
}

pub fn encode_pgm_mask(mask: &ValidMask) -> Vec<u8> {
    let (h, w) = mask.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.values().iter().map(|&v| if v { 255u8 } else { 0 }));
    out
}

/// Grayscale PGM from arbitrary bytes (used for kernel heatmaps).
pub fn encode_pgm_gray(h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_pgm_mask(bytes: &[u8]) -> Result<ValidMask> {
    let (tok, start) = header_tokens(bytes, 4)?;
    if tok[0] != "P5" {
        return Err(Error::Format(format!("expected binary PGM (P5), found {:?}", tok[0])));
    }
    let w = parse_dim(&tok[1])?;
    let h = parse_dim(&tok[2])?;
    check_maxval(&tok[3])?;
    let raster = &bytes[start..];
    if raster.len() < w * h {
        return Err(Error::Format("truncated PGM raster".into()));
    }
    ValidMask::new(h, w, raster[..w * h].iter().map(|&v| v >= 128).collect())
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_pfm(map: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pfm(map)?)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<DepthMap> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_ppm(img))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(mask: &ValidMask, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm_mask(mask))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ValidMask> {
    decode_pgm_mask(&fs::read(path)?)
}
