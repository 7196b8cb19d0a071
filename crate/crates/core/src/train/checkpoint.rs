//! Checkpoint directory: `checkpoint.bin` (binary, little-endian) and a
//! human-readable `manifest.txt` with one `name shape sha256` line per tensor.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::depthio::write_atomic;
use crate::error::{CheckpointError, Result};
use crate::fusion::Dornet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DORCKPT1";
pub const BIN_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: Adam,
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn shape_text(s: &[usize]) -> String {
    if s.is_empty() {
        return "scalar".into();
    }
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    /// Every stored tensor as `(name, tensor)`: parameters, then both Adam moments.
    fn entries(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (prefix, store) in [("", &self.params), ("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for (n, t) in store.names().iter().zip(store.tensors()) {
                out.push((format!("{prefix}{n}"), t));
            }
        }
        out
    }

    pub fn manifest(&self) -> String {
        let entries = self.entries();
        let mut s = String::new();
        writeln!(s, "# dornet checkpoint manifest").unwrap();
        writeln!(s, "step {}", self.step).unwrap();
        writeln!(s, "tensors {}", entries.len()).unwrap();
        for (name, t) in entries {
            writeln!(s, "{name} {} {}", shape_text(t.shape()), digest(&tensor_bytes(t))).unwrap();
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        let cfg = self.config.to_kv();
        b.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.adam.t.to_le_bytes());
        let entries = self.entries();
        b.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, t) in entries {
            b.extend_from_slice(&(name.len() as u64).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            b.extend_from_slice(&tensor_bytes(t));
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    /// Write both files atomically (temp file, then rename).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(BIN_FILE), &self.to_bytes())?;
        write_atomic(&dir.join(MANIFEST_FILE), self.manifest().as_bytes())?;
        Ok(())
    }

    /// Load and fully verify a checkpoint directory. Either the whole
    /// checkpoint is returned or an error; there is no partial state.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let bytes = fs::read(dir.join(BIN_FILE))?;
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Self::from_parts(&bytes, &manifest)
    }

    pub fn from_parts(bytes: &[u8], manifest: &str) -> Result<Self> {
        let (ck, digest_ok) = Self::decode(bytes)?;
        verify_manifest(&ck, manifest)?;
        if !digest_ok {
            return Err(CheckpointError::ChecksumMismatch(BIN_FILE.into()).into());
        }
        Ok(ck)
    }

    fn decode(bytes: &[u8]) -> Result<(Self, bool)> {
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated.into());
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        if bytes.len() < MAGIC.len() + 32 {
            return Err(CheckpointError::Truncated.into());
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { b: body, pos: MAGIC.len() };
        let cfg_len = r.u64()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| CheckpointError::Config("not utf-8".into()))?.to_string();
        let step = r.u64()?;
        let t = r.u64()?;
        let count = r.u64()? as usize;
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u64()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| CheckpointError::Manifest("tensor name not utf-8".into()))?;
            let ndim = r.u64()? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Truncated.into());
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Truncated.into());
        }
        let digest_ok = Sha256::digest(body).as_slice() == sum;
        let config = TrainConfig::from_kv(&cfg_text).map_err(|e| CheckpointError::Config(e.to_string()))?;

        // the architecture decides which tensors must be present, and their shapes
        let (_, reference) = Dornet::init(&config.model, 0, false)?;
        let mut by_name: HashMap<String, Tensor<f32>> = HashMap::with_capacity(tensors.len());
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Manifest(format!("duplicate tensor {name}")).into());
            }
        }
        let mut stores = [ParamStore::default(), ParamStore::default(), ParamStore::default()];
        for (prefix, store) in ["", "adam.m/", "adam.v/"].into_iter().zip(stores.iter_mut()) {
            for (n, rt) in reference.names().iter().zip(reference.tensors()) {
                let key = format!("{prefix}{n}");
                let t = by_name.remove(&key).ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
                if t.shape() != rt.shape() {
                    return Err(CheckpointError::ShapeMismatch { name: key, expected: rt.shape().to_vec(), found: t.shape().to_vec() }.into());
                }
                store.push(n.clone(), t);
            }
        }
        if let Some(extra) = by_name.into_keys().next() {
            return Err(CheckpointError::UnexpectedTensor(extra).into());
        }
        let [params, m, v] = stores;
        Ok((Self { config, step, params, adam: Adam { m, v, t } }, digest_ok))
    }
}

fn verify_manifest(ck: &Checkpoint, manifest: &str) -> Result<()> {
    let mut listed: HashMap<&str, (&str, &str)> = HashMap::new();
    let mut declared = None;
    for line in manifest.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["step", _] => {}
            ["tensors", n] => declared = n.parse::<usize>().ok(),
            [name, shape, sum] => {
                listed.insert(name, (shape, sum));
            }
            _ => return Err(CheckpointError::Manifest(format!("bad line {line:?}")).into()),
        }
    }
    let entries = ck.entries();
    if declared != Some(entries.len()) || listed.len() != entries.len() {
        return Err(CheckpointError::Manifest(format!(
            "expected {} tensors, manifest lists {}",
            entries.len(),
            listed.len()
        ))
        .into());
    }
    for (name, t) in entries {
        let (shape, sum) = listed.get(name.as_str()).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if *shape != shape_text(t.shape()) {
            return Err(CheckpointError::Manifest(format!("shape of {name} differs from manifest")).into());
        }
        if *sum != digest(&tensor_bytes(t)) {
            return Err(CheckpointError::ChecksumMismatch(name).into());
        }
    }
    Ok(())
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
    }
}
