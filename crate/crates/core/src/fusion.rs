//! Degradation-oriented fusion: stems, recursive DOFT blocks and the
//! reconstruction head, plus the full model wiring.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::kernels::{deform_forward, deform_sample, DeformGeom, DCN_TAPS};
use crate::autograd::{Tape, Var};
use crate::degradation::{DegradationCode, DegradationMap, DegradationModule, DegradationVars, RouterDecision};
use crate::depthio::{bicubic_resize, fill_holes, DepthMap, RgbImage, DEPTH_NORMALIZER_M};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, Linear, ParamBuilder, ParamId, ParamStore, ResBlock};
use crate::tensor::{Real, Tensor};

/// Channel-major feature grid `[C, H, W]`.
pub type FeatureMap<T> = Tensor<T>;

/// Architectural hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Fusion feature width.
    pub c_feat: usize,
    /// Degradation map width.
    pub c_deg: usize,
    /// Degradation code length.
    pub c_code: usize,
    pub t_doft: usize,
    pub g: usize,
    pub k: usize,
    pub scale: usize,
    /// Scale every convolutional width by 3/8 (rounded to the nearest even).
    pub tiny: bool,
    /// Hidden width of the kernel generator MLPs.
    pub gen_hidden: usize,
    /// Hidden width of the DCN weight generator MLP.
    pub wgen_hidden: usize,
    /// Squeeze ratio of channel attention.
    pub ca_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_feat: 32,
            c_deg: 16,
            c_code: 64,
            t_doft: 5,
            g: 4,
            k: 3,
            scale: 4,
            tiny: false,
            gen_hidden: 64,
            wgen_hidden: 16,
            ca_reduction: 4,
        }
    }
}

fn three_eighths_even(c: usize) -> usize {
    let v = c as f64 * 3.0 / 8.0;
    let even = (v / 2.0).round() as usize * 2;
    even.max(2)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_doft < 1 {
            return Err(Error::Config("t_doft must be >= 1".into()));
        }
        if self.c_feat < 2 || self.c_deg < 2 || self.c_code < 2 {
            return Err(Error::Config("widths must be >= 2".into()));
        }
        if self.k < 1 || self.k > self.g {
            return Err(Error::Config(format!("router needs 1 <= k <= g (k={}, g={})", self.k, self.g)));
        }
        if self.scale < 1 {
            return Err(Error::Config("scale must be >= 1".into()));
        }
        if self.gen_hidden < 1 || self.wgen_hidden < 1 || self.ca_reduction < 1 {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Effective fusion width after the tiny scaling.
    pub fn feat(&self) -> usize {
        if self.tiny { three_eighths_even(self.c_feat) } else { self.c_feat }
    }

    /// Effective degradation map width after the tiny scaling.
    pub fn deg(&self) -> usize {
        if self.tiny { three_eighths_even(self.c_deg) } else { self.c_deg }
    }

    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("c_feat", self.c_feat.to_string()),
            ("c_deg", self.c_deg.to_string()),
            ("c_code", self.c_code.to_string()),
            ("t_doft", self.t_doft.to_string()),
            ("g", self.g.to_string()),
            ("k", self.k.to_string()),
            ("scale", self.scale.to_string()),
            ("tiny", self.tiny.to_string()),
            ("gen_hidden", self.gen_hidden.to_string()),
            ("wgen_hidden", self.wgen_hidden.to_string()),
            ("ca_reduction", self.ca_reduction.to_string()),
        ] {
            writeln!(s, "{prefix}{k}={v}").unwrap();
        }
        s
    }

    /// Apply one `key=value` pair; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        let u = || value.trim().parse::<usize>().map_err(|_| bad());
        match key {
            "c_feat" => self.c_feat = u()?,
            "c_deg" => self.c_deg = u()?,
            "c_code" => self.c_code = u()?,
            "t_doft" => self.t_doft = u()?,
            "g" => self.g = u()?,
            "k" => self.k = u()?,
            "scale" => self.scale = u()?,
            "tiny" => self.tiny = value.trim().parse().map_err(|_| bad())?,
            "gen_hidden" => self.gen_hidden = u()?,
            "wgen_hidden" => self.wgen_hidden = u()?,
            "ca_reduction" => self.ca_reduction = u()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("bad line {line:?}")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Residual blocks and a tail conv, rescaled by squeeze-excite channel
/// attention, with an outer skip: `x + ca(h) * h`, `h = tail(rb(rb(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualGroup {
    blocks: [ResBlock; 2],
    tail: Conv,
    ca1: Linear,
    ca2: Linear,
}

impl ResidualGroup {
    pub fn new(b: &mut ParamBuilder, name: &str, ch: usize, reduction: usize) -> Self {
        let mid = (ch / reduction).max(1);
        Self {
            blocks: [ResBlock::new(b, &format!("{name}.rb0"), ch), ResBlock::new(b, &format!("{name}.rb1"), ch)],
            tail: b.conv(&format!("{name}.tail"), ch, ch, 3, 1, Init::Zero),
            ca1: b.linear(&format!("{name}.ca.fc1"), ch, mid, Init::He(1.0)),
            ca2: b.linear(&format!("{name}.ca.fc2"), mid, ch, Init::He(1.0)),
        }
    }

    /// Channel attention scales in `(0, 1)` for a block output.
    pub fn attention<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, h: Var) -> Var {
        let s = tape.global_avg_pool(h);
        let s = self.ca1.apply(tape, p, s);
        let s = tape.silu(s);
        let s = self.ca2.apply(tape, p, s);
        tape.sigmoid(s)
    }

    pub fn body<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for b in &self.blocks {
            h = b.apply(tape, p, h);
        }
        self.tail.apply(tape, p, h)
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = self.body(tape, p, x);
        let s = self.attention(tape, p, h);
        let h = tape.channel_scale(h, s);
        tape.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([b.c1.w, b.c1.b, b.c2.w, b.c2.b]);
        }
        v.extend([self.tail.w, self.tail.b]);
        v.extend([self.ca1.w, self.ca1.b, self.ca2.w, self.ca2.b]);
        v
    }

    pub fn conv_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.blocks.iter().flat_map(|b| [b.c1.w, b.c1.b, b.c2.w, b.c2.b]).collect();
        v.extend([self.tail.w, self.tail.b]);
        v
    }
}

/// Degradation-oriented feature transformation block.
#[derive(Clone, Debug)]
pub struct Doft {
    pub rg: ResidualGroup,
    pub offset: Conv,
    pub modulation: Conv,
    wgen1: Linear,
    wgen2_w: ParamId,
    wgen2_b: ParamId,
    pub affinity: Conv,
    post: Conv,
    fuse: Conv,
    ch: usize,
}

/// Intermediate vars of one DOFT step (exposed for tests).
#[derive(Clone, Copy, Debug)]
pub struct DoftVars {
    pub f_d: Var,
    pub f_r: Var,
    pub f_rd: Var,
    pub affinity: Var,
}

impl Doft {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Self {
        let (c, cd) = (cfg.feat(), cfg.deg());
        let wn = DCN_TAPS * c * c;
        Self {
            rg: ResidualGroup::new(b, &format!("{name}.rg"), c, cfg.ca_reduction),
            offset: b.conv(&format!("{name}.offset"), cd, 2 * DCN_TAPS, 3, 1, Init::Zero),
            modulation: b.conv(&format!("{name}.modulation"), cd, DCN_TAPS, 3, 1, Init::Zero),
            wgen1: b.linear(&format!("{name}.wgen.fc1"), cfg.c_code, cfg.wgen_hidden, Init::He(1.0)),
            wgen2_w: b.tensor(&format!("{name}.wgen.fc2.weight"), &[wn, cfg.wgen_hidden], cfg.wgen_hidden, Init::He(0.05)),
            // the bias acts as the input-independent part of the DCN kernel
            wgen2_b: b.tensor(&format!("{name}.wgen.fc2.bias"), &[wn], DCN_TAPS * c, Init::He(1.0)),
            affinity: b.conv(&format!("{name}.affinity"), cd, c, 3, 1, Init::He(1.0)),
            post: b.conv(&format!("{name}.post"), c, c, 3, 1, Init::He(1.0)),
            fuse: b.conv(&format!("{name}.fuse"), 2 * c, c, 3, 1, Init::He(1.0)),
            ch: c,
        }
    }

    /// DCN weights `[C, C, 3, 3]` generated from the code.
    pub fn dcn_weights<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, code: Var) -> Var {
        let h = self.wgen1.apply(tape, p, code);
        let h = tape.silu(h);
        let w = tape.linear(h, p.var(self.wgen2_w), p.var(self.wgen2_b));
        tape.reshape(w, &[self.ch, self.ch, 3, 3])
    }

    /// Affinity gate `sigmoid(conv(dmap))`.
    pub fn affinity_gate<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, dmap: Var) -> Var {
        let a = self.affinity.apply(tape, p, dmap);
        tape.sigmoid(a)
    }

    /// Degradation-aligned RGB feature `F_rd` and the deepened RGB stream.
    pub fn rgb_branch<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, dmap: Var, code: Var, f_r: Var) -> (Var, Var) {
        let rg = self.rg.apply(tape, p, f_r);
        let off = self.offset.apply(tape, p, dmap);
        let m = self.modulation.apply(tape, p, dmap);
        let m = tape.sigmoid(m);
        let w = self.dcn_weights(tape, p, code);
        let d = tape.deform_conv(rg, off, m, w);
        (tape.add(d, rg), rg)
    }

    /// `conv([f_d, gate * conv(f_rd) + f_rd])`.
    pub fn fuse_with<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f_d: Var, f_rd: Var, gate: Var) -> Var {
        let t = self.post.apply(tape, p, f_rd);
        let t = tape.mul(gate, t);
        let t = tape.add(t, f_rd);
        let cat = tape.concat(f_d, t);
        self.fuse.apply(tape, p, cat)
    }

    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, dmap: Var, code: Var, f_d: Var, f_r: Var) -> DoftVars {
        let (f_rd, rg) = self.rgb_branch(tape, p, dmap, code, f_r);
        let gate = self.affinity_gate(tape, p, dmap);
        let f_d = self.fuse_with(tape, p, f_d, f_rd, gate);
        DoftVars { f_d, f_r: rg, f_rd, affinity: gate }
    }
}

/// Full model: degradation branch, stems, DOFT recursion and reconstruction head.
#[derive(Clone, Debug)]
pub struct Dornet {
    pub cfg: ModelConfig,
    pub degradation: DegradationModule,
    depth_stem: Conv,
    rgb_stem: Conv,
    pub dofts: Vec<Doft>,
    head_inner: Conv,
    pub head_out: Conv,
}

/// Vars from one forward pass in normalized depth units.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub d_up: Var,
    pub rgb: Var,
    pub d_hr: Var,
    pub deg: DegradationVars,
}

/// Value-level result of [`Dornet::predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Meters.
    pub d_hr: DepthMap,
    /// Meters.
    pub d_up: DepthMap,
    pub dmap: DegradationMap,
    pub code: DegradationCode,
    pub decision: RouterDecision,
}

impl Dornet {
    /// Build the architecture and an initialization from `seed`.
    /// `dense` draws every tensor at random (no zero initializers).
    pub fn init(cfg: &ModelConfig, seed: u64, dense: bool) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng, dense);
        let (c, cd) = (cfg.feat(), cfg.deg());
        let degradation = DegradationModule::new(&mut b, cd, cfg.c_code, cfg.g, cfg.k, cfg.gen_hidden);
        let depth_stem = b.conv("fusion.depth_stem", 1, c, 3, 1, Init::He(1.0));
        let rgb_stem = b.conv("fusion.rgb_stem", 3, c, 3, 1, Init::He(1.0));
        let dofts = (0..cfg.t_doft).map(|t| Doft::new(&mut b, &format!("doft{t}"), cfg)).collect();
        let head_inner = b.conv("head.inner", c, c, 3, 1, Init::He(1.0));
        let head_out = b.conv("head.out", c, 1, 3, 1, Init::Zero);
        let store = b.store;
        Ok((Self { cfg: cfg.clone(), degradation, depth_stem, rgb_stem, dofts, head_inner, head_out }, store))
    }

    /// Rebuild the architecture only (parameters come from elsewhere).
    pub fn architecture(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self::init(cfg, 0, false)?.0)
    }

    /// Forward pass over normalized inputs `d_up: [1, H, W]`, `rgb: [3, H, W]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, d_up: Var, rgb: Var) -> Result<ForwardVars> {
        let (_, h, w) = tape.value(d_up).chw();
        let (rc, rh, rw) = tape.value(rgb).chw();
        if rc != 3 || (rh, rw) != (h, w) {
            return Err(Error::Shape(format!("rgb {rc}x{rh}x{rw} does not match depth {h}x{w}")));
        }
        let deg = self.degradation.encode(tape, p, d_up)?;
        let f_d0 = self.depth_stem.apply(tape, p, d_up);
        let mut f_r = self.rgb_stem.apply(tape, p, rgb);
        let mut f_d = f_d0;
        for doft in &self.dofts {
            let v = doft.step(tape, p, deg.dmap, deg.code, f_d, f_r);
            f_d = v.f_d;
            f_r = v.f_r;
        }
        let inner = self.head_inner.apply(tape, p, f_d);
        let s = tape.add(f_d0, inner);
        let corr = self.head_out.apply(tape, p, s);
        let d_hr = tape.add(corr, d_up);
        Ok(ForwardVars { d_up, rgb, d_hr, deg })
    }

    /// Network input for an LR depth map in meters: hole-filled, normalized, bicubic-upsampled.
    pub fn upsample_input(&self, lr: &DepthMap) -> Result<DepthMap> {
        let filled = fill_holes(lr);
        bicubic_resize(&filled, self.cfg.scale as f64)
    }

    pub fn predict<T: Real>(&self, params: &ParamStore<T>, lr: &DepthMap, rgb: &RgbImage) -> Result<Prediction> {
        let (h, w) = lr.dims();
        if rgb.dims() != (h * self.cfg.scale, w * self.cfg.scale) {
            return Err(Error::Shape(format!(
                "rgb {:?} is not {}x the LR depth {:?}",
                rgb.dims(),
                self.cfg.scale,
                lr.dims()
            )));
        }
        let d_up = self.upsample_input(lr)?;
        self.predict_upsampled(params, &d_up, rgb)
    }

    /// Forward pass from an already upsampled depth map in meters.
    pub fn predict_upsampled<T: Real>(&self, params: &ParamStore<T>, d_up: &DepthMap, rgb: &RgbImage) -> Result<Prediction> {
        let norm = T::lit(1.0 / DEPTH_NORMALIZER_M);
        let mut tape = Tape::new();
        let p = params.register(&mut tape);
        let mut up = d_up.to_tensor::<T>();
        up.scale_assign(norm);
        let up = tape.constant(up);
        let rgb_v = tape.constant(rgb.to_tensor());
        let f = self.forward(&mut tape, &p, up, rgb_v)?;
        // add the correction in meters so a zero correction returns d_up bit for bit
        let scale = T::lit(DEPTH_NORMALIZER_M);
        let mut out = d_up.to_tensor::<T>();
        for ((o, &hr), &u) in out.data_mut().iter_mut().zip(tape.value(f.d_hr).data()).zip(tape.value(up).data()) {
            *o = *o + (hr - u) * scale;
        }
        let scores: Vec<f64> = tape.value(f.deg.scores).data().iter().map(|v| v.as_f64()).collect();
        Ok(Prediction {
            d_hr: DepthMap::from_tensor(&out)?,
            d_up: d_up.clone(),
            dmap: DegradationMap(tape.value(f.deg.dmap).cast()),
            code: DegradationCode(tape.value(f.deg.code).data().iter().map(|v| v.as_f64() as f32).collect()),
            decision: RouterDecision::from_scores(&scores, self.cfg.k)?,
        })
    }

    /// Zero the final reconstruction conv so the network outputs `d_up` exactly.
    pub fn zero_correction_head<T: Real>(&self, params: &mut ParamStore<T>) {
        for id in [self.head_out.w, self.head_out.b] {
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Value-level modulated deformable convolution (3x3, stride 1, pad 1).
pub fn deform_conv<T: Real>(
    feat: &FeatureMap<T>,
    offsets: &Tensor<T>,
    modulation: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<FeatureMap<T>> {
    let (cin, h, w) = feat.chw();
    if offsets.shape() != [2 * DCN_TAPS, h, w] {
        return Err(Error::Shape(format!("offsets {:?}, expected [18, {h}, {w}]", offsets.shape())));
    }
    if modulation.shape() != [DCN_TAPS, h, w] {
        return Err(Error::Shape(format!("modulation {:?}, expected [9, {h}, {w}]", modulation.shape())));
    }
    let ws = weights.shape();
    if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::Shape(format!("weights {ws:?}, expected [Cout, {cin}, 3, 3]")));
    }
    let geom = DeformGeom { cin, cout: ws[0], h, w };
    let sampled = deform_sample(&geom, feat.data(), offsets.data());
    let out = deform_forward(&geom, &sampled, modulation.data(), weights.data());
    Tensor::from_vec(&[ws[0], h, w], out)
}
