//! Parameter storage and the handful of layer shapes the model is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn push(&mut self, name: String, t: Tensor<T>) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total element count over all tensors.
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Record every tensor as a trainable leaf; returned vars are indexed by [`ParamId`].
    pub fn register(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Replace values from another store with identical names and shapes.
    pub fn assign(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter sets differ".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Shape("parameter shapes differ".into()));
            }
            *a = b.clone();
        }
        Ok(())
    }
}

/// Parameter leaves of one tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wrap vars that stand in for the parameters of a store, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal scaled by `gain`.
    He(f64),
    /// Every entry exactly zero.
    Zero,
    /// Normal with the given std.
    Normal(f64),
}

/// Registers parameters with a deterministic initializer.
pub struct ParamBuilder<'a> {
    pub store: ParamStore<f32>,
    rng: &'a mut ChaCha8Rng,
    /// Replace zero initializers with small random values (used by
    /// gradient checks so no activation sits at a degenerate point).
    dense: bool,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, dense: bool) -> Self {
        Self { store: ParamStore::default(), rng, dense }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let init = match init {
            Init::Zero if self.dense => Init::Normal(0.1),
            other => other,
        };
        let data: Vec<f32> = match init {
            Init::Zero => vec![0.0; n],
            Init::He(gain) => {
                let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                let d = Normal::new(0.0, std).expect("std > 0");
                (0..n).map(|_| d.sample(self.rng) as f32).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("std > 0");
                (0..n).map(|_| d.sample(self.rng) as f32).collect()
            }
        };
        self.store.push(name.to_string(), Tensor::from_vec(shape, data).expect("shape"))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init) -> Conv {
        let w = self.tensor(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, init);
        let b = self.tensor(&format!("{name}.bias"), &[cout], 1, Init::Zero);
        Conv { w, b, stride, pad: k / 2 }
    }

    pub fn linear(&mut self, name: &str, nin: usize, nout: usize, init: Init) -> Linear {
        let w = self.tensor(&format!("{name}.weight"), &[nout, nin], nin, init);
        let b = self.tensor(&format!("{name}.bias"), &[nout], 1, Init::Zero);
        Linear { w, b }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }
}

/// `x + conv(silu(conv(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
}

impl ResBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, ch: usize) -> Self {
        Self {
            c1: b.conv(&format!("{name}.conv1"), ch, ch, 3, 1, Init::He(1.0)),
            c2: b.conv(&format!("{name}.conv2"), ch, ch, 3, 1, Init::He(0.5)),
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = self.c1.apply(tape, p, x);
        let h = tape.silu(h);
        let h = self.c2.apply(tape, p, h);
        tape.add(x, h)
    }
}

/// Element count of a 2-D convolution with bias.
pub fn conv_param_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_count_matches_builder() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut rng, false);
        b.conv("c", 4, 8, 3, 1, Init::He(1.0));
        assert_eq!(b.store.element_count(), 296);
        assert_eq!(conv_param_count(4, 8, 3), 296);
    }
}
