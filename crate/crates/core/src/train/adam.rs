use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || {
            let mut s = ParamStore::default();
            for (n, t) in params.names().iter().zip(params.tensors()) {
                s.push(n.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let tensors = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for i in 0..tensors.len() {
            let p = tensors[i].data_mut();
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                p[j] -= (lr * mhat / (vhat.sqrt() + EPS)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::default();
        s.push("x".into(), Tensor::from_vec(&[2], vec![v, -v]).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut opt = Adam::new(&p);
        let g = vec![Tensor::from_vec(&[2], vec![0.3f32, -2.0]).unwrap()];
        opt.step(&mut p, &g, 0.01);
        // bias-corrected first step is lr * sign(g)
        assert!((p.tensors()[0].data()[0] - 0.99).abs() < 1e-6);
        assert!((p.tensors()[0].data()[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_bitwise_fixpoint() {
        let mut p = store(0.123_456_7);
        let before = p.clone();
        let mut opt = Adam::new(&p);
        let g = vec![Tensor::from_vec(&[2], vec![5.0f32, 1e-9]).unwrap()];
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = store(3.0);
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let g: Vec<f32> = p.tensors()[0].data().iter().map(|&x| 2.0 * (x - 0.5)).collect();
            opt.step(&mut p, &[Tensor::from_vec(&[2], g).unwrap()], 0.01);
        }
        for &x in p.tensors()[0].data() {
            assert!((x - 0.5).abs() < 1e-2);
        }
    }
}
