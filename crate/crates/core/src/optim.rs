//! SGD with heavy-ball momentum and a cosine-annealed learning rate.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// `lr(t) = base · ½(1 + cos(π t / (steps − 1)))`: `base` at the first step,
/// exactly zero at the last.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.base;
        }
        let t = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// `v ← μ v + g`, `w ← w − lr · v`. No weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar> {
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new<U: Scalar>(params: &ParamStore<U>, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            momentum: T::from_f64(momentum),
            velocity: params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect(),
        })
    }

    /// Apply one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let lr = T::from_f64(lr);
        for ((name, tensor), vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter {name} has no gradient buffer")))?
                .to_vec();
            for ((w, v), g) in tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = self.momentum * *v + g;
                *w = *w - lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new([1], vec![w]).unwrap());
        s.get_mut(id).grad_mut().unwrap()[0] = g;
        s
    }

    #[test]
    fn first_step_is_plain_sgd() {
        let mut s = store(1.5, 0.25);
        let mut opt = Sgd::new(&s, 0.9).unwrap();
        opt.step(&mut s, 1e-3).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data()[0], 1.5 - 1e-3 * 0.25);
    }

    #[test]
    fn momentum_accumulates() {
        let mut s = store(0.0, 1.0);
        let mut opt = Sgd::new(&s, 0.9).unwrap();
        opt.step(&mut s, 1.0).unwrap();
        opt.step(&mut s, 1.0).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((s.iter().next().unwrap().1.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut s = store(0.123, 7.0);
        let mut opt = Sgd::new(&s, 0.9).unwrap();
        for _ in 0..5 {
            opt.step(&mut s, 0.0).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().1.data()[0].to_bits(), 0.123f64.to_bits());
    }

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule { base: 0.05, steps: 300 };
        assert_eq!(s.lr(0), 0.05);
        assert!(s.lr(299) <= 1e-3 * 0.05);
        assert!((s.lr(149) - 0.05 * 0.5 * (1.0 + (std::f64::consts::PI * 149.0 / 299.0).cos())).abs() < 1e-15);
        assert!((1..300).all(|t| s.lr(t) <= s.lr(t - 1)));
        assert_eq!(CosineSchedule { base: 0.1, steps: 1 }.lr(0), 0.1);
    }

    #[test]
    fn bad_momentum() {
        assert!(Sgd::<f64>::new(&store(0.0, 0.0), 1.0).is_err());
    }
}
