//! Adam and the cosine learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::ParamStore;
use crate::math;
use crate::tensor::Scalar;
use crate::{Error, Result};

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2`; steps past
/// `total` stay at `lr_min`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math::cos(core::f64::consts::PI * frac))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![S::zero(); p.value.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments of parameter `index`.
    pub fn moments(&self, index: usize) -> (&[S], &[S]) {
        (&self.m[index], &self.v[index])
    }

    /// Restores saved state. Buffer lengths must match the parameters.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) -> Result<()> {
        let ok = |b: &Vec<Vec<S>>| {
            b.len() == self.m.len() && b.iter().zip(&self.m).all(|(x, y)| x.len() == y.len())
        };
        if !ok(&m) || !ok(&v) {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update using the gradients held in `store`. A non-finite
    /// gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid("optimizer was built for a different parameter set"));
        }
        for p in store.iter() {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: self.step as usize + 1,
                    cause: format!("non-finite gradient in `{}` at element {i}", p.name),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - math::powf(c.beta1, t as f64);
        let bc2 = 1.0 - math::powf(c.beta2, t as f64);
        let b1 = S::from_f64_lossy(c.beta1);
        let b2 = S::from_f64_lossy(c.beta2);
        let one = S::one();
        let eps = S::from_f64_lossy(c.eps);
        let step_size = S::from_f64_lossy(lr / bc1);
        let inv_bc2 = S::from_f64_lossy(1.0 / bc2);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                data[i] -= step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 3000, 1e-4, 1e-6), 1e-4);
        assert!((cosine_lr(3000, 3000, 1e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(1500, 3000, 1e-4, 1e-6) - 5.05e-5).abs() < 1e-15);
        assert_eq!(cosine_lr(5000, 3000, 1e-4, 1e-6), 1e-6);
    }

    #[test]
    fn schedule_is_monotone() {
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1e-3, 1e-5)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn store(values: &[(&str, &[f64])]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.add(n, Tensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[("p", &[1.0])]);
        s.iter_mut().next().unwrap().grad[0] = 3.0;
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.1).unwrap();
        // m_hat = 3, v_hat = 9: update = 0.1 * 3 / (3 + 1e-8)
        let expected = 1.0 - 0.1 * 3.0 / (3.0 + 1e-8);
        assert!((s.by_name("p").unwrap().value.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[("p", &[1.0, -2.0])]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.by_name("p").unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn groups_update_independently() {
        let mut s = store(&[("a", &[1.0]), ("b", &[1.0])]);
        s.iter_mut().next().unwrap().grad[0] = 1.0;
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.1).unwrap();
        assert!(s.by_name("a").unwrap().value.data()[0] < 1.0);
        assert_eq!(s.by_name("b").unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut s = store(&[("a", &[1.0]), ("b", &[1.0])]);
        for p in s.iter_mut() {
            p.grad[0] = 1.0;
        }
        s.iter_mut().nth(1).unwrap().grad[0] = f64::NAN;
        let mut adam = Adam::new(&s, AdamConfig::default());
        let err = adam.step(&mut s, 0.1).unwrap_err();
        assert!(alloc::format!("{err}").contains("`b`"));
        assert_eq!(s.by_name("a").unwrap().value.data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }
}
