//! Adam with bias correction.

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.b1)
            || !ok(self.b2)
            || self.lr.is_nan()
            || self.lr <= 0.0
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::Invalid(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<T>> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One update of every parameter; parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.b1), T::lit(c.b2));
        let bc1 = T::lit(1.0 - c.b1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.b2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let g = grads.get(id);
            let p = store.get_mut(id);
            for i in 0..p.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn one_param(v: f64) -> (ParamStore<f64>, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::vector(vec![v]));
        (s, id)
    }

    fn grads_of(store: &ParamStore<f64>, id: crate::autodiff::ParamId, g: f64) -> Gradients<f64> {
        // d/dp (g·p) = g
        let mut t = Tape::new(store);
        let p = t.param(id);
        let s = t.scale(p, g);
        let l = t.sum(s);
        t.backward(l).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = one_param(0.5);
        let mut adam = AdamState::new(AdamConfig::default(), &s).unwrap();
        let g = grads_of(&s, id, 1.0);
        adam.step(&mut s, &g);
        let delta = s.get(id).data()[0] - 0.5;
        let expect = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((delta - expect).abs() < 1e-15, "{delta} vs {expect}");
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = one_param(0.25);
        let mut adam = AdamState::new(AdamConfig::default(), &s).unwrap();
        let zero = Gradients::zeros_like(&s);
        for _ in 0..5 {
            adam.step(&mut s, &zero);
        }
        assert_eq!(s.get(id).data()[0], 0.25);
    }

    #[test]
    fn two_steps_match_scripted_reference() {
        let (mut s, id) = one_param(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &s).unwrap();
        for _ in 0..2 {
            let g = grads_of(&s, id, 0.3);
            adam.step(&mut s, &g);
        }
        // Reference sequence written out step by step.
        let (lr, b1, b2, eps, g) = (0.001f64, 0.9f64, 0.999f64, 1e-8f64, 0.3f64);
        let m1 = 0.1 * g;
        let v1 = 0.001 * g * g;
        let p1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + 0.1 * g;
        let v2 = b2 * v1 + 0.001 * g * g;
        let p2 = p1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((s.get(id).data()[0] - p2).abs() <= 1e-12);
    }

    #[test]
    fn rejects_bad_betas() {
        let (s, _) = one_param(0.0);
        let cfg = AdamConfig {
            b1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::<f64>::new(cfg, &s).is_err());
    }
}
