//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::tensor::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// Applies one update in place. Nothing is modified when any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads.iter() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
            let p = params.get(name)?;
            g.expect_shape(p.shape(), "adam_step gradient")?;
            self.first_moment.get(name)?.expect_shape(p.shape(), "adam_step moment")?;
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let m = self.first_moment.get_mut(name)?.data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.second_moment.get_mut(name)?.data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let m = self.first_moment.get(name)?.data();
            let v = self.second_moment.get(name)?.data();
            let p = params.get_mut(name)?.data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.step(&mut p, &scalar(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
        assert_eq!(s.step, 1);
    }

    /// Scalar Adam written out directly, independent of the ParamSet path.
    fn scalar_adam_trajectory(w0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            w -= lr * mhat / (vhat.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn quadratic_follows_recursion() {
        let mut p = scalar(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg, &p);
        let oracle = scalar_adam_trajectory(1.0, 0.1, 50);
        let mut traj = Vec::new();
        for _ in 0..50 {
            let w = p.get("w").unwrap().data()[0];
            s.step(&mut p, &scalar(2.0 * w)).unwrap();
            traj.push(p.get("w").unwrap().data()[0]);
        }
        for (a, b) in traj.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // |w| shrinks monotonically until the first overshoot at step 12.
        let mut prev = 1.0f64;
        for w in &traj[..11] {
            assert!(w.abs() < prev);
            prev = w.abs();
        }
        assert!(traj[11] < 0.0);
        assert!(traj[49].abs() < 0.1);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = scalar(0.3);
            let mut s = AdamState::new(AdamConfig::default(), &p);
            for i in 0..10 {
                s.step(&mut p, &scalar((i as f64).sin())).unwrap();
            }
            p.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar(0.3);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        match s.step(&mut p, &scalar(f64::INFINITY)) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.step, 0);
        assert_eq!(p.get("w").unwrap().data()[0], 0.3);
    }
}
