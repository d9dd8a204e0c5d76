//! Adam with a linearly decaying learning rate. The moment estimates are
//! plain tensors so they can be written to and restored from checkpoints.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate falling linearly from `start` at the first step to `end`
/// at step `total_steps - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecay {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl LinearDecay {
    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.start;
        }
        let t = (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64;
        self.start + (self.end - self.start) * t
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, ps: &ParamStore) -> Result<Self> {
        let zeros = || {
            ps.params()
                .iter()
                .map(|(_, p)| p.zeros_like())
                .collect::<candle_core::Result<Vec<_>>>()
        };
        Ok(Self {
            cfg,
            step: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `ps`. Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, var)) in ps.params().iter().enumerate() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.zeros_like()?,
            };
            let m = (self.m[i].affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            let v = (self.v[i].affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, eps)?;
            let update = (m.affine(lr / bc1, 0.0)? / denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `m/<param>` and `v/<param>`.
    pub fn state(&self, ps: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (name, _)) in ps.params().iter().enumerate() {
            out.push((format!("m/{name}"), self.m[i].clone()));
            out.push((format!("v/{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn restore(cfg: AdamConfig, ps: &ParamStore, step: u64, state: &HashMap<String, Tensor>) -> Result<Self> {
        let mut adam = Self::new(cfg, ps)?;
        adam.step = step;
        for (i, (name, var)) in ps.params().iter().enumerate() {
            for (prefix, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("{prefix}/{name}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::config(format!("optimizer state lacks {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::shape(format!("{key}: expected {:?}, found {:?}", var.dims(), t.dims())));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;

    #[test]
    fn schedule_endpoints() {
        let s = LinearDecay {
            start: 0.01,
            end: 0.0001,
            total_steps: 100,
        };
        assert_eq!(s.at(0), 0.01);
        assert!((s.at(99) - 0.0001).abs() < 1e-15);
        assert!(s.at(50) < s.at(49));
        assert_eq!(s.at(500), s.at(99));
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        // With bias correction, the first update is lr * g / (|g| + eps).
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = ps.normal("p", &[3], 1.0, &mut rng).unwrap();
        let before = p.to_vec1::<f64>().unwrap();
        let coeffs = Tensor::new(&[2.0f64, -3.0, 0.5], p.device()).unwrap();
        let loss = (&p * &coeffs).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &ps).unwrap();
        adam.step(&ps, &grads, 0.1).unwrap();
        let after = ps.get("p").unwrap().to_vec1::<f64>().unwrap();
        for ((b, a), c) in before.iter().zip(&after).zip([2.0, -3.0, 0.5]) {
            assert!((b - a - 0.1 * f64::signum(c)).abs() < 1e-6);
        }
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        ps.normal("p", &[4], 3.0, &mut rng).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &ps).unwrap();
        for _ in 0..500 {
            let p = ps.get("p").unwrap().as_tensor().clone();
            let grads = p.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            adam.step(&ps, &grads, 0.05).unwrap();
        }
        let p = ps.get("p").unwrap().to_vec1::<f64>().unwrap();
        assert!(p.iter().all(|v| v.abs() < 0.05), "{p:?}");
    }
}
