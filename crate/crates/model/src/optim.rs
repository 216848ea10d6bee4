//! Adam with bias correction and persistable moment estimates.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    config: AdamConfig,
    params: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &params {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { config, params, m, v, t: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// One update for every managed parameter that has a gradient.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, eps } = self.config;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var) else { continue };
            let m = self.m[name].affine(b1, 0.0)?.add(&g.affine(1.0 - b1, 0.0)?)?;
            let v = self.v[name].affine(b2, 0.0)?.add(&g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            if lr != 0.0 {
                let m_hat = m.affine(1.0 / c1, 0.0)?;
                let v_hat = v.affine(1.0 / c2, 0.0)?;
                let update = m_hat.div(&(v_hat.sqrt()? + eps)?)?.affine(lr, 0.0)?;
                var.set(&var.as_tensor().sub(&update)?)?;
            }
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `m:{name}` and `v:{name}`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.m.len() * 2);
        for (name, t) in &self.m {
            out.push((format!("m:{name}"), t.clone()));
        }
        for (name, t) in &self.v {
            out.push((format!("v:{name}"), t.clone()));
        }
        out
    }

    /// Restores moments and the step counter saved by [`Adam::state_tensors`].
    pub fn load_state(&mut self, t: u64, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (name, var) in &self.params {
            for (prefix, map) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("{prefix}:{name}");
                let tensor = lookup(&key)
                    .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks optimizer state `{key}`")))?;
                if tensor.dims() != var.dims() {
                    return Err(Error::ConfigMismatch(format!("optimizer state `{key}` has the wrong shape")));
                }
                map.insert(name.clone(), tensor.to_dtype(var.dtype())?);
            }
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let x = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig { learning_rate: 0.1, ..Default::default() })
            .unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v: Vec<f64> = x.to_vec1().unwrap();
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let x = Var::new(&[3.0f64], &Device::Cpu).unwrap();
        let cfg = AdamConfig { learning_rate: 0.05, beta1: 0.9, ..Default::default() };
        let mut opt = Adam::new(vec![("x".into(), x.clone())], cfg).unwrap();
        for _ in 0..500 {
            let loss = (x.as_tensor() - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        assert!((x.to_vec1::<f64>().unwrap()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let x = Var::new(&[0.3f32, 0.7], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig { learning_rate: 0.0, ..Default::default() })
            .unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert_eq!(x.to_vec1::<f32>().unwrap(), vec![0.3, 0.7]);
        assert_eq!(opt.steps_taken(), 1);
    }
}
