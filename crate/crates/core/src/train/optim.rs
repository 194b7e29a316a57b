use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGrads, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam moments and per-parameter step counts. Moments are kept in f64.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: ParamStore<f64>,
    pub v: ParamStore<f64>,
    pub steps: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            ..Default::default()
        }
    }

    /// Updates every parameter selected by `update`. A parameter without an
    /// entry in `grads` is treated as having a zero gradient.
    pub fn step<T: Element>(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, update: impl Fn(&str) -> bool) -> Result<()> {
        let c = self.config;
        let names: Vec<String> = params.names().filter(|n| update(n)).cloned().collect();
        for name in names {
            let p = params.get_mut(&name)?;
            if let Some(g) = grads.get(&name) {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adamw", p.shape(), g.shape()));
                }
            }
            if !self.m.contains(&name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - c.beta1.powi(*t as i32);
            let bc2 = 1.0 - c.beta2.powi(*t as i32);
            let m = self.m.get_mut(&name)?.data_mut();
            let v = self.v.get_mut(&name)?.data_mut();
            let gdata = grads.get(&name).map(Tensor::data);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = gdata.map_or(0.0, |g| g[i].as_f64());
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let x = w.as_f64();
                *w = T::from_f64(x - c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * x));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64, cfg: AdamWConfig) -> f64 {
        let mut params = ParamStore::<f64>::new();
        params.insert("p", Tensor::full(&[1], p));
        let mut grads = ParamGrads::default();
        grads.map.insert("p".into(), Tensor::full(&[1], g));
        let mut opt = AdamW::new(cfg);
        opt.step(&mut params, &grads, |_| true).unwrap();
        params.get("p").unwrap().data()[0]
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        assert!((single(1.0, 0.5, cfg) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_and_zero_grad_leave_params() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert_eq!(single(1.5, 0.7, cfg), 1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(single(1.5, 0.0, cfg), 1.5);
    }

    #[test]
    fn unselected_params_untouched() {
        let mut params = ParamStore::<f32>::new();
        params.insert("a", Tensor::full(&[2], 1.0));
        params.insert("b", Tensor::full(&[2], 1.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut params, &ParamGrads::default(), |n| n == "a").unwrap();
        assert!(params.get("a").unwrap().data()[0] < 1.0);
        assert_eq!(params.get("b").unwrap().data(), &[1.0, 1.0]);
        assert!(!opt.m.contains("b"));
    }
}
