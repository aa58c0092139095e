// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adaptive-moment optimizer with decoupled weight decay (AdamW).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter collection. Ordered so iteration is deterministic.
pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f32) -> Self {
        self.weight_decay = wd;
        self
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    first: ParamSet,
    second: ParamSet,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) || config.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "optimizer needs lr > 0 and weight_decay >= 0, got {config:?}"
            )));
        }
        Ok(Self {
            config,
            step: 0,
            first: ParamSet::new(),
            second: ParamSet::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    /// One update. Parameters without an entry in `grads` are left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Input(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient `{name}` {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            g.ensure_finite(&format!("gradient `{name}`"))?;
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = c.beta1 * md[k] + (1.0 - c.beta1) * gk;
                vd[k] = c.beta2 * vd[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] -= c.lr * c.weight_decay * pd[k];
                pd[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            p.ensure_finite(&format!("parameter `{name}` after update"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: Vec<f32>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name.into(), Tensor::from_vec(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = single("w", vec![1.0, -2.0]);
        let grads = single("w", vec![0.0, 0.0]);
        let mut opt = OptimizerState::new(AdamWConfig::new(0.1)).unwrap();
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn descends_on_square() {
        let mut params = single("w", vec![1.0]);
        let mut opt = OptimizerState::new(AdamWConfig::new(0.1)).unwrap();
        let w = params["w"].data()[0];
        let grads = single("w", vec![2.0 * w]);
        opt.step(&mut params, &grads).unwrap();
        assert!(params["w"].data()[0] < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = sum_i c_i (w_i - t_i)^2, optimum 0 at w = t
        let target = [0.5f32, -1.5, 2.0];
        let curv = [1.0f32, 3.0, 0.5];
        let mut params = single("w", vec![0.0; 3]);
        let mut opt = OptimizerState::new(AdamWConfig::new(0.05)).unwrap();
        let loss = |w: &[f32]| -> f32 {
            (0..3).map(|i| curv[i] * (w[i] - target[i]).powi(2)).sum()
        };
        for _ in 0..200 {
            let w = params["w"].data().to_vec();
            let g = (0..3).map(|i| 2.0 * curv[i] * (w[i] - target[i])).collect();
            opt.step(&mut params, &single("w", g)).unwrap();
        }
        assert!(loss(params["w"].data()) < 1e-4, "loss {}", loss(params["w"].data()));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut params = single("w", vec![1.0]);
        let mut grads = single("w", vec![0.0]);
        grads.get_mut("w").unwrap().data_mut()[0] = f32::INFINITY;
        let mut opt = OptimizerState::new(AdamWConfig::new(0.1)).unwrap();
        assert!(matches!(opt.step(&mut params, &grads), Err(Error::Numeric(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut params = single("w", vec![2.0]);
        let grads = single("w", vec![0.0]);
        let mut opt = OptimizerState::new(AdamWConfig::new(0.1).with_weight_decay(0.5)).unwrap();
        opt.step(&mut params, &grads).unwrap();
        assert!((params["w"].data()[0] - 1.9).abs() < 1e-6);
    }
}
