// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-rank adapters: effective weight = base + scaling * A B.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layer_key, ModelState};
use crate::error::{Error, Result};
use crate::io;
use crate::optim::ParamSet;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_scaling")]
    pub scaling: f32,
    /// Per-layer weight names, e.g. `attn.wq`.
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
}

fn default_rank() -> usize {
    32
}
fn default_scaling() -> f32 {
    1.0
}
fn default_targets() -> Vec<String> {
    ["attn.wq", "attn.wk", "attn.wv", "attn.wo"]
        .map(String::from)
        .to_vec()
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            scaling: default_scaling(),
            targets: default_targets(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct AdapterManifest {
    config: AdapterConfig,
    factors: Vec<String>,
}

impl AdapterSet {
    pub fn a_key(weight: &str) -> String {
        format!("{weight}.lora_a")
    }

    pub fn b_key(weight: &str) -> String {
        format!("{weight}.lora_b")
    }

    /// `A` is random, `B` is zero, so the adapted model starts out identical
    /// to the base model.
    pub fn new(model: &ModelState, config: AdapterConfig, rng: &mut RngStream) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        let mut params = ParamSet::new();
        for l in 0..model.config.n_layers {
            for t in &config.targets {
                let name = layer_key(l, t);
                let w = model
                    .params
                    .get(&name)
                    .ok_or_else(|| Error::Config(format!("adapter target `{name}` not found")))?;
                if w.ndim() != 2 {
                    return Err(Error::Config(format!("adapter target `{name}` is not a matrix")));
                }
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                if config.rank > rows.min(cols) {
                    return Err(Error::Config(format!(
                        "adapter rank {} exceeds min dimension of `{name}` {:?}",
                        config.rank,
                        w.shape()
                    )));
                }
                params.insert(
                    Self::a_key(&name),
                    rng.normal(&[rows, config.rank], 1.0 / (rows as f32).sqrt()),
                );
                params.insert(Self::b_key(&name), Tensor::zeros(&[config.rank, cols]));
            }
        }
        Ok(Self { config, params })
    }

    pub fn factors(&self, weight: &str) -> Option<(&Tensor, &Tensor)> {
        Some((
            self.params.get(&Self::a_key(weight))?,
            self.params.get(&Self::b_key(weight))?,
        ))
    }

    /// Fold the adapters into a copy of `model`.
    pub fn merged_into(&self, model: &ModelState) -> Result<ModelState> {
        let mut out = model.clone();
        for (name, w) in out.params.iter_mut() {
            if let Some((a, b)) = self.factors(name) {
                let delta = a.matmul(b)?.scale(self.config.scaling);
                w.axpy(1.0, &delta)?;
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, t) in &self.params {
            io::write_fstn(&dir.join(format!("{name}.fstn")), t)?;
        }
        io::write_json(
            &dir.join("adapter.json"),
            &AdapterManifest {
                config: self.config.clone(),
                factors: self.params.keys().cloned().collect(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: AdapterManifest = io::read_json(&dir.join("adapter.json"))?;
        let mut params = ParamSet::new();
        for name in m.factors {
            let t = io::read_fstn(&dir.join(format!("{name}.fstn")))?;
            params.insert(name, t);
        }
        Ok(Self {
            config: m.config,
            params,
        })
    }
}
