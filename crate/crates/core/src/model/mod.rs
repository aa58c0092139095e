// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal pre-norm decoder-only transformer with named hookpoints.
//!
//! Parameters live in a flat [`ParamSet`] keyed by dotted names
//! (`layers.{i}.attn.wq`, `layers.{i}.mlp.w1`, ...). Heads and feed-forward
//! channels can be removed per layer, so layer widths are read back from the
//! parameter shapes rather than from [`ModelConfig`].

mod adapter;
mod corpus;
mod dump;
mod forward;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::io;
use crate::optim::ParamSet;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use adapter::{AdapterConfig, AdapterSet};
pub use corpus::{Corpus, Sample, SyntheticCorpus, SyntheticDomain, BOS, SEP};
pub use dump::ActivationDump;
pub use forward::{BuildOptions, EmbedMode, LayerHooks, Trace, Trainable};
pub use train::{next_token_targets, sequence_loss, train_lm, LmTrainConfig, TokenExample};
pub(crate) use train::{batch_gradients, example_loss};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
        ];
        if fields.iter().any(|&f| f == 0) {
            return Err(Error::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    PostAttention,
    PostMlp,
    ResidualOut,
}

impl Site {
    fn as_str(self) -> &'static str {
        match self {
            Site::PostAttention => "post_attn",
            Site::PostMlp => "post_mlp",
            Site::ResidualOut => "resid_out",
        }
    }
}

/// Location inside a layer where activations are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Hookpoint {
    pub layer: usize,
    pub site: Site,
}

impl Hookpoint {
    pub fn new(layer: usize, site: Site) -> Self {
        Self { layer, site }
    }

    /// Residual stream after layer `layer`.
    pub fn residual(layer: usize) -> Self {
        Self::new(layer, Site::ResidualOut)
    }
}

impl fmt::Display for Hookpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.layer, self.site.as_str())
    }
}

impl FromStr for Hookpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("cannot parse hookpoint `{s}`"));
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (layer, site) = rest.split_once('.').ok_or_else(bad)?;
        let layer = layer.parse().map_err(|_| bad())?;
        let site = match site {
            "post_attn" => Site::PostAttention,
            "post_mlp" => Site::PostMlp,
            "resid_out" => Site::ResidualOut,
            _ => return Err(bad()),
        };
        Ok(Self { layer, site })
    }
}

impl Serialize for Hookpoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Hookpoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Mean-pooled activation of one sample at one hookpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub sample_id: String,
    pub hookpoint: Hookpoint,
    pub pooled: Tensor,
}

/// Surviving width of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub heads: usize,
    pub ff: usize,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub frozen: bool,
}

pub(crate) fn layer_key(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    frozen: bool,
    layers: Vec<LayerShape>,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

impl ModelState {
    /// Fresh random weights.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ff;
        let resid_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let inv_sqrt = |n: usize| 1.0 / (n as f32).sqrt();
        let mut p = ParamSet::new();
        p.insert("tok_emb".into(), rng.normal(&[config.vocab_size, d], 0.5));
        p.insert("pos_emb".into(), rng.normal(&[config.max_seq_len, d], 0.1));
        for l in 0..config.n_layers {
            p.insert(layer_key(l, "ln1.gain"), Tensor::ones(&[d]));
            p.insert(layer_key(l, "ln1.bias"), Tensor::zeros(&[d]));
            for w in ["attn.wq", "attn.wk", "attn.wv"] {
                p.insert(layer_key(l, w), rng.normal(&[d, d], inv_sqrt(d)));
            }
            p.insert(layer_key(l, "attn.wo"), rng.normal(&[d, d], inv_sqrt(d) * resid_scale));
            p.insert(layer_key(l, "attn.bo"), Tensor::zeros(&[d]));
            p.insert(layer_key(l, "ln2.gain"), Tensor::ones(&[d]));
            p.insert(layer_key(l, "ln2.bias"), Tensor::zeros(&[d]));
            p.insert(layer_key(l, "mlp.w1"), rng.normal(&[d, f], inv_sqrt(d)));
            p.insert(layer_key(l, "mlp.b1"), Tensor::zeros(&[f]));
            p.insert(layer_key(l, "mlp.w2"), rng.normal(&[f, d], inv_sqrt(f) * resid_scale));
            p.insert(layer_key(l, "mlp.b2"), Tensor::zeros(&[d]));
        }
        p.insert("ln_f.gain".into(), Tensor::ones(&[d]));
        p.insert("ln_f.bias".into(), Tensor::zeros(&[d]));
        p.insert("lm_head".into(), rng.normal(&[d, config.vocab_size], inv_sqrt(d)));
        let m = Self {
            config,
            params: p,
            frozen: false,
        };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let dh = self.config.d_head();
        (0..self.config.n_layers)
            .map(|l| LayerShape {
                heads: self.params[&layer_key(l, "attn.wq")].cols() / dh,
                ff: self.params[&layer_key(l, "mlp.w1")].cols(),
            })
            .collect()
    }

    /// Verify every parameter shape against the config and per-layer widths.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, v, dh) = (c.d_model, c.vocab_size, c.d_head());
        let mut expect: Vec<(String, Vec<usize>)> = vec![
            ("tok_emb".into(), vec![v, d]),
            ("pos_emb".into(), vec![c.max_seq_len, d]),
            ("ln_f.gain".into(), vec![d]),
            ("ln_f.bias".into(), vec![d]),
            ("lm_head".into(), vec![d, v]),
        ];
        for l in 0..c.n_layers {
            let wq = self.param(&layer_key(l, "attn.wq"))?;
            let w1 = self.param(&layer_key(l, "mlp.w1"))?;
            if wq.cols() % dh != 0 {
                return Err(Error::State(format!("layer {l}: wq width not a multiple of d_head")));
            }
            let (hw, f) = (wq.cols(), w1.cols());
            expect.extend([
                (layer_key(l, "ln1.gain"), vec![d]),
                (layer_key(l, "ln1.bias"), vec![d]),
                (layer_key(l, "attn.wq"), vec![d, hw]),
                (layer_key(l, "attn.wk"), vec![d, hw]),
                (layer_key(l, "attn.wv"), vec![d, hw]),
                (layer_key(l, "attn.wo"), vec![hw, d]),
                (layer_key(l, "attn.bo"), vec![d]),
                (layer_key(l, "ln2.gain"), vec![d]),
                (layer_key(l, "ln2.bias"), vec![d]),
                (layer_key(l, "mlp.w1"), vec![d, f]),
                (layer_key(l, "mlp.b1"), vec![f]),
                (layer_key(l, "mlp.w2"), vec![f, d]),
                (layer_key(l, "mlp.b2"), vec![d]),
            ]);
        }
        if expect.len() != self.params.len() {
            return Err(Error::State(format!(
                "expected {} parameters, found {}",
                expect.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expect {
            let p = self.param(&name)?;
            if p.shape() != shape.as_slice() {
                return Err(Error::State(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// SHA-256 over parameter names, shapes and bytes.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in &self.params {
            bytes.extend_from_slice(name.as_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        io::sha256_hex(&bytes)
    }

    pub fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocab of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn validate_hookpoint(&self, hook: Hookpoint) -> Result<()> {
        if hook.layer >= self.config.n_layers {
            return Err(Error::Input(format!(
                "hookpoint layer {} outside 0..{}",
                hook.layer, self.config.n_layers
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for (name, t) in &self.params {
            let file = format!("params/{name}.fstn");
            io::write_fstn(&dir.join(&file), t)?;
            entries.push(CheckpointEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            frozen: self.frozen,
            layers: self.layer_shapes(),
            params: entries,
        };
        io::write_json(&dir.join("model.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = io::read_json(&dir.join("model.json"))?;
        let mut params = ParamSet::new();
        for e in manifest.params {
            let t = io::read_fstn(&dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("checkpoint entry `{}` shape mismatch", e.name)));
            }
            params.insert(e.name, t);
        }
        let m = Self {
            config: manifest.config,
            params,
            frozen: manifest.frozen,
        };
        m.check_shapes()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hookpoint_string_round_trip() {
        for site in [Site::PostAttention, Site::PostMlp, Site::ResidualOut] {
            let h = Hookpoint::new(3, site);
            assert_eq!(h.to_string().parse::<Hookpoint>().unwrap(), h);
        }
        assert!("blocks.x.post_mlp".parse::<Hookpoint>().is_err());
        assert!("layer.1.post_mlp".parse::<Hookpoint>().is_err());
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let c = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_shapes_are_consistent() {
        let m = ModelState::init(ModelConfig::default(), &mut RngStream::new(0)).unwrap();
        m.check_shapes().unwrap();
        assert_eq!(
            m.layer_shapes(),
            vec![LayerShape { heads: 4, ff: 256 }; 4]
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 8,
        };
        let m = ModelState::init(cfg, &mut RngStream::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = ModelState::load(dir.path()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
    }
}
