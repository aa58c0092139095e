// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{DecodeParams, FinetuneConfig};
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, Hookpoint, LmTrainConfig, ModelConfig, SyntheticCorpus};
use crate::optim::AdamWConfig;
use crate::rng::RngStream;
use crate::sae::SaeConfig;
use crate::saliency::{SaliencyConfig, Selector};

/// One document describing a whole run. Unknown keys are rejected everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_workspace")]
    pub workspace: PathBuf,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub saliency: SaliencySection,
    pub sae: SaeSection,
    pub curation: CurationSection,
    pub prune: PruneSection,
    pub distill: DistillSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

fn default_workspace() -> PathBuf {
    PathBuf::from("workspace")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub generator: SyntheticCorpus,
    pub target_domain: String,
    /// Target-domain samples handed to curation as seeds.
    pub seed_count: usize,
    /// Held-out target-domain samples for evaluation.
    pub eval_count: usize,
    /// Mixed samples used for saliency and SAE training, kept out of the
    /// curation pool.
    pub reference_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: ModelConfig,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lm_lr")]
    pub lr: f32,
}

fn default_batch() -> usize {
    8
}
fn default_lm_lr() -> f32 {
    3e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencySection {
    #[serde(default = "default_selector")]
    pub selector: Selector,
    pub k_act: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    pub hookpoint: Hookpoint,
    /// Also curate with every other selector for the ablation table.
    #[serde(default = "default_true")]
    pub ablation: bool,
}

fn default_selector() -> Selector {
    Selector::Jacobian
}
fn default_probes() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSection {
    pub latent_dim: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default)]
    pub k_aux: Option<usize>,
    #[serde(default = "default_dead")]
    pub dead_threshold: u64,
    #[serde(default = "default_sae_lr")]
    pub lr: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub plain_mse: bool,
}

fn default_lambda() -> f32 {
    1e-3
}
fn default_alpha() -> f32 {
    1.0 / 32.0
}
fn default_dead() -> u64 {
    200
}
fn default_sae_lr() -> f32 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationSection {
    #[serde(rename = "M")]
    pub m: usize,
    /// Independently seeded SAEs whose selections are combined by vote.
    #[serde(default = "default_one")]
    pub ensemble: usize,
}

fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub ratio: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default = "default_prompt")]
    pub prompt_tokens: usize,
    #[serde(default)]
    pub teacher_tokens: Option<usize>,
    #[serde(default)]
    pub distilled_tokens: Option<usize>,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default)]
    pub top1: bool,
    #[serde(default = "default_one")]
    pub samples_per_example: usize,
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
}

fn default_prompt() -> usize {
    8
}
fn default_temperature() -> f32 {
    1.0
}
fn default_cutoff() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f32,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub include_original: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub sweep_ratios: Vec<f32>,
}

/// Seed of a named sub-stream of the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let h = crate::io::sha256_hex(tag.as_bytes());
    let t = u64::from_str_radix(&h[..16], 16).expect("hex digest");
    RngStream::new(seed).fork(t).next_u64()
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        c.generator.validate()?;
        if !c.generator.domains.iter().any(|d| d.name == c.target_domain) {
            return Err(Error::Config(format!("unknown target domain `{}`", c.target_domain)));
        }
        if c.seed_count == 0 || c.eval_count == 0 || c.reference_count < 2 {
            return Err(Error::Config(
                "need seed_count >= 1, eval_count >= 1 and reference_count >= 2".into(),
            ));
        }
        self.model
            .architecture
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if (c.generator.vocab_needed() as usize) > self.model.architecture.vocab_size {
            return Err(Error::Config(format!(
                "generator needs vocabulary {}, model has {}",
                c.generator.vocab_needed(),
                self.model.architecture.vocab_size
            )));
        }
        if c.generator.max_len > self.model.architecture.max_seq_len {
            return Err(Error::Config("max_len exceeds the model context".into()));
        }
        let s = &self.saliency;
        if s.hookpoint.layer >= self.model.architecture.n_layers {
            return Err(Error::Config(format!("hookpoint {} beyond the last layer", s.hookpoint)));
        }
        if s.k_act == 0 || s.k_act > self.model.architecture.d_model || s.probes == 0 {
            return Err(Error::Config("need 1 <= k_act <= d_model and probes >= 1".into()));
        }
        self.sae_config(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.curation.m == 0 || self.curation.ensemble == 0 {
            return Err(Error::Config("M and ensemble must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.prune.ratio) {
            return Err(Error::Config(format!("pruning ratio {} outside [0, 1)", self.prune.ratio)));
        }
        if self.eval.sweep_ratios.iter().any(|r| !(0.0..1.0).contains(r))
            || self.eval.sweep_ratios.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("sweep ratios must be ascending and in [0, 1)".into()));
        }
        if self.distill.samples_per_example == 0 || self.distill.prompt_tokens == 0 {
            return Err(Error::Config("distill needs prompt_tokens and samples_per_example >= 1".into()));
        }
        if self.finetune.batch_size == 0 || self.model.batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lm_config(&self) -> LmTrainConfig {
        LmTrainConfig {
            steps: self.model.steps,
            batch_size: self.model.batch_size,
            optimizer: AdamWConfig::new(self.model.lr),
            seed: derive_seed(self.seed, "train-lm"),
        }
    }

    pub fn saliency_config(&self, selector: Selector) -> SaliencyConfig {
        SaliencyConfig {
            k_act: self.saliency.k_act,
            probes: self.saliency.probes,
            hookpoint: self.saliency.hookpoint,
            reference_corpus: "reference".into(),
            seed: derive_seed(self.seed, &format!("topk/{}", selector.name())),
            selector,
        }
    }

    /// Config of ensemble member `member`.
    pub fn sae_config(&self, member: usize) -> SaeConfig {
        let s = &self.sae;
        SaeConfig {
            input_dim: self.saliency.k_act,
            latent_dim: s.latent_dim,
            lambda: s.lambda,
            alpha: s.alpha,
            k_aux: s.k_aux,
            dead_threshold: s.dead_threshold,
            lr: s.lr,
            batch_size: s.batch_size,
            steps: s.steps,
            plain_mse: s.plain_mse,
            seed: derive_seed(self.seed, &format!("train-sae/{member}")),
        }
    }

    pub fn decode_params(&self) -> DecodeParams {
        let d = &self.distill;
        DecodeParams {
            prompt_tokens: d.prompt_tokens,
            teacher_tokens: d.teacher_tokens,
            distilled_tokens: d.distilled_tokens,
            temperature: d.temperature,
            top1: d.top1,
            samples_per_example: d.samples_per_example,
            cutoff: d.cutoff,
            seed: derive_seed(self.seed, "distill"),
            teacher_id: "train-lm/model".into(),
        }
    }

    /// Fine-tuning config for one condition; every condition shares the
    /// optimizer settings and batch order seed.
    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            steps: f.steps,
            batch_size: f.batch_size,
            optimizer: AdamWConfig::new(f.lr),
            adapter: f.adapter.clone(),
            include_original: f.include_original,
            seed: derive_seed(self.seed, "finetune"),
        }
    }

    /// Same config under a different run seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}
