// SPDX-License-Identifier: MIT OR Apache-2.0

//! Teacher-guided distillation and fine-tuning of (pruned) students.
//!
//! Each curated sample is split into a context `c` and its original
//! continuation `x`. The teacher greedily completes `c` into `y`, then samples
//! `y'` conditioned on `c SEP x SEP y SEP`. The student is trained to produce
//! `y'` after `c SEP y SEP`, with the loss on the `y'` tokens only. After the
//! dataset is written the teacher plays no further part.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{
    batch_gradients, example_loss, next_token_targets, AdapterConfig, AdapterSet, ModelState,
    Sample, TokenExample, Trainable, SEP,
};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    /// Tokens of each sample used as the context `c`.
    #[serde(default = "default_prompt")]
    pub prompt_tokens: usize,
    /// Length of the teacher output `y`; defaults to the continuation length.
    #[serde(default)]
    pub teacher_tokens: Option<usize>,
    /// Length of each distilled target `y'`; defaults to the continuation
    /// length.
    #[serde(default)]
    pub distilled_tokens: Option<usize>,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    /// Decode `y` and `y'` greedily instead of sampling.
    #[serde(default)]
    pub top1: bool,
    /// Distilled targets drawn per curated sample.
    #[serde(default = "default_per_sample")]
    pub samples_per_example: usize,
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_teacher_id")]
    pub teacher_id: String,
}

fn default_prompt() -> usize {
    8
}
fn default_temperature() -> f32 {
    1.0
}
fn default_per_sample() -> usize {
    1
}
fn default_cutoff() -> usize {
    256
}
fn default_teacher_id() -> String {
    "teacher".into()
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            prompt_tokens: default_prompt(),
            teacher_tokens: None,
            distilled_tokens: None,
            temperature: default_temperature(),
            top1: false,
            samples_per_example: default_per_sample(),
            cutoff: default_cutoff(),
            seed: 0,
            teacher_id: default_teacher_id(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistilledExample {
    pub context: Vec<u32>,
    pub teacher_output: Vec<u32>,
    pub distilled: Vec<u32>,
    pub teacher_id: String,
    /// The sample's own continuation `x`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub original: Vec<u32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl DistilledExample {
    /// Student input `c SEP [x SEP] y SEP y'` with targets on the `y'` tokens.
    pub fn to_training(&self, include_original: bool) -> Result<TokenExample> {
        if self.distilled.is_empty() {
            return Err(Error::Input("distilled target is empty".into()));
        }
        let mut tokens = self.context.clone();
        tokens.push(SEP);
        if include_original {
            tokens.extend(&self.original);
            tokens.push(SEP);
        }
        tokens.extend(&self.teacher_output);
        tokens.push(SEP);
        let start = tokens.len();
        tokens.extend(&self.distilled);
        let targets = (0..tokens.len())
            .map(|i| (i + 1 >= start && i + 1 < tokens.len()).then(|| tokens[i + 1] as usize))
            .collect();
        Ok(TokenExample { tokens, targets })
    }
}

pub fn save_distilled(path: &Path, set: &[DistilledExample]) -> Result<()> {
    io::write_jsonl(path, set)
}

pub fn load_distilled(path: &Path) -> Result<Vec<DistilledExample>> {
    io::read_jsonl(path)
}

fn sample_row(logits: &[f32], temperature: f32, greedy: bool, rng: &mut RngStream) -> u32 {
    if greedy || temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let w: Vec<f32> = logits.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    rng.categorical(&w) as u32
}

/// Extend `prompt` by `n` tokens. Stops early at the model's context limit;
/// the flag reports whether it did.
pub fn generate(
    model: &ModelState,
    prompt: &[u32],
    n: usize,
    temperature: f32,
    greedy: bool,
    rng: &mut RngStream,
) -> Result<(Vec<u32>, bool)> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if seq.len() >= model.config.max_seq_len {
            return Ok((out, true));
        }
        let logits = model.forward(&seq)?;
        let t = sample_row(logits.row(seq.len() - 1), temperature, greedy, rng);
        seq.push(t);
        out.push(t);
    }
    Ok((out, false))
}

/// Keep the last `limit` tokens.
fn clip_left(mut v: Vec<u32>, limit: usize) -> (Vec<u32>, bool) {
    if v.len() <= limit {
        return (v, false);
    }
    let cut = v.len() - limit;
    v.drain(..cut);
    (v, true)
}

/// Build `samples_per_example` distilled records per curated sample, in
/// order. Sample `i` decodes `y` and then every `y'` from RNG stream `i`;
/// both use the same temperature / top-1 setting.
pub fn build_distilled_set(
    teacher: &ModelState,
    curated: &[&Sample],
    params: &DecodeParams,
) -> Result<Vec<DistilledExample>> {
    if params.samples_per_example == 0 {
        return Err(Error::Config("samples_per_example must be >= 1".into()));
    }
    let limit = params.cutoff.min(teacher.config.max_seq_len);
    let base = RngStream::new(params.seed);
    let mut out = Vec::new();
    for (i, s) in curated.iter().enumerate() {
        if s.tokens.len() <= params.prompt_tokens {
            return Err(Error::Input(format!(
                "sample `{}` has {} tokens, prompt needs more than {}",
                s.id,
                s.tokens.len(),
                params.prompt_tokens
            )));
        }
        let context = s.tokens[..params.prompt_tokens].to_vec();
        let original = s.tokens[params.prompt_tokens..].to_vec();
        // the student row `c SEP y SEP y'` must fit the cutoff
        let free = limit.saturating_sub(context.len() + 2);
        if free < 2 {
            return Err(Error::Input(format!("cutoff {limit} leaves no room after the prompt")));
        }
        let y_want = params.teacher_tokens.unwrap_or(original.len());
        let y_len = y_want.min(free - 1).max(1);
        let d_want = params.distilled_tokens.unwrap_or(original.len());
        let d_len = d_want.min(free - y_len).max(1);
        let t0 = y_len < y_want || d_len < d_want;
        let mut rng = base.fork(i as u64);
        let (teacher_output, t1) = generate(teacher, &context, y_len, params.temperature, params.top1, &mut rng)?;
        for _ in 0..params.samples_per_example {
            let mut prompt = context.clone();
            prompt.push(SEP);
            prompt.extend(&original);
            prompt.push(SEP);
            prompt.extend(&teacher_output);
            prompt.push(SEP);
            // leave room for the sampled continuation
            let (prompt, t2) = clip_left(prompt, limit.saturating_sub(d_len).max(1));
            let (mut distilled, t3) = generate(teacher, &prompt, d_len, params.temperature, params.top1, &mut rng)?;
            // student sees c SEP y SEP y'
            let student_prefix = context.len() + teacher_output.len() + 2;
            let t4 = student_prefix + distilled.len() > limit;
            distilled.truncate(limit.saturating_sub(student_prefix));
            out.push(DistilledExample {
                context: context.clone(),
                teacher_output: teacher_output.clone(),
                distilled,
                teacher_id: params.teacher_id.clone(),
                original: original.clone(),
                truncated: t0 || t1 || t2 || t3 || t4,
            });
        }
    }
    Ok(out)
}

/// `-log f(y' | c, y)`, averaged over the `y'` tokens.
pub fn tgd_loss(student: &ModelState, example: &DistilledExample, adapters: Option<&AdapterSet>) -> Result<f32> {
    example_loss(student, &example.to_training(false)?, adapters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optim")]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    /// Put the original continuation in the student's conditioning.
    #[serde(default)]
    pub include_original: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    8
}
fn default_optim() -> AdamWConfig {
    AdamWConfig::new(5e-5)
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: default_batch(),
            optimizer: default_optim(),
            adapter: None,
            include_original: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Finetuned {
    pub model: ModelState,
    pub adapters: Option<AdapterSet>,
    pub trace: Vec<f32>,
}

impl Finetuned {
    /// Base weights with any adapters folded in.
    pub fn merged(&self) -> Result<ModelState> {
        match &self.adapters {
            Some(a) => a.merged_into(&self.model),
            None => Ok(self.model.clone()),
        }
    }
}

/// Fine-tune on prepared examples. With an adapter config only the adapter
/// factors move; otherwise every student weight trains.
pub fn finetune(student: &ModelState, examples: &[TokenExample], cfg: &FinetuneConfig) -> Result<Finetuned> {
    if examples.is_empty() {
        return Err(Error::Input("fine-tuning needs a non-empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let base = RngStream::new(cfg.seed);
    let mut model = student.clone();
    let mut adapters = match &cfg.adapter {
        Some(a) => Some(AdapterSet::new(student, a.clone(), &mut base.fork(0))?),
        None => None,
    };
    let mut opt = OptimizerState::new(cfg.optimizer.clone())?;
    let mut rng = base.fork(1);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<&TokenExample> = (0..cfg.batch_size)
            .map(|_| &examples[rng.below(examples.len())])
            .collect();
        let loss = match adapters.as_mut() {
            Some(a) => {
                let (loss, grads) = batch_gradients(&model, Some(a), Trainable::AdaptersOnly, &batch)?;
                opt.step(&mut a.params, &grads)?;
                loss
            }
            None => {
                let (loss, grads) = batch_gradients(&model, None, Trainable::All, &batch)?;
                opt.step(&mut model.params, &grads)?;
                loss
            }
        };
        trace.push(loss);
    }
    Ok(Finetuned {
        model,
        adapters,
        trace,
    })
}

/// Plain next-token examples from corpus samples.
pub fn lm_examples(samples: &[&Sample]) -> Vec<TokenExample> {
    samples
        .iter()
        .filter(|s| s.tokens.len() >= 2)
        .map(|s| TokenExample::next_token(&s.tokens))
        .collect()
}

/// TGD examples from distilled records.
pub fn tgd_examples(set: &[DistilledExample], include_original: bool) -> Result<Vec<TokenExample>> {
    set.iter().map(|d| d.to_training(include_original)).collect()
}

/// Token-weighted mean next-token cross-entropy over `eval`.
pub fn evaluate_domain_loss(model: &ModelState, eval: &[&Sample], adapters: Option<&AdapterSet>) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for s in eval {
        if s.tokens.len() < 2 {
            continue;
        }
        let ex = TokenExample::next_token(&s.tokens);
        let n = s.tokens.len() - 1;
        total += example_loss(model, &ex, adapters)? as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("evaluation set has no sequence of length >= 2".into()));
    }
    Ok((total / count as f64) as f32)
}

/// Per-token log-probabilities of `tokens[1..]`, for inspection.
pub fn token_log_probs(model: &ModelState, tokens: &[u32]) -> Result<Vec<f32>> {
    let logits: Tensor = model.forward(tokens)?;
    Ok(next_token_targets(tokens)
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .map(|(i, t)| {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f32>().ln() + m;
            row[t] - lse
        })
        .collect())
}
