// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training loops.

use serde::{Deserialize, Serialize};

use super::{AdapterSet, BuildOptions, Corpus, ModelState, Trainable};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, OptimizerState, ParamSet};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optim")]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    8
}
fn default_optim() -> AdamWConfig {
    AdamWConfig::new(3e-3)
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: default_batch(),
            optimizer: default_optim(),
            seed: 0,
        }
    }
}

/// A token sequence with per-position prediction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenExample {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<usize>>,
}

impl TokenExample {
    /// Plain language modelling: every position predicts its successor.
    pub fn next_token(tokens: &[u32]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            targets: next_token_targets(tokens),
        }
    }
}

/// Row `i` predicts `tokens[i + 1]`; the last row has no target.
pub fn next_token_targets(tokens: &[u32]) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|i| tokens.get(i + 1).map(|&t| t as usize))
        .collect()
}

/// Mean next-token cross-entropy of one sequence (needs length >= 2).
pub fn sequence_loss(model: &ModelState, tokens: &[u32], adapters: Option<&AdapterSet>) -> Result<f32> {
    example_loss(model, &TokenExample::next_token(tokens), adapters)
}

pub(crate) fn example_loss(
    model: &ModelState,
    ex: &TokenExample,
    adapters: Option<&AdapterSet>,
) -> Result<f32> {
    let mut g = Graph::new();
    let trace = model.build(
        &mut g,
        &ex.tokens,
        BuildOptions {
            adapters,
            ..Default::default()
        },
    )?;
    let loss = g.cross_entropy(trace.logits.expect("full forward"), &ex.targets)?;
    Ok(g.value(loss).data()[0])
}

/// Mean loss over a batch and the matching gradients. With
/// [`Trainable::All`] the gradients are keyed by model parameter names, with
/// [`Trainable::AdaptersOnly`] by adapter factor names.
pub(crate) fn batch_gradients(
    model: &ModelState,
    adapters: Option<&AdapterSet>,
    trainable: Trainable,
    batch: &[&TokenExample],
) -> Result<(f32, ParamSet)> {
    let mut grads = ParamSet::new();
    let mut total = 0.0f32;
    let inv = 1.0 / batch.len() as f32;
    for ex in batch {
        let mut g = Graph::new();
        let trace = model.build(
            &mut g,
            &ex.tokens,
            BuildOptions {
                trainable,
                adapters,
                ..Default::default()
            },
        )?;
        let loss = g.cross_entropy(trace.logits.expect("full forward"), &ex.targets)?;
        total += g.value(loss).data()[0];
        let mut gr = g.backward(loss)?;
        let leaves = match trainable {
            Trainable::AdaptersOnly => &trace.adapter_params,
            _ => &trace.params,
        };
        for (name, &id) in leaves {
            if let Some(t) = gr.take(id) {
                match grads.get_mut(name) {
                    Some(acc) => acc.axpy(inv, &t)?,
                    None => {
                        grads.insert(name.clone(), t.scale(inv));
                    }
                }
            }
        }
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    Ok((loss, grads))
}

/// Train every parameter on next-token prediction over `corpus`. Returns the
/// updated model and the per-step mean batch loss.
pub fn train_lm(model: &ModelState, corpus: &Corpus, cfg: &LmTrainConfig) -> Result<(ModelState, Vec<f32>)> {
    if model.frozen {
        return Err(Error::State("cannot train a frozen model".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let examples: Vec<TokenExample> = corpus
        .samples
        .iter()
        .filter(|s| s.tokens.len() >= 2)
        .map(|s| TokenExample::next_token(&s.tokens))
        .collect();
    if examples.is_empty() && cfg.steps > 0 {
        return Err(Error::Input("corpus has no sequence of length >= 2".into()));
    }
    let mut out = model.clone();
    let mut opt = OptimizerState::new(cfg.optimizer.clone())?;
    let mut rng = RngStream::new(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<&TokenExample> = (0..cfg.batch_size)
            .map(|_| &examples[rng.below(examples.len())])
            .collect();
        let (loss, grads) = batch_gradients(&out, None, Trainable::All, &batch)?;
        opt.step(&mut out.params, &grads)?;
        trace.push(loss);
    }
    Ok((out, trace))
}
