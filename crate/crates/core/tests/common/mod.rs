// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use domainfit::model::{
    train_lm, Corpus, LmTrainConfig, ModelConfig, ModelState, Sample, SyntheticCorpus,
    SyntheticDomain,
};
use domainfit::optim::AdamWConfig;
use domainfit::rng::RngStream;

/// Two disjoint 10-token regimes `a` and `b` plus shared filler.
pub fn toy_generator() -> SyntheticCorpus {
    SyntheticCorpus {
        domains: vec![
            SyntheticDomain {
                name: "a".into(),
                count: 120,
                token_start: 8,
                token_count: 10,
            },
            SyntheticDomain {
                name: "b".into(),
                count: 120,
                token_start: 18,
                token_count: 10,
            },
        ],
        filler_start: 2,
        filler_count: 6,
        branching: 2,
        min_len: 12,
        max_len: 24,
        sentence_len: (3, 6),
        filler_rate: (0.05, 0.4),
    }
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 28,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 32,
        max_seq_len: 24,
    }
}

pub fn toy_corpus() -> Corpus {
    toy_generator().generate(1).unwrap()
}

/// Small LM trained on the toy corpus.
pub fn trained_toy(steps: usize) -> (ModelState, Corpus) {
    let corpus = toy_corpus();
    let init = ModelState::init(toy_config(), &mut RngStream::new(2)).unwrap();
    let cfg = LmTrainConfig {
        steps,
        batch_size: 8,
        optimizer: AdamWConfig::new(3e-3),
        seed: 3,
    };
    let (model, _) = train_lm(&init, &corpus, &cfg).unwrap();
    (model, corpus)
}

pub fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}
