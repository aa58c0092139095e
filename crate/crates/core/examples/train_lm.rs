// SPDX-License-Identifier: MIT OR Apache-2.0

//! Train a small causal transformer on a synthetic corpus, checkpoint it and
//! read activations at a hookpoint.

use domainfit::model::{
    train_lm, Hookpoint, LmTrainConfig, ModelConfig, ModelState, SyntheticCorpus, SyntheticDomain,
};
use domainfit::optim::AdamWConfig;
use domainfit::rng::RngStream;
use domainfit::Result;

fn main() -> Result<()> {
    let corpus = SyntheticCorpus {
        domains: vec![
            SyntheticDomain { name: "alpha".into(), count: 150, token_start: 8, token_count: 10 },
            SyntheticDomain { name: "beta".into(), count: 150, token_start: 18, token_count: 10 },
        ],
        filler_start: 2,
        filler_count: 6,
        branching: 2,
        min_len: 12,
        max_len: 24,
        sentence_len: (3, 6),
        filler_rate: (0.05, 0.4),
    }
    .generate(1)?;

    let config = ModelConfig {
        vocab_size: 28,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_seq_len: 32,
    };
    let init = ModelState::init(config, &mut RngStream::new(0))?;
    let cfg = LmTrainConfig {
        steps: 600,
        batch_size: 8,
        optimizer: AdamWConfig::new(3e-3),
        seed: 1,
    };
    let (model, trace) = train_lm(&init, &corpus, &cfg)?;
    for (i, chunk) in trace.chunks(100).enumerate() {
        let mean = chunk.iter().sum::<f32>() / chunk.len() as f32;
        println!("steps {:>4}-{:<4} loss {mean:.3}", i * 100, i * 100 + chunk.len());
    }
    println!("{} parameters, checksum {}", model.num_params(), &model.checksum()[..16]);

    let sample = &corpus.samples[0];
    let hook = Hookpoint::residual(1);
    let acts = model.hook_activations(&sample.tokens, hook)?;
    let pooled = model.capture(&sample.id, &sample.tokens, hook)?;
    println!("{hook}: per-position {:?}, pooled {:?}", acts.shape(), pooled.pooled.shape());

    let dir = std::env::temp_dir().join("domainfit-lm");
    model.save(&dir)?;
    let back = ModelState::load(&dir)?;
    assert_eq!(back.checksum(), model.checksum());
    println!("checkpoint round trip ok: {}", dir.display());
    Ok(())
}
