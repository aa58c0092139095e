// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank hookpoint coordinates with the Jacobian estimator and the four
//! dataset baselines, and show how the Hutchinson estimate tightens with
//! more probes.

use domainfit::model::{
    train_lm, Hookpoint, LmTrainConfig, ModelConfig, ModelState, Sample, SyntheticCorpus,
    SyntheticDomain,
};
use domainfit::rng::RngStream;
use domainfit::saliency::{estimate_squared, select, SaliencyConfig, Selector};
use domainfit::Result;

fn main() -> Result<()> {
    let corpus = SyntheticCorpus {
        domains: vec![
            SyntheticDomain { name: "alpha".into(), count: 100, token_start: 8, token_count: 10 },
            SyntheticDomain { name: "beta".into(), count: 100, token_start: 18, token_count: 10 },
        ],
        filler_start: 2,
        filler_count: 6,
        branching: 2,
        min_len: 12,
        max_len: 24,
        sentence_len: (3, 6),
        filler_rate: (0.05, 0.4),
    }
    .generate(3)?;
    let config = ModelConfig { vocab_size: 28, d_model: 24, n_layers: 2, n_heads: 4, d_ff: 48, max_seq_len: 24 };
    let init = ModelState::init(config, &mut RngStream::new(4))?;
    let (model, _) = train_lm(&init, &corpus, &LmTrainConfig { steps: 300, ..Default::default() })?;

    let reference: Vec<&Sample> = corpus.samples.iter().take(40).collect();
    let hook = Hookpoint::residual(1);
    for selector in Selector::ALL {
        let mut cfg = SaliencyConfig::new(6, hook);
        cfg.selector = selector;
        cfg.probes = 4;
        cfg.seed = 7;
        let r = select(&model, &reference, &cfg)?;
        println!("{:<9} selected {:?}", selector.name(), r.selected);
    }

    // spread of the R-probe estimate of ||J_j||^2 for one coordinate
    let tokens = &corpus.samples[0].tokens;
    for probes in [1, 4, 16] {
        let mut rng = RngStream::new(11);
        let draws: Vec<f64> = (0..200)
            .map(|_| estimate_squared(&model, tokens, hook, probes, &mut rng).map(|t| t.data()[0] as f64))
            .collect::<Result<_>>()?;
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        println!("R = {probes:>2}: mean {mean:.5}, variance {var:.3e}");
    }
    Ok(())
}
