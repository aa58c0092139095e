// SPDX-License-Identifier: MIT OR Apache-2.0

//! Score heads and feed-forward channels on domain data, compare with weight
//! magnitude, and sweep the pruning ratio.

use domainfit::model::{
    train_lm, LmTrainConfig, ModelConfig, ModelState, Sample, SyntheticCorpus, SyntheticDomain,
};
use domainfit::prune::{group_importance, magnitude_importance, prune, ratio_sweep, spearman};
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
    .generate(5)?;
    let config = ModelConfig { vocab_size: 28, d_model: 32, n_layers: 2, n_heads: 4, d_ff: 64, max_seq_len: 24 };
    let init = ModelState::init(config, &mut RngStream::new(6))?;
    let (model, _) = train_lm(&init, &corpus, &LmTrainConfig { steps: 500, ..Default::default() })?;

    let alpha = corpus.in_domain("alpha");
    let (score_set, eval): (Vec<&Sample>, Vec<&Sample>) = (alpha[..60].to_vec(), alpha[60..].to_vec());
    let table = group_importance(&model, &score_set, "alpha")?;
    let magnitude = magnitude_importance(&model)?;
    println!(
        "spearman(gradient importance, magnitude) = {:.3}",
        spearman(&table.values(), &magnitude.values())
    );
    let mut ranked = table.scores.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (g, s) in ranked.iter().take(5) {
        println!("  {g:?}: {s:.5}");
    }

    let p = prune(&model, &table, 0.3)?;
    println!(
        "r = 0.3 removed {} groups, {} -> {} parameters",
        p.manifest.removed.len(),
        p.manifest.total_params_before,
        p.manifest.total_params_after
    );
    for (name, t) in [("gradient", &table), ("magnitude", &magnitude)] {
        for pt in ratio_sweep(&model, t, &[0.1, 0.2, 0.3, 0.4], &eval)? {
            println!("{name:<9} r = {:.1}: alpha loss {:.4} ({} params)", pt.ratio, pt.loss, pt.params);
        }
    }
    Ok(())
}
