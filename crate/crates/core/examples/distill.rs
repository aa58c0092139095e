// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prune a model, then recover it with teacher-guided distillation and with
//! plain fine-tuning on the same samples.

use domainfit::distill::{
    build_distilled_set, evaluate_domain_loss, finetune, lm_examples, tgd_examples, DecodeParams,
    FinetuneConfig,
};
use domainfit::model::{
    train_lm, AdapterConfig, LmTrainConfig, ModelConfig, ModelState, Sample, SyntheticCorpus,
    SyntheticDomain,
};
use domainfit::optim::AdamWConfig;
use domainfit::prune::{group_importance, prune};
use domainfit::rng::RngStream;
use domainfit::Result;

fn main() -> Result<()> {
    let corpus = SyntheticCorpus {
        domains: vec![
            SyntheticDomain { name: "alpha".into(), count: 200, token_start: 8, token_count: 10 },
            SyntheticDomain { name: "beta".into(), count: 200, token_start: 18, token_count: 10 },
        ],
        filler_start: 2,
        filler_count: 6,
        branching: 2,
        min_len: 20,
        max_len: 30,
        sentence_len: (3, 6),
        filler_rate: (0.05, 0.4),
    }
    .generate(7)?;
    let config = ModelConfig { vocab_size: 28, d_model: 32, n_layers: 2, n_heads: 4, d_ff: 64, max_seq_len: 48 };
    let init = ModelState::init(config, &mut RngStream::new(8))?;
    let (teacher, _) = train_lm(&init, &corpus, &LmTrainConfig { steps: 800, ..Default::default() })?;

    let alpha = corpus.in_domain("alpha");
    let (train, eval): (Vec<&Sample>, Vec<&Sample>) = (alpha[..30].to_vec(), alpha[150..].to_vec());
    let pruned = prune(&teacher, &group_importance(&teacher, &train, "alpha")?, 0.4)?.model;

    let params = DecodeParams {
        prompt_tokens: 4,
        teacher_tokens: Some(4),
        distilled_tokens: Some(24),
        samples_per_example: 4,
        seed: 9,
        ..Default::default()
    };
    let distilled = build_distilled_set(&teacher, &train, &params)?;
    println!("{} distilled records, first y' = {:?}", distilled.len(), distilled[0].distilled);

    let cfg = FinetuneConfig {
        steps: 100,
        batch_size: 8,
        optimizer: AdamWConfig::new(1e-3),
        adapter: Some(AdapterConfig { rank: 4, ..Default::default() }),
        include_original: false,
        seed: 10,
    };
    let plain = finetune(&pruned, &lm_examples(&train), &cfg)?;
    let tgd = finetune(&pruned, &tgd_examples(&distilled, false)?, &cfg)?;

    println!("teacher          {:.4}", evaluate_domain_loss(&teacher, &eval, None)?);
    println!("pruned           {:.4}", evaluate_domain_loss(&pruned, &eval, None)?);
    println!("pruned + plain   {:.4}", evaluate_domain_loss(&plain.merged()?, &eval, None)?);
    println!("pruned + tgd     {:.4}", evaluate_domain_loss(&tgd.merged()?, &eval, None)?);
    Ok(())
}
