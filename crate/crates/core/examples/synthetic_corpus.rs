// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generate a two-domain corpus and look at what separates the domains.

use domainfit::model::{SyntheticCorpus, SyntheticDomain};
use domainfit::Result;

fn main() -> Result<()> {
    let generator = SyntheticCorpus {
        domains: vec![
            SyntheticDomain { name: "alpha".into(), count: 200, token_start: 10, token_count: 12 },
            SyntheticDomain { name: "beta".into(), count: 600, token_start: 22, token_count: 12 },
        ],
        filler_start: 2,
        filler_count: 8,
        branching: 3,
        min_len: 16,
        max_len: 32,
        sentence_len: (3, 7),
        filler_rate: (0.05, 0.8),
    };
    let corpus = generator.generate(42)?;
    println!("{} samples, vocabulary {}", corpus.len(), generator.vocab_needed());
    for (domain, n) in corpus.domain_counts() {
        println!("  {domain:<6} {n}");
    }
    for s in corpus.samples.iter().take(3) {
        let filler = s.tokens.iter().filter(|&&t| (2..10).contains(&t)).count();
        println!(
            "{} ({} tokens, {:.0}% filler): {:?}",
            s.id,
            s.tokens.len(),
            100.0 * filler as f32 / s.tokens.len() as f32,
            &s.tokens[..12]
        );
    }
    let dir = std::env::temp_dir().join("domainfit-corpus.jsonl");
    corpus.save(&dir)?;
    println!("written to {}", dir.display());
    Ok(())
}
