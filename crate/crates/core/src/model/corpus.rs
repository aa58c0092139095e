// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-tokenized corpora and the synthetic multi-domain generator.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::RngStream;

/// One JSON Lines record: `{"id": ..., "tokens": [...], "domain": ...}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            if let Some(j) = seen.insert(s.id.as_str(), i) {
                return Err(Error::Input(format!(
                    "duplicate sample id `{}` at records {j} and {i}",
                    s.id
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(io::read_jsonl(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, &Sample> {
        self.samples.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn in_domain(&self, domain: &str) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.domain.as_deref() == Some(domain))
            .collect()
    }

    pub fn subset(&self, ids: &[String]) -> Result<Corpus> {
        let idx = self.index();
        let samples = ids
            .iter()
            .map(|id| {
                idx.get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::Input(format!("sample id `{id}` not in corpus")))
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(samples)
    }

    pub fn domain_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.domain.clone().unwrap_or_default()).or_insert(0) += 1;
        }
        out
    }
}

/// One regime of the synthetic generator: a sparse Markov chain over a
/// private block of the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomain {
    pub name: String,
    pub count: usize,
    /// First token id of the domain's private block.
    pub token_start: u32,
    pub token_count: u32,
}

/// Generator for corpora with disjoint per-domain token regimes plus a shared
/// filler vocabulary.
///
/// Token 0 opens every sample and token 1 separates sentences. Filler tokens
/// are shared by all domains; their rate varies per sample independently of
/// the domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub domains: Vec<SyntheticDomain>,
    pub filler_start: u32,
    pub filler_count: u32,
    #[serde(default = "default_branching")]
    pub branching: usize,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default = "default_sentence")]
    pub sentence_len: (usize, usize),
    /// Range of the per-sample probability that a token is filler.
    #[serde(default = "default_filler_rate")]
    pub filler_rate: (f32, f32),
}

fn default_branching() -> usize {
    3
}
fn default_sentence() -> (usize, usize) {
    (3, 7)
}
fn default_filler_rate() -> (f32, f32) {
    (0.1, 0.5)
}

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;

struct Chain {
    start: u32,
    successors: Vec<Vec<(u32, f32)>>,
}

impl Chain {
    fn new(start: u32, count: u32, branching: usize, rng: &mut RngStream) -> Self {
        let successors = (0..count)
            .map(|_| {
                let k = branching.min(count as usize).max(1);
                let picks = rng.sample_indices(count as usize, k);
                let w: Vec<f32> = (0..k).map(|_| 0.2 + rng.next_f32()).collect();
                picks.into_iter().map(|p| start + p as u32).zip(w).collect()
            })
            .collect();
        Self { start, successors }
    }

    fn next(&self, prev: Option<u32>, rng: &mut RngStream) -> u32 {
        match prev {
            None => self.start + rng.below(self.successors.len()) as u32,
            Some(p) => {
                let succ = &self.successors[(p - self.start) as usize];
                let w: Vec<f32> = succ.iter().map(|s| s.1).collect();
                succ[rng.categorical(&w)].0
            }
        }
    }
}

impl SyntheticCorpus {
    pub fn vocab_needed(&self) -> u32 {
        let mut hi = self.filler_start + self.filler_count;
        for d in &self.domains {
            hi = hi.max(d.token_start + d.token_count);
        }
        hi
    }

    /// Domain blocks may overlap each other; the filler block may not touch
    /// any of them.
    pub fn validate(&self) -> Result<()> {
        let filler = (self.filler_start, self.filler_start + self.filler_count);
        if filler.0 < 2 || self.domains.iter().any(|d| d.token_start < 2) {
            return Err(Error::Config("tokens 0 and 1 are reserved".into()));
        }
        for d in &self.domains {
            let (lo, hi) = (d.token_start, d.token_start + d.token_count);
            if lo < filler.1 && filler.0 < hi {
                return Err(Error::Config(format!(
                    "domain `{}` overlaps the filler block",
                    d.name
                )));
            }
        }
        if self.domains.iter().any(|d| d.token_count == 0) || self.filler_count == 0 {
            return Err(Error::Config("every token block needs >= 1 token".into()));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config("need 2 <= min_len <= max_len".into()));
        }
        Ok(())
    }

    /// Generate the corpus. Ids are `{domain}-{index:05}`; samples of all
    /// domains are interleaved in a seeded random order.
    pub fn generate(&self, seed: u64) -> Result<Corpus> {
        self.validate()?;
        let base = RngStream::new(seed);
        let mut structure = base.fork(0);
        let chains: Vec<Chain> = self
            .domains
            .iter()
            .map(|d| Chain::new(d.token_start, d.token_count, self.branching, &mut structure))
            .collect();
        let filler = Chain::new(self.filler_start, self.filler_count, self.branching, &mut structure);
        let mut rng = base.fork(1);
        let mut samples = Vec::new();
        for (d, chain) in self.domains.iter().zip(&chains) {
            for i in 0..d.count {
                let len = self.min_len + rng.below(self.max_len - self.min_len + 1);
                let rate = self.filler_rate.0
                    + (self.filler_rate.1 - self.filler_rate.0) * rng.next_f32();
                let tokens = self.sample_tokens(chain, &filler, len, rate, &mut rng);
                samples.push(Sample {
                    id: format!("{}-{i:05}", d.name),
                    tokens,
                    domain: Some(d.name.clone()),
                });
            }
        }
        rng.shuffle(&mut samples);
        Corpus::new(samples)
    }

    fn sample_tokens(
        &self,
        chain: &Chain,
        filler: &Chain,
        len: usize,
        filler_rate: f32,
        rng: &mut RngStream,
    ) -> Vec<u32> {
        let mut out = vec![BOS];
        let mut prev = None;
        let mut prev_filler = None;
        let mut left = 0usize;
        while out.len() < len {
            if left == 0 {
                if out.len() > 1 {
                    out.push(SEP);
                    if out.len() >= len {
                        break;
                    }
                }
                left = self.sentence_len.0
                    + rng.below(self.sentence_len.1 - self.sentence_len.0 + 1);
            }
            if rng.next_f32() < filler_rate {
                let t = filler.next(prev_filler, rng);
                prev_filler = Some(t);
                out.push(t);
            } else {
                let t = chain.next(prev, rng);
                prev = Some(t);
                out.push(t);
            }
            left -= 1;
        }
        out
    }
}
