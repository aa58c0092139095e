// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seed-driven retrieval in SAE code space.
//!
//! Every sample is embedded as the SAE encoder code of its filtered pooled
//! activation. A candidate's score is its best cosine similarity to any seed,
//! and the `M` best-scoring candidates form the curated set.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{Corpus, Hookpoint, ModelState, Sample};
use crate::rng::RngStream;
use crate::sae::SaeState;
use crate::saliency::{filter_activations, SaliencyReport, Selector};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSet {
    pub domain: String,
    pub samples: Vec<String>,
}

impl SeedSet {
    /// The first `count` samples of `domain` in corpus order.
    pub fn from_domain(corpus: &Corpus, domain: &str, count: usize) -> Result<Self> {
        let samples: Vec<String> = corpus
            .in_domain(domain)
            .into_iter()
            .take(count)
            .map(|s| s.id.clone())
            .collect();
        if samples.len() < count {
            return Err(Error::Input(format!(
                "domain `{domain}` has {} samples, {count} seeds requested",
                samples.len()
            )));
        }
        Ok(Self {
            domain: domain.into(),
            samples,
        })
    }
}

/// Codes of many samples produced by one SAE + saliency report pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub ids: Vec<String>,
    pub codes: Tensor,
    pub sae_id: String,
    pub hookpoint: Hookpoint,
    pub selector: Selector,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    sae_id: String,
    hookpoint: Hookpoint,
    selector: Selector,
    codes: String,
    ids: Vec<String>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code(&self, row: usize) -> Tensor {
        Tensor::from_vec(self.codes.row(row).to_vec())
    }

    pub fn row_of(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    /// Writes `{stem}.fstn` and `{stem}.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let codes = format!("{stem}.fstn");
        io::write_fstn(&dir.join(&codes), &self.codes)?;
        io::write_json(
            &dir.join(format!("{stem}.json")),
            &IndexFile {
                sae_id: self.sae_id.clone(),
                hookpoint: self.hookpoint,
                selector: self.selector,
                codes,
                ids: self.ids.clone(),
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let f: IndexFile = io::read_json(&dir.join(format!("{stem}.json")))?;
        let codes = io::read_fstn(&dir.join(&f.codes))?;
        if codes.ndim() != 2 || codes.rows() != f.ids.len() {
            return Err(Error::Format("embedding index rows disagree with ids".into()));
        }
        Ok(Self {
            ids: f.ids,
            codes,
            sae_id: f.sae_id,
            hookpoint: f.hookpoint,
            selector: f.selector,
        })
    }
}

fn check_provenance(sae: &SaeState, report: &SaliencyReport) -> Result<()> {
    if report.output_dim() != sae.config.input_dim {
        return Err(Error::Consistency(format!(
            "saliency report yields {} features, SAE expects {}",
            report.output_dim(),
            sae.config.input_dim
        )));
    }
    Ok(())
}

/// `Enc(filter(capture(x)))`.
pub fn embed(model: &ModelState, sae: &SaeState, report: &SaliencyReport, sample: &Sample) -> Result<Tensor> {
    check_provenance(sae, report)?;
    let record = model.capture(&sample.id, &sample.tokens, report.hookpoint())?;
    sae.encode(&filter_activations(&record, report)?)
}

pub fn embed_corpus(
    model: &ModelState,
    sae: &SaeState,
    report: &SaliencyReport,
    corpus: &Corpus,
    sae_id: &str,
) -> Result<EmbeddingIndex> {
    let codes = corpus
        .samples
        .iter()
        .map(|s| embed(model, sae, report, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingIndex {
        ids: corpus.samples.iter().map(|s| s.id.clone()).collect(),
        codes: Tensor::stack(&codes)?,
        sae_id: sae_id.into(),
        hookpoint: report.hookpoint(),
        selector: report.selector,
    })
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32
}

/// Best cosine similarity of `code` to any seed.
pub fn similarity(code: &[f32], seeds: &[&[f32]]) -> Result<f32> {
    if seeds.is_empty() {
        return Err(Error::Input("similarity needs at least one seed".into()));
    }
    Ok(seeds
        .iter()
        .map(|s| cosine(code, s))
        .fold(f32::NEG_INFINITY, f32::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuratedEntry {
    pub id: String,
    pub score: f32,
    #[serde(default = "one")]
    pub votes: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuratedSet {
    pub domain: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub sae_ids: Vec<String>,
    pub entries: Vec<CuratedEntry>,
}

impl CuratedSet {
    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    /// Fraction of entries whose corpus label is `domain`.
    pub fn precision(&self, corpus: &Corpus, domain: &str) -> f32 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let idx = corpus.index();
        let hits = self
            .entries
            .iter()
            .filter(|e| idx.get(e.id.as_str()).and_then(|s| s.domain.as_deref()) == Some(domain))
            .count();
        hits as f32 / self.entries.len() as f32
    }
}

fn by_score_then_id(a: &CuratedEntry, b: &CuratedEntry) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// Scores of every non-seed sample in `index`.
pub fn score_candidates(index: &EmbeddingIndex, seeds: &SeedSet) -> Result<Vec<CuratedEntry>> {
    if seeds.samples.is_empty() {
        return Err(Error::Input("seed set is empty".into()));
    }
    let rows = index.row_of();
    let seed_rows = seeds
        .samples
        .iter()
        .map(|id| {
            rows.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Input(format!("seed `{id}` not in embedding index")))
        })
        .collect::<Result<Vec<_>>>()?;
    let seed_codes: Vec<&[f32]> = seed_rows.iter().map(|&r| index.codes.row(r)).collect();
    let exclude: BTreeSet<&str> = seeds.samples.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for (i, id) in index.ids.iter().enumerate() {
        if exclude.contains(id.as_str()) {
            continue;
        }
        out.push(CuratedEntry {
            id: id.clone(),
            score: similarity(index.codes.row(i), &seed_codes)?,
            votes: 1,
        });
    }
    Ok(out)
}

/// Top-`m` candidates by max-over-seeds cosine, ties by sample id. Seeds are
/// never returned.
pub fn curate(index: &EmbeddingIndex, seeds: &SeedSet, m: usize) -> Result<CuratedSet> {
    if m == 0 {
        return Err(Error::Input("M must be >= 1".into()));
    }
    let mut entries = score_candidates(index, seeds)?;
    if entries.is_empty() {
        return Err(Error::Input("no candidates left after excluding seeds".into()));
    }
    entries.sort_by(by_score_then_id);
    entries.truncate(m);
    Ok(CuratedSet {
        domain: seeds.domain.clone(),
        m,
        sae_ids: vec![index.sae_id.clone()],
        entries,
    })
}

/// Combine per-SAE selections: most frequently selected first, then higher
/// mean score, then sample id.
pub fn vote(sets: &[CuratedSet], m: usize) -> Result<CuratedSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Input("vote needs at least one curated set".into()))?;
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for s in sets {
        if s.domain != first.domain {
            return Err(Error::Consistency("curated sets target different domains".into()));
        }
        for e in &s.entries {
            let t = tally.entry(e.id.as_str()).or_insert((0, 0.0));
            t.0 += 1;
            t.1 += e.score as f64;
        }
    }
    let mut entries: Vec<CuratedEntry> = tally
        .into_iter()
        .map(|(id, (votes, sum))| CuratedEntry {
            id: id.into(),
            score: (sum / votes as f64) as f32,
            votes,
        })
        .collect();
    entries.sort_by(|a, b| b.votes.cmp(&a.votes).then_with(|| by_score_then_id(a, b)));
    entries.truncate(m);
    Ok(CuratedSet {
        domain: first.domain.clone(),
        m,
        sae_ids: sets.iter().flat_map(|s| s.sae_ids.clone()).collect(),
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSweepRow {
    pub seeds: usize,
    pub selected: usize,
    /// `|curated ∩ reference| / |reference|`, the reference using every seed.
    pub overlap: f32,
}

/// Re-run curation with seed subsets of each size (drawn with `rng_seed`) and
/// compare against the full-seed selection of the same size.
pub fn seed_sweep(
    index: &EmbeddingIndex,
    seeds: &SeedSet,
    seed_sizes: &[usize],
    selected_sizes: &[usize],
    rng_seed: u64,
) -> Result<Vec<SeedSweepRow>> {
    let mut rows = Vec::new();
    for &k in seed_sizes {
        if k == 0 || k > seeds.samples.len() {
            return Err(Error::Input(format!(
                "seed size {k} outside 1..={}",
                seeds.samples.len()
            )));
        }
        let mut rng = RngStream::new(rng_seed).fork(k as u64);
        let mut picks = rng.sample_indices(seeds.samples.len(), k);
        picks.sort_unstable();
        let subset = SeedSet {
            domain: seeds.domain.clone(),
            samples: picks.iter().map(|&i| seeds.samples[i].clone()).collect(),
        };
        for &m in selected_sizes {
            let reference: BTreeSet<String> = curate(index, seeds, m)?.ids().into_iter().collect();
            // candidates that are seeds of the full set are excluded from the
            // subset's ranking too, so both selections draw from the same pool
            let mut entries = score_candidates(index, &subset)?;
            entries.retain(|e| !seeds.samples.contains(&e.id));
            entries.sort_by(by_score_then_id);
            entries.truncate(m);
            let hits = entries.iter().filter(|e| reference.contains(&e.id)).count();
            rows.push(SeedSweepRow {
                seeds: k,
                selected: m,
                overlap: hits as f32 / reference.len().max(1) as f32,
            });
        }
    }
    Ok(rows)
}
