// SPDX-License-Identifier: MIT OR Apache-2.0

//! The recipe as plain in-memory functions. The staged runner persists what
//! these return; tests and examples call them directly.

use serde::{Deserialize, Serialize};

use super::config::{derive_seed, CorpusSection, PipelineConfig};
use crate::curation::{curate, embed_corpus, vote, CuratedSet, EmbeddingIndex, SeedSet};
use crate::distill::{
    build_distilled_set, evaluate_domain_loss, finetune, lm_examples, tgd_examples, DistilledExample, Finetuned,
};
use crate::error::{Error, Result};
use crate::model::{train_lm, ActivationDump, Corpus, ModelState, Sample};
use crate::prune::{group_importance, prune, ImportanceTable, PrunedModel};
use crate::rng::RngStream;
use crate::sae::{train_sae, SaeLoss, SaeState};
use crate::saliency::{aggregate_and_select, filter_matrix, select_from_dump, SaliencyReport, Selector};

/// Disjoint id lists carved out of the generated corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub target_domain: String,
    pub seeds: Vec<String>,
    pub eval: Vec<String>,
    pub reference: Vec<String>,
    pub pool: Vec<String>,
}

impl Splits {
    /// Everything the base model may train on.
    pub fn pretraining(&self) -> Vec<String> {
        self.reference.iter().chain(&self.pool).cloned().collect()
    }

    pub fn seed_set(&self) -> SeedSet {
        SeedSet {
            domain: self.target_domain.clone(),
            samples: self.seeds.clone(),
        }
    }

    /// Seeds followed by the pool: the rows of a curation index.
    pub fn candidates(&self) -> Vec<String> {
        self.seeds.iter().chain(&self.pool).cloned().collect()
    }
}

/// Seeds and eval come from the target domain; the remaining samples are
/// shuffled and split into the reference set and the curation pool.
pub fn split_corpus(corpus: &Corpus, section: &CorpusSection, seed: u64) -> Result<Splits> {
    let mut rng = RngStream::new(seed);
    let mut target: Vec<String> = corpus
        .in_domain(&section.target_domain)
        .iter()
        .map(|s| s.id.clone())
        .collect();
    target.sort();
    rng.shuffle(&mut target);
    let held = section.seed_count + section.eval_count;
    if target.len() <= held {
        return Err(Error::Config(format!(
            "domain `{}` has {} samples, seeds + eval need more than {held}",
            section.target_domain,
            target.len()
        )));
    }
    let seeds = target[..section.seed_count].to_vec();
    let eval = target[section.seed_count..held].to_vec();
    let mut rest: Vec<String> = corpus
        .samples
        .iter()
        .map(|s| s.id.clone())
        .filter(|id| !target[..held].contains(id))
        .collect();
    rest.sort();
    rng.shuffle(&mut rest);
    if rest.len() <= section.reference_count {
        return Err(Error::Config(format!(
            "{} mixed samples, reference set needs more than {}",
            rest.len(),
            section.reference_count
        )));
    }
    let pool = rest.split_off(section.reference_count);
    Ok(Splits {
        target_domain: section.target_domain.clone(),
        seeds,
        eval,
        reference: rest,
        pool,
    })
}

pub fn generate_corpus(cfg: &PipelineConfig) -> Result<(Corpus, Splits)> {
    let corpus = cfg.corpus.generator.generate(derive_seed(cfg.seed, "gen-corpus"))?;
    let splits = split_corpus(&corpus, &cfg.corpus, derive_seed(cfg.seed, "splits"))?;
    Ok((corpus, splits))
}

pub fn samples<'a>(corpus: &'a Corpus, ids: &[String]) -> Result<Vec<&'a Sample>> {
    let idx = corpus.index();
    ids.iter()
        .map(|id| {
            idx.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Dependency(format!("sample `{id}`")))
        })
        .collect()
}

/// Train the base (teacher) model on the reference set and the pool.
pub fn pretrain(cfg: &PipelineConfig, corpus: &Corpus, splits: &Splits) -> Result<(ModelState, Vec<f32>)> {
    let init = ModelState::init(
        cfg.model.architecture.clone(),
        &mut RngStream::new(derive_seed(cfg.seed, "init")),
    )?;
    train_lm(&init, &corpus.subset(&splits.pretraining())?, &cfg.lm_config())
}

pub fn reference_dump(cfg: &PipelineConfig, model: &ModelState, corpus: &Corpus, splits: &Splits) -> Result<ActivationDump> {
    ActivationDump::capture(model, &corpus.subset(&splits.reference)?, cfg.saliency.hookpoint)
}

pub fn saliency_for(
    cfg: &PipelineConfig,
    model: &ModelState,
    corpus: &Corpus,
    splits: &Splits,
    dump: &ActivationDump,
    selector: Selector,
) -> Result<SaliencyReport> {
    let sc = cfg.saliency_config(selector);
    match selector {
        Selector::Jacobian => aggregate_and_select(model, &samples(corpus, &splits.reference)?, &sc),
        _ => select_from_dump(dump, &sc),
    }
}

/// One SAE per ensemble member, trained on the filtered reference activations.
pub fn train_saes(
    cfg: &PipelineConfig,
    report: &SaliencyReport,
    dump: &ActivationDump,
) -> Result<Vec<(SaeState, Vec<SaeLoss>)>> {
    let data = filter_matrix(&dump.matrix, report)?;
    (0..cfg.curation.ensemble)
        .map(|m| train_sae(&cfg.sae_config(m), &data))
        .collect()
}

pub fn embed_candidates(
    model: &ModelState,
    sae: &SaeState,
    report: &SaliencyReport,
    corpus: &Corpus,
    splits: &Splits,
    sae_id: &str,
) -> Result<EmbeddingIndex> {
    embed_corpus(model, sae, report, &corpus.subset(&splits.candidates())?, sae_id)
}

pub fn curate_indices(cfg: &PipelineConfig, indices: &[EmbeddingIndex], splits: &Splits) -> Result<CuratedSet> {
    let seeds = splits.seed_set();
    let sets = indices
        .iter()
        .map(|ix| curate(ix, &seeds, cfg.curation.m))
        .collect::<Result<Vec<_>>>()?;
    if sets.len() == 1 {
        return Ok(sets.into_iter().next().expect("one set"));
    }
    vote(&sets, cfg.curation.m)
}

/// Saliency, SAE training, embedding and curation for one selector.
#[derive(Clone, Debug)]
pub struct SelectorRun {
    pub selector: Selector,
    pub report: SaliencyReport,
    pub saes: Vec<SaeState>,
    pub curated: CuratedSet,
    pub precision: f32,
}

pub fn run_selector(
    cfg: &PipelineConfig,
    model: &ModelState,
    corpus: &Corpus,
    splits: &Splits,
    dump: &ActivationDump,
    selector: Selector,
) -> Result<SelectorRun> {
    let report = saliency_for(cfg, model, corpus, splits, dump, selector)?;
    let saes: Vec<SaeState> = train_saes(cfg, &report, dump)?.into_iter().map(|(s, _)| s).collect();
    let indices = saes
        .iter()
        .enumerate()
        .map(|(i, sae)| embed_candidates(model, sae, &report, corpus, splits, &format!("{}-{i}", selector.name())))
        .collect::<Result<Vec<_>>>()?;
    let curated = curate_indices(cfg, &indices, splits)?;
    let precision = curated.precision(corpus, &splits.target_domain);
    Ok(SelectorRun {
        selector,
        report,
        saes,
        curated,
        precision,
    })
}

/// `m` pool samples drawn uniformly, in pool order.
pub fn random_subset(splits: &Splits, m: usize, seed: u64) -> Vec<String> {
    let mut picks = RngStream::new(seed).sample_indices(splits.pool.len(), m.min(splits.pool.len()));
    picks.sort_unstable();
    picks.into_iter().map(|i| splits.pool[i].clone()).collect()
}

pub fn importance(model: &ModelState, corpus: &Corpus, ids: &[String], dataset_id: &str) -> Result<ImportanceTable> {
    group_importance(model, &samples(corpus, ids)?, dataset_id)
}

/// Losses on the held-out target-domain samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionLosses {
    pub unpruned: f32,
    pub pruned: f32,
    pub pruned_random: f32,
    pub pruned_curated: f32,
    pub pruned_tgd: f32,
}

impl ConditionLosses {
    pub fn rows(&self) -> [(&'static str, f32); 5] {
        [
            ("unpruned", self.unpruned),
            ("pruned", self.pruned),
            ("pruned+random-tune", self.pruned_random),
            ("pruned+curated-tune", self.pruned_curated),
            ("pruned+tgd", self.pruned_tgd),
        ]
    }
}

pub fn eval_loss(model: &ModelState, corpus: &Corpus, splits: &Splits, tuned: Option<&Finetuned>) -> Result<f32> {
    let eval = samples(corpus, &splits.eval)?;
    match tuned {
        Some(t) => evaluate_domain_loss(&t.model, &eval, t.adapters.as_ref()),
        None => evaluate_domain_loss(model, &eval, None),
    }
}

pub fn tune_plain(cfg: &PipelineConfig, student: &ModelState, corpus: &Corpus, ids: &[String]) -> Result<Finetuned> {
    finetune(student, &lm_examples(&samples(corpus, ids)?), &cfg.finetune_config())
}

pub fn distill_set(cfg: &PipelineConfig, teacher: &ModelState, corpus: &Corpus, ids: &[String]) -> Result<Vec<DistilledExample>> {
    build_distilled_set(teacher, &samples(corpus, ids)?, &cfg.decode_params())
}

pub fn tune_tgd(cfg: &PipelineConfig, student: &ModelState, set: &[DistilledExample]) -> Result<Finetuned> {
    let fc = cfg.finetune_config();
    finetune(student, &tgd_examples(set, fc.include_original)?, &fc)
}

/// Pruned artifacts and tuned students behind [`ConditionLosses`].
#[derive(Clone, Debug)]
pub struct Recovery {
    pub pruned: PrunedModel,
    pub random: Finetuned,
    pub curated: Finetuned,
    pub tgd: Finetuned,
    pub distilled: Vec<DistilledExample>,
    pub losses: ConditionLosses,
}

/// Prune on the curated set at the configured ratio, then tune the pruned
/// model three ways.
pub fn recover(
    cfg: &PipelineConfig,
    teacher: &ModelState,
    corpus: &Corpus,
    splits: &Splits,
    curated: &[String],
) -> Result<Recovery> {
    let table = importance(teacher, corpus, curated, "curated")?;
    let pruned = prune(teacher, &table, cfg.prune.ratio)?;
    let random_ids = random_subset(splits, curated.len(), derive_seed(cfg.seed, "random-subset"));
    let random = tune_plain(cfg, &pruned.model, corpus, &random_ids)?;
    let plain = tune_plain(cfg, &pruned.model, corpus, curated)?;
    let distilled = distill_set(cfg, teacher, corpus, curated)?;
    let tgd = tune_tgd(cfg, &pruned.model, &distilled)?;
    let losses = ConditionLosses {
        unpruned: eval_loss(teacher, corpus, splits, None)?,
        pruned: eval_loss(&pruned.model, corpus, splits, None)?,
        pruned_random: eval_loss(&pruned.model, corpus, splits, Some(&random))?,
        pruned_curated: eval_loss(&pruned.model, corpus, splits, Some(&plain))?,
        pruned_tgd: eval_loss(&pruned.model, corpus, splits, Some(&tgd))?,
    };
    Ok(Recovery {
        pruned,
        random,
        curated: plain,
        tgd,
        distilled,
        losses,
    })
}

/// One ratio of the curated-vs-random sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f32,
    pub curated_loss: f32,
    pub random_loss: f32,
    pub params: usize,
}

/// Each arm scores pruning on its own data and fine-tunes on it.
pub fn ratio_curve(
    cfg: &PipelineConfig,
    teacher: &ModelState,
    corpus: &Corpus,
    splits: &Splits,
    curated: &[String],
) -> Result<Vec<SweepRow>> {
    let random_ids = random_subset(splits, curated.len(), derive_seed(cfg.seed, "random-subset"));
    let cur_table = importance(teacher, corpus, curated, "curated")?;
    let rnd_table = importance(teacher, corpus, &random_ids, "random")?;
    cfg.eval
        .sweep_ratios
        .iter()
        .map(|&r| {
            let pc = prune(teacher, &cur_table, r)?;
            let pr = prune(teacher, &rnd_table, r)?;
            let tc = tune_plain(cfg, &pc.model, corpus, curated)?;
            let tr = tune_plain(cfg, &pr.model, corpus, &random_ids)?;
            Ok(SweepRow {
                ratio: r,
                curated_loss: eval_loss(&pc.model, corpus, splits, Some(&tc))?,
                random_loss: eval_loss(&pr.model, corpus, splits, Some(&tr))?,
                params: pc.model.num_params(),
            })
        })
        .collect()
}
