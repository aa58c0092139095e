// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage runner over a workspace directory.
//!
//! Every stage writes into `<workspace>/<stage>/` and finishes by writing
//! `manifest.json` with the checksums of what it read and wrote. A stage is
//! skipped when its recorded inputs and config snapshot still match.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{derive_seed, PipelineConfig};
use super::experiment::{self as ex, Splits};
use super::report;
use crate::curation::{CuratedSet, EmbeddingIndex};
use crate::distill::{load_distilled, save_distilled, Finetuned};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{ActivationDump, AdapterSet, Corpus, ModelState};
use crate::prune::{prune, PrunedModel};
use crate::sae::{loss_trace_csv, SaeState};
use crate::saliency::{SaliencyReport, Selector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenCorpus,
    TrainLm,
    DumpActs,
    Topk,
    TrainSae,
    Embed,
    Curate,
    Prune,
    Distill,
    Finetune,
    Eval,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::GenCorpus,
        Stage::TrainLm,
        Stage::DumpActs,
        Stage::Topk,
        Stage::TrainSae,
        Stage::Embed,
        Stage::Curate,
        Stage::Prune,
        Stage::Distill,
        Stage::Finetune,
        Stage::Eval,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainLm => "train-lm",
            Stage::DumpActs => "dump-acts",
            Stage::Topk => "topk",
            Stage::TrainSae => "train-sae",
            Stage::Embed => "embed",
            Stage::Curate => "curate",
            Stage::Prune => "prune",
            Stage::Distill => "distill",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenCorpus => &[],
            TrainLm => &[GenCorpus],
            DumpActs => &[GenCorpus, TrainLm],
            Topk => &[GenCorpus, TrainLm, DumpActs],
            TrainSae => &[DumpActs, Topk],
            Embed => &[GenCorpus, TrainLm, Topk, TrainSae],
            Curate => &[GenCorpus, Embed],
            Prune => &[GenCorpus, TrainLm, Curate],
            Distill => &[GenCorpus, TrainLm, Curate],
            Finetune => &[GenCorpus, Curate, Prune, Distill],
            Eval => &[GenCorpus, TrainLm, Prune, Finetune],
            Sweep => &[GenCorpus, TrainLm, Curate],
            Report => &[Curate, Eval, Sweep],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: String,
    /// `<stage>/<relative path>` → sha256 of every upstream output read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path → sha256 of every file this stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_ms: u64,
    pub config: Value,
    /// Set on the returned copy when the stage was skipped.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub noop: bool,
}

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

/// Exclusive hold on a workspace, released on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl WorkspaceLock {
    pub fn acquire(workspace: &Path) -> Result<Self> {
        fs::create_dir_all(workspace)?;
        let path = workspace.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "workspace {} is locked by another run (remove {} if stale)",
                workspace.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn stage_dir(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    cfg.workspace.join(stage.name())
}

pub fn load_manifest(workspace: &Path, stage: Stage) -> Result<RunManifest> {
    let path = workspace.join(stage.name()).join(MANIFEST);
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "{} (run stage `{}` first)",
            path.display(),
            stage.name()
        )));
    }
    io::read_json(&path)
}

fn list_files(root: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root");
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if rel != MANIFEST {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if root.exists() {
        walk(root, root, &mut out)?;
    }
    out.sort();
    Ok(out)
}

fn checksums(root: &Path) -> Result<BTreeMap<String, String>> {
    list_files(root)?
        .into_iter()
        .map(|rel| Ok((rel.clone(), io::file_sha256(&root.join(&rel))?)))
        .collect()
}

/// Check each recorded output still hashes to what its manifest says.
fn verify_outputs(workspace: &Path, stage: Stage, m: &RunManifest) -> Result<()> {
    let root = workspace.join(stage.name());
    for (rel, want) in &m.outputs {
        let path = root.join(rel);
        let found = io::file_sha256(&path)?;
        if &found != want {
            return Err(Error::Checksum {
                path,
                expected: want.clone(),
                found,
            });
        }
    }
    Ok(())
}

fn gather_inputs(cfg: &PipelineConfig, stage: Stage) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    for &dep in stage.deps() {
        let m = match load_manifest(&cfg.workspace, dep) {
            // the report tabulates whatever exists
            Err(Error::Dependency(_)) if stage == Stage::Report => continue,
            other => other?,
        };
        verify_outputs(&cfg.workspace, dep, &m)?;
        for (rel, sum) in m.outputs {
            inputs.insert(format!("{}/{rel}", dep.name()), sum);
        }
    }
    Ok(inputs)
}

/// Config fields a stage depends on.
pub fn snapshot(cfg: &PipelineConfig, stage: Stage) -> Value {
    match stage {
        Stage::GenCorpus => json!({ "seed": cfg.seed, "corpus": cfg.corpus }),
        Stage::TrainLm => json!({ "seed": cfg.seed, "model": cfg.model }),
        Stage::DumpActs => json!({ "hookpoint": cfg.saliency.hookpoint }),
        Stage::Topk => json!({ "seed": cfg.seed, "saliency": cfg.saliency }),
        Stage::TrainSae => json!({ "seed": cfg.seed, "sae": cfg.sae, "ensemble": cfg.curation.ensemble }),
        Stage::Embed => json!({}),
        Stage::Curate => json!({ "curation": cfg.curation, "selector": cfg.saliency.selector }),
        Stage::Prune => json!({ "prune": cfg.prune }),
        Stage::Distill => json!({ "seed": cfg.seed, "distill": cfg.distill }),
        Stage::Finetune => json!({ "seed": cfg.seed, "finetune": cfg.finetune }),
        Stage::Eval => json!({}),
        Stage::Sweep => json!({ "seed": cfg.seed, "eval": cfg.eval, "finetune": cfg.finetune }),
        Stage::Report => json!({}),
    }
}

/// Execute one stage (or confirm it is current) and return its manifest.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, force: bool) -> Result<RunManifest> {
    let inputs = gather_inputs(cfg, stage)?;
    let config = snapshot(cfg, stage);
    let dir = stage_dir(cfg, stage);
    if !force {
        if let Ok(old) = load_manifest(&cfg.workspace, stage) {
            if old.inputs == inputs && old.config == config && verify_outputs(&cfg.workspace, stage, &old).is_ok() {
                return Ok(RunManifest { noop: true, ..old });
            }
        }
    }
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let start = Instant::now();
    execute(cfg, stage, &dir)?;
    let manifest = RunManifest {
        stage: stage.name().into(),
        inputs,
        outputs: checksums(&dir)?,
        wall_time_ms: start.elapsed().as_millis() as u64,
        config,
        noop: false,
    };
    io::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Every stage in order.
pub fn run_pipeline(cfg: &PipelineConfig, force: bool) -> Result<Vec<RunManifest>> {
    Stage::ALL.iter().map(|&s| run_stage(cfg, s, force)).collect()
}

fn ws(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    stage_dir(cfg, stage)
}

fn load_corpus(cfg: &PipelineConfig) -> Result<(Corpus, Splits)> {
    let d = ws(cfg, Stage::GenCorpus);
    Ok((Corpus::load(&d.join("corpus.jsonl"))?, io::read_json(&d.join("splits.json"))?))
}

fn load_teacher(cfg: &PipelineConfig) -> Result<ModelState> {
    ModelState::load(&ws(cfg, Stage::TrainLm).join("model"))
}

fn selectors(cfg: &PipelineConfig) -> Vec<Selector> {
    if cfg.saliency.ablation {
        Selector::ALL.to_vec()
    } else {
        vec![cfg.saliency.selector]
    }
}

fn load_curated(cfg: &PipelineConfig, selector: Selector) -> Result<CuratedSet> {
    io::read_json(&ws(cfg, Stage::Curate).join(format!("{}.json", selector.name())))
}

fn save_tuned(dir: &Path, t: &Finetuned) -> Result<()> {
    t.model.save(&dir.join("model"))?;
    if let Some(a) = &t.adapters {
        a.save(&dir.join("adapter"))?;
    }
    let mut csv = String::from("step,loss\n");
    for (i, l) in t.trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    io::write_bytes(&dir.join("loss.csv"), csv.as_bytes())
}

fn load_tuned(dir: &Path) -> Result<Finetuned> {
    let adapter = dir.join("adapter");
    Ok(Finetuned {
        model: ModelState::load(&dir.join("model"))?,
        adapters: if adapter.exists() { Some(AdapterSet::load(&adapter)?) } else { None },
        trace: Vec::new(),
    })
}

pub const CONDITION_DIRS: [&str; 3] = ["random", "curated", "tgd"];

fn execute(cfg: &PipelineConfig, stage: Stage, dir: &Path) -> Result<()> {
    match stage {
        Stage::GenCorpus => {
            let (corpus, splits) = ex::generate_corpus(cfg)?;
            corpus.save(&dir.join("corpus.jsonl"))?;
            io::write_json(&dir.join("splits.json"), &splits)
        }
        Stage::TrainLm => {
            let (corpus, splits) = load_corpus(cfg)?;
            let (model, trace) = ex::pretrain(cfg, &corpus, &splits)?;
            model.save(&dir.join("model"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in trace.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            io::write_bytes(&dir.join("loss.csv"), csv.as_bytes())
        }
        Stage::DumpActs => {
            let (corpus, splits) = load_corpus(cfg)?;
            let model = load_teacher(cfg)?;
            ex::reference_dump(cfg, &model, &corpus, &splits)?.save(dir, "reference")
        }
        Stage::Topk => {
            let (corpus, splits) = load_corpus(cfg)?;
            let model = load_teacher(cfg)?;
            let dump = ActivationDump::load(&ws(cfg, Stage::DumpActs), "reference")?;
            for sel in selectors(cfg) {
                ex::saliency_for(cfg, &model, &corpus, &splits, &dump, sel)?.save(&dir.join(sel.name()))?;
            }
            Ok(())
        }
        Stage::TrainSae => {
            let dump = ActivationDump::load(&ws(cfg, Stage::DumpActs), "reference")?;
            for sel in selectors(cfg) {
                let report = SaliencyReport::load(&ws(cfg, Stage::Topk).join(sel.name()))?;
                for (m, (sae, trace)) in ex::train_saes(cfg, &report, &dump)?.into_iter().enumerate() {
                    let d = dir.join(sel.name()).join(m.to_string());
                    sae.save(&d)?;
                    io::write_bytes(&d.join("loss.csv"), loss_trace_csv(&trace).as_bytes())?;
                }
            }
            Ok(())
        }
        Stage::Embed => {
            let (corpus, splits) = load_corpus(cfg)?;
            let model = load_teacher(cfg)?;
            for sel in selectors(cfg) {
                let report = SaliencyReport::load(&ws(cfg, Stage::Topk).join(sel.name()))?;
                for m in 0..cfg.curation.ensemble {
                    let sae = SaeState::load(&ws(cfg, Stage::TrainSae).join(sel.name()).join(m.to_string()))?;
                    let id = format!("{}/{m}", sel.name());
                    ex::embed_candidates(&model, &sae, &report, &corpus, &splits, &id)?
                        .save(&dir.join(sel.name()), &m.to_string())?;
                }
            }
            Ok(())
        }
        Stage::Curate => {
            let (corpus, splits) = load_corpus(cfg)?;
            let mut precision = BTreeMap::new();
            for sel in selectors(cfg) {
                let indices = (0..cfg.curation.ensemble)
                    .map(|m| EmbeddingIndex::load(&ws(cfg, Stage::Embed).join(sel.name()), &m.to_string()))
                    .collect::<Result<Vec<_>>>()?;
                let set = ex::curate_indices(cfg, &indices, &splits)?;
                precision.insert(sel.name(), set.precision(&corpus, &splits.target_domain));
                io::write_json(&dir.join(format!("{}.json", sel.name())), &set)?;
            }
            io::write_json(&dir.join("precision.json"), &precision)
        }
        Stage::Prune => {
            let (corpus, _) = load_corpus(cfg)?;
            let teacher = load_teacher(cfg)?;
            let curated = load_curated(cfg, cfg.saliency.selector)?;
            let table = ex::importance(&teacher, &corpus, &curated.ids(), "curated")?;
            io::write_bytes(&dir.join("importance.csv"), table.to_csv().as_bytes())?;
            prune(&teacher, &table, cfg.prune.ratio)?.save(&dir.join("model"))
        }
        Stage::Distill => {
            let (corpus, _) = load_corpus(cfg)?;
            let teacher = load_teacher(cfg)?;
            let curated = load_curated(cfg, cfg.saliency.selector)?;
            let set = ex::distill_set(cfg, &teacher, &corpus, &curated.ids())?;
            save_distilled(&dir.join("distilled.jsonl"), &set)
        }
        Stage::Finetune => {
            let (corpus, splits) = load_corpus(cfg)?;
            let pruned = PrunedModel::load(&ws(cfg, Stage::Prune).join("model"))?;
            let curated = load_curated(cfg, cfg.saliency.selector)?.ids();
            let random_ids = ex::random_subset(&splits, curated.len(), derive_seed(cfg.seed, "random-subset"));
            io::write_json(&dir.join("random_subset.json"), &random_ids)?;
            let set = load_distilled(&ws(cfg, Stage::Distill).join("distilled.jsonl"))?;
            save_tuned(&dir.join("random"), &ex::tune_plain(cfg, &pruned.model, &corpus, &random_ids)?)?;
            save_tuned(&dir.join("curated"), &ex::tune_plain(cfg, &pruned.model, &corpus, &curated)?)?;
            save_tuned(&dir.join("tgd"), &ex::tune_tgd(cfg, &pruned.model, &set)?)
        }
        Stage::Eval => {
            let (corpus, splits) = load_corpus(cfg)?;
            let teacher = load_teacher(cfg)?;
            let pruned = PrunedModel::load(&ws(cfg, Stage::Prune).join("model"))?.model;
            let tuned = CONDITION_DIRS
                .iter()
                .map(|c| load_tuned(&ws(cfg, Stage::Finetune).join(c)))
                .collect::<Result<Vec<_>>>()?;
            let losses = ex::ConditionLosses {
                unpruned: ex::eval_loss(&teacher, &corpus, &splits, None)?,
                pruned: ex::eval_loss(&pruned, &corpus, &splits, None)?,
                pruned_random: ex::eval_loss(&pruned, &corpus, &splits, Some(&tuned[0]))?,
                pruned_curated: ex::eval_loss(&pruned, &corpus, &splits, Some(&tuned[1]))?,
                pruned_tgd: ex::eval_loss(&pruned, &corpus, &splits, Some(&tuned[2]))?,
            };
            io::write_json(&dir.join("losses.json"), &losses)
        }
        Stage::Sweep => {
            let (corpus, splits) = load_corpus(cfg)?;
            let teacher = load_teacher(cfg)?;
            let curated = load_curated(cfg, cfg.saliency.selector)?.ids();
            let rows = ex::ratio_curve(cfg, &teacher, &corpus, &splits, &curated)?;
            io::write_json(&dir.join("sweep.json"), &rows)
        }
        Stage::Report => report::write(&cfg.workspace, dir),
    }
}
