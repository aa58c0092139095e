// SPDX-License-Identifier: MIT OR Apache-2.0

//! Configuration-driven orchestration of every stage.

mod config;
pub mod experiment;
pub mod report;
mod stages;

pub use config::{
    derive_seed, CorpusSection, CurationSection, DistillSection, EvalSection, FinetuneSection, ModelSection,
    PipelineConfig, PruneSection, SaeSection, SaliencySection,
};
pub use stages::{load_manifest, run_pipeline, run_stage, snapshot, RunManifest, Stage, WorkspaceLock, LOCK, MANIFEST};
