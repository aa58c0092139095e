// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationRecord, Corpus, Hookpoint, ModelState};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

/// Pooled activations of many samples at one hookpoint, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub hookpoint: Hookpoint,
    pub ids: Vec<String>,
    pub matrix: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpIndex {
    hookpoint: Hookpoint,
    tensor: String,
    rows: BTreeMap<String, usize>,
}

impl ActivationDump {
    pub fn new(hookpoint: Hookpoint, ids: Vec<String>, matrix: Tensor) -> Result<Self> {
        if matrix.ndim() != 2 || matrix.rows() != ids.len() {
            return Err(Error::Dimension(format!(
                "dump matrix {:?} for {} ids",
                matrix.shape(),
                ids.len()
            )));
        }
        Ok(Self {
            hookpoint,
            ids,
            matrix,
        })
    }

    pub fn capture(model: &ModelState, corpus: &Corpus, hookpoint: Hookpoint) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot dump activations of an empty corpus".into()));
        }
        let rows = corpus
            .samples
            .iter()
            .map(|s| Ok(model.capture(&s.id, &s.tokens, hookpoint)?.pooled))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            hookpoint,
            corpus.samples.iter().map(|s| s.id.clone()).collect(),
            Tensor::stack(&rows)?,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.matrix.cols()
    }

    pub fn record(&self, row: usize) -> ActivationRecord {
        ActivationRecord {
            sample_id: self.ids[row].clone(),
            hookpoint: self.hookpoint,
            pooled: Tensor::from_vec(self.matrix.row(row).to_vec()),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = ActivationRecord> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    /// Rows for `ids`, in the order given.
    pub fn rows_for(&self, ids: &[String]) -> Result<Tensor> {
        let index: BTreeMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let rows = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Input(format!("sample `{id}` not in activation dump")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.matrix.select_rows(&rows)
    }

    /// Writes `{stem}.fstn` and the `{stem}.json` index.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let tensor = format!("{stem}.fstn");
        io::write_fstn(&dir.join(&tensor), &self.matrix)?;
        let rows = self.ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        io::write_json(
            &dir.join(format!("{stem}.json")),
            &DumpIndex {
                hookpoint: self.hookpoint,
                tensor,
                rows,
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let idx: DumpIndex = io::read_json(&dir.join(format!("{stem}.json")))?;
        let matrix = io::read_fstn(&dir.join(&idx.tensor))?;
        let mut ids = vec![None; idx.rows.len()];
        for (id, row) in idx.rows {
            let slot = ids
                .get_mut(row)
                .ok_or_else(|| Error::Format(format!("dump row {row} out of range")))?;
            if slot.replace(id).is_some() {
                return Err(Error::Format(format!("dump row {row} assigned twice")));
            }
        }
        let ids = ids
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Format("dump index has gaps".into()))?;
        Self::new(idx.hookpoint, ids, matrix)
    }
}
