// SPDX-License-Identifier: MIT OR Apache-2.0

//! Summary tables over a workspace.
//!
//! Files written by [`write`]:
//!
//! | file             | columns                                         |
//! |------------------|-------------------------------------------------|
//! | `conditions.csv` | `condition,domain_loss`                         |
//! | `sweep.csv`      | `ratio,curated_loss,random_loss,params`         |
//! | `selectors.csv`  | `selector,precision,curated`                    |
//! | `report.json`    | the three tables as arrays of objects           |
//!
//! Missing upstream outputs give tables with zero rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{ConditionLosses, SweepRow};
use crate::curation::CuratedSet;
use crate::error::Result;
use crate::io;
use crate::saliency::Selector;

pub const CONDITIONS_HEADER: &str = "condition,domain_loss";
pub const SWEEP_HEADER: &str = "ratio,curated_loss,random_loss,params";
pub const SELECTORS_HEADER: &str = "selector,precision,curated";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub domain_loss: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorRow {
    pub selector: String,
    pub precision: f32,
    pub curated: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub conditions: Vec<ConditionRow>,
    pub sweep: Vec<SweepRow>,
    pub selectors: Vec<SelectorRow>,
}

fn read_if<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        Ok(Some(io::read_json(path)?))
    } else {
        Ok(None)
    }
}

/// Collect the tables from `workspace`.
pub fn build(workspace: &Path) -> Result<Report> {
    let mut r = Report::default();
    if let Some(l) = read_if::<ConditionLosses>(&workspace.join("eval/losses.json"))? {
        r.conditions = l
            .rows()
            .iter()
            .map(|(c, v)| ConditionRow {
                condition: c.to_string(),
                domain_loss: *v,
            })
            .collect();
    }
    if let Some(rows) = read_if::<Vec<SweepRow>>(&workspace.join("sweep/sweep.json"))? {
        r.sweep = rows;
    }
    if let Some(p) = read_if::<BTreeMap<String, f32>>(&workspace.join("curate/precision.json"))? {
        for sel in Selector::ALL {
            let Some(&precision) = p.get(sel.name()) else { continue };
            let set: CuratedSet = io::read_json(&workspace.join(format!("curate/{}.json", sel.name())))?;
            r.selectors.push(SelectorRow {
                selector: sel.name().into(),
                precision,
                curated: set.entries.len(),
            });
        }
    }
    Ok(r)
}

impl Report {
    pub fn conditions_csv(&self) -> String {
        let mut s = format!("{CONDITIONS_HEADER}\n");
        for c in &self.conditions {
            let _ = writeln!(s, "{},{}", c.condition, c.domain_loss);
        }
        s
    }

    pub fn sweep_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.sweep {
            let _ = writeln!(s, "{},{},{},{}", r.ratio, r.curated_loss, r.random_loss, r.params);
        }
        s
    }

    pub fn selectors_csv(&self) -> String {
        let mut s = format!("{SELECTORS_HEADER}\n");
        for r in &self.selectors {
            let _ = writeln!(s, "{},{},{}", r.selector, r.precision, r.curated);
        }
        s
    }
}

/// Build the report for `workspace` and write it into `out`.
pub fn write(workspace: &Path, out: &Path) -> Result<()> {
    let r = build(workspace)?;
    io::write_bytes(&out.join("conditions.csv"), r.conditions_csv().as_bytes())?;
    io::write_bytes(&out.join("sweep.csv"), r.sweep_csv().as_bytes())?;
    io::write_bytes(&out.join("selectors.csv"), r.selectors_csv().as_bytes())?;
    io::write_json(&out.join("report.json"), &r)
}
