// SPDX-License-Identifier: MIT OR Apache-2.0

//! Structured pruning of attention heads and feed-forward channels.
//!
//! Every group gets a unit gate `α_b` on its output `h_b`. Removing the group
//! sets `α_b` to 0, and to first order the loss changes by
//! `-∂L/∂α_b = -⟨∂L/∂h_b, h_b⟩`. The gate gradients come out of one reverse
//! pass per sample; the importance is the magnitude of their mean.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::distill::evaluate_domain_loss;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{layer_key, next_token_targets, BuildOptions, ModelState, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupKind {
    #[serde(rename = "attention-head")]
    Head,
    #[serde(rename = "ff-channel")]
    Channel,
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKind::Head => "attention-head",
            GroupKind::Channel => "ff-channel",
        })
    }
}

/// One removable unit. Ordering is (layer, kind, index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PruneGroup {
    pub kind: GroupKind,
    pub layer: usize,
    pub index: usize,
}

impl PartialOrd for PruneGroup {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PruneGroup {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.layer, self.kind, self.index).cmp(&(other.layer, other.kind, other.index))
    }
}

/// A parameter range owned by a group: `rows` or `cols` of `param`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice {
    pub param: String,
    pub axis: usize,
    pub start: usize,
    pub len: usize,
}

impl PruneGroup {
    pub fn head(layer: usize, index: usize) -> Self {
        Self {
            kind: GroupKind::Head,
            layer,
            index,
        }
    }

    pub fn channel(layer: usize, index: usize) -> Self {
        Self {
            kind: GroupKind::Channel,
            layer,
            index,
        }
    }

    /// Parameter slices removed together with this group.
    pub fn slices(&self, model: &ModelState) -> Vec<Slice> {
        let k = |n: &str| layer_key(self.layer, n);
        let s = |param: String, axis, start, len| Slice {
            param,
            axis,
            start,
            len,
        };
        match self.kind {
            GroupKind::Head => {
                let dh = model.config.d_head();
                let at = self.index * dh;
                vec![
                    s(k("attn.wq"), 1, at, dh),
                    s(k("attn.wk"), 1, at, dh),
                    s(k("attn.wv"), 1, at, dh),
                    s(k("attn.wo"), 0, at, dh),
                ]
            }
            GroupKind::Channel => vec![
                s(k("mlp.w1"), 1, self.index, 1),
                s(k("mlp.b1"), 0, self.index, 1),
                s(k("mlp.w2"), 0, self.index, 1),
            ],
        }
    }

    pub fn param_count(&self, model: &ModelState) -> usize {
        let d = model.config.d_model;
        match self.kind {
            GroupKind::Head => 4 * d * model.config.d_head(),
            GroupKind::Channel => 2 * d + 1,
        }
    }
}

/// Every group of `model`, in (layer, kind, index) order.
pub fn groups(model: &ModelState) -> Vec<PruneGroup> {
    let mut out = Vec::new();
    for (l, shape) in model.layer_shapes().iter().enumerate() {
        out.extend((0..shape.heads).map(|h| PruneGroup::head(l, h)));
        out.extend((0..shape.ff).map(|c| PruneGroup::channel(l, c)));
    }
    out
}

/// Parameters covered by some group in the unpruned architecture.
pub fn original_prunable(model: &ModelState) -> usize {
    let c = &model.config;
    c.n_layers * (4 * c.d_model * c.d_model + c.d_ff * (2 * c.d_model + 1))
}

/// Parameters covered by some group in `model`.
pub fn current_prunable(model: &ModelState) -> usize {
    groups(model).iter().map(|g| g.param_count(model)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub scores: Vec<(PruneGroup, f32)>,
    pub dataset_id: String,
    pub samples_used: usize,
}

impl ImportanceTable {
    pub fn score(&self, g: &PruneGroup) -> Option<f32> {
        self.scores.iter().find(|(x, _)| x == g).map(|(_, s)| *s)
    }

    pub fn values(&self) -> Vec<f32> {
        self.scores.iter().map(|(_, s)| *s).collect()
    }

    /// `kind,layer,index,score` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,layer,index,score\n");
        for (g, v) in &self.scores {
            let _ = writeln!(s, "{},{},{},{}", g.kind, g.layer, g.index, v);
        }
        s
    }

    pub fn from_csv(text: &str, dataset_id: &str, samples_used: usize) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("kind,layer,index,score") {
            return Err(Error::Format("importance CSV header mismatch".into()));
        }
        let bad = |l: &str| Error::Format(format!("bad importance row `{l}`"));
        let scores = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(bad(l));
                }
                let kind = match f[0] {
                    "attention-head" => GroupKind::Head,
                    "ff-channel" => GroupKind::Channel,
                    _ => return Err(bad(l)),
                };
                Ok((
                    PruneGroup {
                        kind,
                        layer: f[1].parse().map_err(|_| bad(l))?,
                        index: f[2].parse().map_err(|_| bad(l))?,
                    },
                    f[3].parse().map_err(|_| bad(l))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scores,
            dataset_id: dataset_id.into(),
            samples_used,
        })
    }

    fn check_covers(&self, model: &ModelState) -> Result<()> {
        let mut mine: Vec<PruneGroup> = self.scores.iter().map(|(g, _)| *g).collect();
        mine.sort();
        if mine != groups(model) {
            return Err(Error::Consistency(
                "importance table does not cover the model's groups exactly once".into(),
            ));
        }
        if self.scores.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::Numeric("non-finite importance score".into()));
        }
        Ok(())
    }
}

/// Signed per-group `mean_x ∂L/∂α_b` over `dataset` with next-token
/// cross-entropy.
pub fn gate_gradients(model: &ModelState, dataset: &[&Sample]) -> Result<Vec<(PruneGroup, f64)>> {
    if dataset.is_empty() {
        return Err(Error::Input("importance needs a non-empty dataset".into()));
    }
    let all = groups(model);
    let mut acc = vec![0.0f64; all.len()];
    let mut used = 0usize;
    for s in dataset {
        if s.tokens.len() < 2 {
            continue;
        }
        let mut g = Graph::new();
        let trace = model.build(
            &mut g,
            &s.tokens,
            BuildOptions {
                gates: true,
                ..Default::default()
            },
        )?;
        let loss = g.cross_entropy(trace.logits.expect("full forward"), &next_token_targets(&s.tokens))?;
        let grads = g.backward(loss)?;
        let mut k = 0;
        for (hg, fg) in trace.head_gates.iter().zip(&trace.ff_gates) {
            for gate in [hg, fg] {
                let gr = grads.get(*gate).expect("gates are tracked");
                for &v in gr.data() {
                    acc[k] += v as f64;
                    k += 1;
                }
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Input("no dataset sample has >= 2 tokens".into()));
    }
    Ok(all
        .into_iter()
        .zip(acc)
        .map(|(g, a)| (g, a / used as f64))
        .collect())
}

/// `|mean ⟨∂L/∂h_b, h_b⟩|` per group.
pub fn group_importance(model: &ModelState, dataset: &[&Sample], dataset_id: &str) -> Result<ImportanceTable> {
    let grads = gate_gradients(model, dataset)?;
    let scores = grads.into_iter().map(|(g, v)| (g, v.abs() as f32)).collect();
    Ok(ImportanceTable {
        scores,
        dataset_id: dataset_id.into(),
        samples_used: dataset.iter().filter(|s| s.tokens.len() >= 2).count(),
    })
}

/// L2 norm of each group's parameter slices.
pub fn magnitude_importance(model: &ModelState) -> Result<ImportanceTable> {
    let scores = groups(model)
        .into_iter()
        .map(|g| {
            let mut sq = 0.0f64;
            for sl in g.slices(model) {
                let t = model.param(&sl.param)?;
                for v in slice_values(t, &sl) {
                    sq += (v as f64).powi(2);
                }
            }
            Ok((g, sq.sqrt() as f32))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceTable {
        scores,
        dataset_id: "magnitude".into(),
        samples_used: 0,
    })
}

fn slice_values(t: &Tensor, sl: &Slice) -> Vec<f32> {
    if t.ndim() == 1 {
        return t.data()[sl.start..sl.start + sl.len].to_vec();
    }
    let mut out = Vec::new();
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            let k = if sl.axis == 0 { i } else { j };
            if k >= sl.start && k < sl.start + sl.len {
                out.push(t.at(i, j));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalManifest {
    pub ratio: f32,
    pub removed: Vec<PruneGroup>,
    pub parent_checksum: String,
    /// Parameters covered by groups in the unpruned architecture; embeddings,
    /// layer norms, output biases and the output head are excluded.
    pub prunable_base: usize,
    pub prunable_before: usize,
    pub prunable_after: usize,
    pub total_params_before: usize,
    pub total_params_after: usize,
}

#[derive(Clone, Debug)]
pub struct PrunedModel {
    pub model: ModelState,
    pub manifest: RemovalManifest,
}

impl PrunedModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        io::write_json(&dir.join("removal.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            model: ModelState::load(dir)?,
            manifest: io::read_json(&dir.join("removal.json"))?,
        })
    }

    /// Fraction of the unpruned prunable parameters removed so far.
    pub fn removed_fraction(&self) -> f32 {
        (1.0 - self.manifest.prunable_after as f64 / self.manifest.prunable_base as f64) as f32
    }
}

pub const MIN_HEADS: usize = 1;
pub const MIN_CHANNELS: usize = 8;

/// Remove the lowest-scoring groups until at least `ratio` of the original
/// prunable parameters are gone (counting earlier removals), keeping at least
/// one head and eight channels per layer. Ties go to (layer, kind, index).
pub fn prune(model: &ModelState, table: &ImportanceTable, ratio: f32) -> Result<PrunedModel> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    table.check_covers(model)?;
    let base = original_prunable(model);
    let before = current_prunable(model);
    // slack absorbs f32 rounding of a ratio read back from a manifest
    let target = (ratio as f64 * base as f64 * (1.0 - 1e-6)).ceil() as usize;
    let mut removed_params = base - before;
    let mut order = table.scores.clone();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let shapes = model.layer_shapes();
    let mut heads: Vec<usize> = shapes.iter().map(|s| s.heads).collect();
    let mut ff: Vec<usize> = shapes.iter().map(|s| s.ff).collect();
    let mut removed = Vec::new();
    for (g, _) in &order {
        if removed_params >= target {
            break;
        }
        let (count, floor) = match g.kind {
            GroupKind::Head => (&mut heads[g.layer], MIN_HEADS),
            GroupKind::Channel => (&mut ff[g.layer], MIN_CHANNELS.min(shapes[g.layer].ff)),
        };
        if *count <= floor {
            continue;
        }
        *count -= 1;
        removed_params += g.param_count(model);
        removed.push(*g);
    }
    if removed_params < target {
        return Err(Error::InfeasibleRatio(format!(
            "ratio {ratio} needs {target} of {base} prunable parameters removed; survivor floors allow {removed_params}"
        )));
    }
    removed.sort();
    let pruned = remove_groups(model, &removed)?;
    let manifest = RemovalManifest {
        ratio,
        removed,
        parent_checksum: model.checksum(),
        prunable_base: base,
        prunable_before: before,
        prunable_after: current_prunable(&pruned),
        total_params_before: model.num_params(),
        total_params_after: pruned.num_params(),
    };
    Ok(PrunedModel {
        model: pruned,
        manifest,
    })
}

/// Densified copy of `model` without `removed`.
pub fn remove_groups(model: &ModelState, removed: &[PruneGroup]) -> Result<ModelState> {
    let mut out = model.clone();
    let dh = model.config.d_head();
    for (l, shape) in model.layer_shapes().iter().enumerate() {
        let gone_heads: Vec<usize> = removed
            .iter()
            .filter(|g| g.layer == l && g.kind == GroupKind::Head)
            .map(|g| g.index)
            .collect();
        let gone_ff: Vec<usize> = removed
            .iter()
            .filter(|g| g.layer == l && g.kind == GroupKind::Channel)
            .map(|g| g.index)
            .collect();
        let keep_cols: Vec<usize> = (0..shape.heads)
            .filter(|h| !gone_heads.contains(h))
            .flat_map(|h| h * dh..(h + 1) * dh)
            .collect();
        let keep_ff: Vec<usize> = (0..shape.ff).filter(|c| !gone_ff.contains(c)).collect();
        if keep_cols.is_empty() || keep_ff.is_empty() {
            return Err(Error::InfeasibleRatio(format!("layer {l} would lose every head or channel")));
        }
        let k = |n: &str| layer_key(l, n);
        for w in ["attn.wq", "attn.wk", "attn.wv"] {
            let t = model.param(&k(w))?.select_cols(&keep_cols)?;
            out.params.insert(k(w), t);
        }
        let wo = model.param(&k("attn.wo"))?.select_rows(&keep_cols)?;
        out.params.insert(k("attn.wo"), wo);
        let w1 = model.param(&k("mlp.w1"))?.select_cols(&keep_ff)?;
        out.params.insert(k("mlp.w1"), w1);
        let b1 = model.param(&k("mlp.b1"))?;
        out.params.insert(
            k("mlp.b1"),
            Tensor::from_vec(keep_ff.iter().map(|&c| b1.data()[c]).collect()),
        );
        let w2 = model.param(&k("mlp.w2"))?.select_rows(&keep_ff)?;
        out.params.insert(k("mlp.w2"), w2);
    }
    out.check_shapes()?;
    Ok(out)
}

/// Copy of `model` with one group's output multiplied by `alpha`. `alpha = 0`
/// ablates the group while keeping every shape.
pub fn scale_group(model: &ModelState, group: PruneGroup, alpha: f32) -> Result<ModelState> {
    let mut out = model.clone();
    let Some(sl) = group
        .slices(model)
        .into_iter()
        .find(|sl| sl.param.ends_with("attn.wo") || sl.param.ends_with("mlp.w2"))
    else {
        return Err(Error::State("group has no output projection".into()));
    };
    let t = out
        .params
        .get_mut(&sl.param)
        .ok_or_else(|| Error::State(format!("missing parameter `{}`", sl.param)))?;
    let cols = t.cols();
    for row in sl.start..sl.start + sl.len {
        for v in &mut t.data_mut()[row * cols..(row + 1) * cols] {
            *v *= alpha;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f32,
    pub loss: f32,
    pub params: usize,
}

/// Prune at each ratio (each from the unpruned `model`) and evaluate.
pub fn ratio_sweep(
    model: &ModelState,
    table: &ImportanceTable,
    ratios: &[f32],
    eval: &[&Sample],
) -> Result<Vec<SweepPoint>> {
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sweep ratios must be strictly ascending".into()));
    }
    ratios
        .iter()
        .map(|&r| {
            let p = prune(model, table, r)?;
            Ok(SweepPoint {
                ratio: r,
                loss: evaluate_domain_loss(&p.model, eval, None)?,
                params: p.model.num_params(),
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("ratio,loss,params\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.ratio, p.loss, p.params);
    }
    s
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f32], b: &[f32]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f32]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::RngStream;

    fn toy() -> ModelState {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 16,
            max_seq_len: 8,
        };
        ModelState::init(cfg, &mut RngStream::new(0)).unwrap()
    }

    fn uniform_table(m: &ModelState) -> ImportanceTable {
        ImportanceTable {
            scores: groups(m).into_iter().map(|g| (g, 1.0)).collect(),
            dataset_id: "u".into(),
            samples_used: 0,
        }
    }

    #[test]
    fn group_counts_partition_prunable() {
        let m = toy();
        assert_eq!(groups(&m).len(), 2 * (4 + 16));
        assert_eq!(current_prunable(&m), original_prunable(&m));
    }

    #[test]
    fn tiny_ratio_removes_nothing() {
        let m = toy();
        let p = prune(&m, &uniform_table(&m), 0.0).unwrap();
        assert!(p.manifest.removed.is_empty());
        assert_eq!(p.model.checksum(), m.checksum());
    }

    #[test]
    fn uniform_scores_remove_in_group_order() {
        let m = toy();
        let p = prune(&m, &uniform_table(&m), 0.1).unwrap();
        assert_eq!(p.manifest.removed[0], PruneGroup::head(0, 0));
        let again = prune(&m, &uniform_table(&m), 0.1).unwrap();
        assert_eq!(p.manifest.removed, again.manifest.removed);
    }

    #[test]
    fn floors_and_infeasible_ratio() {
        let m = toy();
        let p = prune(&m, &uniform_table(&m), 0.6).unwrap();
        for s in p.model.layer_shapes() {
            assert!(s.heads >= MIN_HEADS && s.ff >= MIN_CHANNELS);
        }
        assert!(matches!(
            prune(&m, &uniform_table(&m), 0.95),
            Err(Error::InfeasibleRatio(_))
        ));
    }

    #[test]
    fn pruning_is_idempotent_at_reached_ratio() {
        let m = toy();
        let p = prune(&m, &uniform_table(&m), 0.3).unwrap();
        let t = uniform_table(&p.model);
        let q = prune(&p.model, &t, p.removed_fraction()).unwrap();
        assert!(q.manifest.removed.is_empty());
    }

    #[test]
    fn magnitude_of_zero_group_is_zero() {
        let mut m = toy();
        for w in ["attn.wq", "attn.wk", "attn.wv"] {
            let t = m.params.get_mut(&layer_key(1, w)).unwrap();
            let cols = t.cols();
            for i in 0..t.rows() {
                for j in 4..8 {
                    t.data_mut()[i * cols + j] = 0.0;
                }
            }
        }
        let wo = m.params.get_mut(&layer_key(1, "attn.wo")).unwrap();
        let cols = wo.cols();
        for i in 4..8 {
            for j in 0..cols {
                wo.data_mut()[i * cols + j] = 0.0;
            }
        }
        let t = magnitude_importance(&m).unwrap();
        assert_eq!(t.score(&PruneGroup::head(1, 1)), Some(0.0));
    }

    #[test]
    fn csv_round_trip() {
        let m = toy();
        let t = magnitude_importance(&m).unwrap();
        let back = ImportanceTable::from_csv(&t.to_csv(), "magnitude", 0).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
