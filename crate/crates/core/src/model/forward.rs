// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use super::{layer_key, ActivationRecord, AdapterSet, Hookpoint, ModelState, Site};
use crate::autodiff::{Graph, Leaf, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// How the embedding activations enter the graph.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum EmbedMode<'a> {
    /// Looked up from the embedding tables (trainable when params are).
    #[default]
    FromParams,
    /// Precomputed `e(x)` recorded as a differentiable input leaf; the
    /// embedding tables are not part of the graph.
    AsInput,
    /// A caller-supplied `[T, d_model]` tensor recorded as the input leaf.
    Given(&'a Tensor),
}

/// Which leaves receive gradients/tangents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Trainable {
    /// Every model parameter is a constant.
    #[default]
    Frozen,
    /// Every model parameter is trainable.
    All,
    /// Base weights frozen, adapter factors trainable.
    AdaptersOnly,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BuildOptions<'a> {
    pub embed: EmbedMode<'a>,
    pub trainable: Trainable,
    /// Insert unit gates on every head and feed-forward channel.
    pub gates: bool,
    pub adapters: Option<&'a AdapterSet>,
    /// Stop after this layer (no logits are produced).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerHooks {
    pub post_attention: NodeId,
    pub post_mlp: NodeId,
    pub residual_out: NodeId,
    /// Concatenated per-head attention outputs before the output projection.
    pub head_outputs: NodeId,
    /// Feed-forward hidden activations after ReLU.
    pub ff_hidden: NodeId,
}

impl LayerHooks {
    pub fn site(&self, site: Site) -> NodeId {
        match site {
            Site::PostAttention => self.post_attention,
            Site::PostMlp => self.post_mlp,
            Site::ResidualOut => self.residual_out,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub embed: NodeId,
    pub layers: Vec<LayerHooks>,
    pub logits: Option<NodeId>,
    pub params: BTreeMap<String, NodeId>,
    pub adapter_params: BTreeMap<String, NodeId>,
    pub head_gates: Vec<NodeId>,
    pub ff_gates: Vec<NodeId>,
}

impl Trace {
    pub fn hook(&self, hook: Hookpoint) -> NodeId {
        self.layers[hook.layer].site(hook.site)
    }
}

struct Builder<'g, 'o> {
    g: &'g mut Graph,
    model: &'o ModelState,
    opts: BuildOptions<'o>,
    params: BTreeMap<String, NodeId>,
    adapter_params: BTreeMap<String, NodeId>,
}

impl Builder<'_, '_> {
    fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let kind = match self.opts.trainable {
            Trainable::All => Leaf::Param,
            _ => Leaf::Const,
        };
        let id = self.g.leaf(kind, self.model.param(name)?.clone());
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x W` plus the low-rank adapter term when one targets `name`.
    fn project(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.p(name)?;
        let base = self.g.matmul(x, w)?;
        let Some(adapters) = self.opts.adapters else {
            return Ok(base);
        };
        let Some((a, b)) = adapters.factors(name) else {
            return Ok(base);
        };
        let kind = match self.opts.trainable {
            Trainable::Frozen => Leaf::Const,
            _ => Leaf::Param,
        };
        let an = self.g.leaf(kind, a.clone());
        let bn = self.g.leaf(kind, b.clone());
        self.adapter_params.insert(AdapterSet::a_key(name), an);
        self.adapter_params.insert(AdapterSet::b_key(name), bn);
        let xa = self.g.matmul(x, an)?;
        let xab = self.g.matmul(xa, bn)?;
        let scaled = self.g.scale(xab, adapters.config.scaling)?;
        self.g.add(base, scaled)
    }
}

impl ModelState {
    /// `e(x)`: token embedding plus positional embedding, `[T, d_model]`.
    pub fn embedding_activations(&self, tokens: &[u32]) -> Result<Tensor> {
        self.validate_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = self.param("tok_emb")?.select_rows(&ids)?;
        let pos = self
            .param("pos_emb")?
            .select_rows(&(0..tokens.len()).collect::<Vec<_>>())?;
        tok.add(&pos)
    }

    /// Record the forward pass for `tokens` on `g`.
    pub fn build(&self, g: &mut Graph, tokens: &[u32], opts: BuildOptions<'_>) -> Result<Trace> {
        self.validate_tokens(tokens)?;
        let cfg = &self.config;
        let dh = cfg.d_head();
        let seq = tokens.len();
        let mut b = Builder {
            g,
            model: self,
            opts,
            params: BTreeMap::new(),
            adapter_params: BTreeMap::new(),
        };

        let embed = match opts.embed {
            EmbedMode::AsInput => b.g.input(self.embedding_activations(tokens)?),
            EmbedMode::Given(e) => {
                if e.shape() != [seq, cfg.d_model] {
                    return Err(crate::error::Error::Dimension(format!(
                        "embedding override {:?}, expected [{seq}, {}]",
                        e.shape(),
                        cfg.d_model
                    )));
                }
                b.g.input(e.clone())
            }
            EmbedMode::FromParams => {
                let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                let tok_table = b.p("tok_emb")?;
                let pos_table = b.p("pos_emb")?;
                let tok = b.g.embedding(tok_table, &ids)?;
                let pos = b.g.embedding(pos_table, &(0..seq).collect::<Vec<_>>())?;
                b.g.add(tok, pos)?
            }
        };

        let shapes = self.layer_shapes();
        let last = opts.stop_after.unwrap_or(cfg.n_layers - 1);
        let mut x = embed;
        let mut layers = Vec::new();
        let mut head_gates = Vec::new();
        let mut ff_gates = Vec::new();
        let scale = 1.0 / (dh as f32).sqrt();
        for (l, shape) in shapes.iter().enumerate().take(last + 1) {
            let k = |n: &str| layer_key(l, n);
            let (g1, b1) = (b.p(&k("ln1.gain"))?, b.p(&k("ln1.bias"))?);
            let h = b.g.layer_norm(x, g1, b1)?;
            let q = b.project(h, &k("attn.wq"))?;
            let kk = b.project(h, &k("attn.wk"))?;
            let v = b.project(h, &k("attn.wv"))?;
            let mut heads = Vec::with_capacity(shape.heads);
            for hd in 0..shape.heads {
                let qh = b.g.slice_cols(q, hd * dh, dh)?;
                let kh = b.g.slice_cols(kk, hd * dh, dh)?;
                let vh = b.g.slice_cols(v, hd * dh, dh)?;
                let kt = b.g.transpose(kh)?;
                let scores = b.g.matmul(qh, kt)?;
                let scores = b.g.scale(scores, scale)?;
                let attn = b.g.softmax(scores, true)?;
                heads.push(b.g.matmul(attn, vh)?);
            }
            let mut head_out = b.g.concat_cols(&heads)?;
            if opts.gates {
                let gate = b.g.param(Tensor::ones(&[shape.heads]));
                head_gates.push(gate);
                let expanded = b.g.repeat_each(gate, dh)?;
                head_out = b.g.mul_cols(head_out, expanded)?;
            }
            let proj = b.project(head_out, &k("attn.wo"))?;
            let bo = b.p(&k("attn.bo"))?;
            let post_attention = b.g.add_row(proj, bo)?;
            x = b.g.add(x, post_attention)?;

            let (g2, b2) = (b.p(&k("ln2.gain"))?, b.p(&k("ln2.bias"))?);
            let h2 = b.g.layer_norm(x, g2, b2)?;
            let w1 = b.p(&k("mlp.w1"))?;
            let pre = b.g.matmul(h2, w1)?;
            let bias1 = b.p(&k("mlp.b1"))?;
            let pre = b.g.add_row(pre, bias1)?;
            let mut hidden = b.g.relu(pre)?;
            if opts.gates {
                let gate = b.g.param(Tensor::ones(&[shape.ff]));
                ff_gates.push(gate);
                hidden = b.g.mul_cols(hidden, gate)?;
            }
            let w2 = b.p(&k("mlp.w2"))?;
            let out = b.g.matmul(hidden, w2)?;
            let bias2 = b.p(&k("mlp.b2"))?;
            let post_mlp = b.g.add_row(out, bias2)?;
            x = b.g.add(x, post_mlp)?;
            layers.push(LayerHooks {
                post_attention,
                post_mlp,
                residual_out: x,
                head_outputs: head_out,
                ff_hidden: hidden,
            });
        }

        let logits = if last + 1 == cfg.n_layers {
            let (gf, bf) = (b.p("ln_f.gain")?, b.p("ln_f.bias")?);
            let hf = b.g.layer_norm(x, gf, bf)?;
            let head = b.p("lm_head")?;
            Some(b.g.matmul(hf, head)?)
        } else {
            None
        };

        Ok(Trace {
            embed,
            layers,
            logits,
            params: b.params,
            adapter_params: b.adapter_params,
            head_gates,
            ff_gates,
        })
    }

    /// Next-token logits, `[T, vocab]`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward_with(tokens, None)
    }

    pub fn forward_with(&self, tokens: &[u32], adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let mut g = Graph::new();
        let trace = self.build(
            &mut g,
            tokens,
            BuildOptions {
                adapters,
                ..Default::default()
            },
        )?;
        let logits = trace.logits.expect("full forward produces logits");
        Ok(g.value(logits).clone())
    }

    /// Output distribution: softmax of the final projection, one row per position.
    pub fn forward_probs(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let trace = self.build(&mut g, tokens, BuildOptions::default())?;
        let probs = g.softmax(trace.logits.expect("full forward"), false)?;
        Ok(g.value(probs).clone())
    }

    /// Per-position activations `[T, d_model]` at `hook`.
    pub fn hook_activations(&self, tokens: &[u32], hook: Hookpoint) -> Result<Tensor> {
        self.validate_hookpoint(hook)?;
        let mut g = Graph::new();
        let trace = self.build(
            &mut g,
            tokens,
            BuildOptions {
                stop_after: Some(hook.layer),
                ..Default::default()
            },
        )?;
        Ok(g.value(trace.hook(hook)).clone())
    }

    /// Mean over positions of the activations at `hook`.
    pub fn capture(&self, sample_id: &str, tokens: &[u32], hook: Hookpoint) -> Result<ActivationRecord> {
        let acts = self.hook_activations(tokens, hook)?;
        Ok(ActivationRecord {
            sample_id: sample_id.to_string(),
            hookpoint: hook,
            pooled: acts.mean_rows(),
        })
    }

    /// Record `a(x)` as a function of `e(x)` on `g`: returns (input node, pooled node).
    pub fn build_pooled(&self, g: &mut Graph, tokens: &[u32], hook: Hookpoint) -> Result<(NodeId, NodeId)> {
        self.validate_hookpoint(hook)?;
        let trace = self.build(
            g,
            tokens,
            BuildOptions {
                embed: EmbedMode::AsInput,
                stop_after: Some(hook.layer),
                ..Default::default()
            },
        )?;
        let pooled = g.mean_rows(trace.hook(hook))?;
        Ok((trace.embed, pooled))
    }

    /// Pooled activation at `hook` computed from an arbitrary `e(x)` in place of
    /// the embedding lookup. Used by finite-difference oracles.
    pub fn pooled_from_embedding(&self, tokens: &[u32], embed: &Tensor, hook: Hookpoint) -> Result<Tensor> {
        self.validate_hookpoint(hook)?;
        let mut g = Graph::new();
        let trace = self.build(
            &mut g,
            tokens,
            BuildOptions {
                embed: EmbedMode::Given(embed),
                stop_after: Some(hook.layer),
                ..Default::default()
            },
        )?;
        let pooled = g.mean_rows(trace.hook(hook))?;
        Ok(g.value(pooled).clone())
    }
}
