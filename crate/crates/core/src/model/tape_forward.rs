//! Differentiable forward pass on a [`GradTape`].

use super::config::ModelConfig;
use super::engine::pool_mean_scores;
use super::weights::{AdapterSet, Backbone};
use crate::error::{Error, Result};
use crate::kb::KbStore;
use crate::numeric::{GradTape, ParamId, Tensor, Var};
use crate::retrieval::topk_indices;

/// First parameter id used for backbone weights.
pub const BACKBONE_PARAM_BASE: usize = 1000;

/// Parameter id of adapter `which` (0 query, 1 key, 2 value) at `layer`.
pub fn adapter_param_id(layer: usize, which: usize) -> ParamId {
    ParamId(layer * 3 + which)
}

/// Backbone weights as tape nodes, in [`Backbone::tensors`] order.
#[derive(Clone, Debug)]
pub struct TapeBackbone {
    vars: Vec<Var>,
    layers: usize,
}

impl TapeBackbone {
    /// Backbone as constants.
    pub fn constant(tape: &mut GradTape, bb: &Backbone) -> Self {
        let vars = bb.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
        Self { vars, layers: bb.blocks.len() }
    }

    /// Backbone as parameters `BACKBONE_PARAM_BASE + i`; the token embedding
    /// stays constant.
    pub fn register(tape: &mut GradTape, bb: &Backbone) -> Self {
        let vars = bb
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(i, t)| if i == 0 { tape.constant(t.clone()) } else { tape.param(ParamId(BACKBONE_PARAM_BASE + i), t.clone()) })
            .collect();
        Self { vars, layers: bb.blocks.len() }
    }

    fn tok_emb(&self) -> Var {
        self.vars[0]
    }
    fn pos_emb(&self) -> Var {
        self.vars[1]
    }
    fn block(&self, l: usize) -> &[Var] {
        &self.vars[2 + l * 12..2 + (l + 1) * 12]
    }
    fn head(&self) -> (Var, Var, Var) {
        let n = 2 + self.layers * 12;
        (self.vars[n], self.vars[n + 1], self.vars[n + 2])
    }
}

/// Adapters as tape nodes, `[query, key, value]` per layer.
#[derive(Clone, Debug)]
pub struct TapeAdapters {
    pub layers: Vec<[Var; 3]>,
}

impl TapeAdapters {
    /// Registers every adapter as parameter [`adapter_param_id`].
    pub fn register(tape: &mut GradTape, adapters: &AdapterSet) -> Self {
        let layers = adapters
            .layers()
            .iter()
            .enumerate()
            .map(|(l, a)| {
                [
                    tape.param(adapter_param_id(l, 0), a.query.clone()),
                    tape.param(adapter_param_id(l, 1), a.key.clone()),
                    tape.param(adapter_param_id(l, 2), a.value.clone()),
                ]
            })
            .collect();
        Self { layers }
    }

    pub fn constant(tape: &mut GradTape, adapters: &AdapterSet) -> Self {
        let layers = adapters
            .layers()
            .iter()
            .map(|a| [tape.constant(a.query.clone()), tape.constant(a.key.clone()), tape.constant(a.value.clone())])
            .collect();
        Self { layers }
    }

    /// Groups `3L` nodes in `layer * 3 + {query, key, value}` order.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.is_empty() || vars.len() % 3 != 0 {
            return Err(Error::Invalid(format!("{} adapter nodes is not a positive multiple of 3", vars.len())));
        }
        Ok(Self { layers: vars.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() })
    }
}

/// Which KB rows each layer attends to during a training pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainSelect {
    /// Every row at every layer.
    All,
    /// Top-`k` rows by mean logit over the prompt at every layer except
    /// `full_layer`, which sees the whole pool.
    TopK { k: usize, full_layer: usize },
}

/// One sequence to run on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TapePass<'a> {
    pub tokens: &'a [usize],
    /// Leading positions used for Ā and selection scores.
    pub prompt_len: usize,
    pub kb: Option<&'a KbStore>,
    pub select: TrainSelect,
    /// Layer whose pool-wide Ā is returned.
    pub abar_layer: Option<usize>,
}

pub struct TapeOutput {
    /// `N × V` logits.
    pub logits: Var,
    /// `1 × M` mean KB logit over prompt positions for every pool entry.
    pub abar: Option<Var>,
    pub injected: Vec<Vec<usize>>,
}

/// Runs the model on `tape`. Matches [`super::Model::forward`] numerically.
pub fn tape_forward(
    tape: &mut GradTape,
    cfg: &ModelConfig,
    bb: &TapeBackbone,
    adapters: Option<&TapeAdapters>,
    pass: &TapePass<'_>,
) -> Result<TapeOutput> {
    let n = pass.tokens.len();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    if n == 0 || n > cfg.max_seq {
        return Err(Error::Invalid(format!("sequence length {n} outside 1..={}", cfg.max_seq)));
    }
    if pass.prompt_len == 0 || pass.prompt_len > n {
        return Err(Error::Invalid(format!("prompt length {} outside 1..={n}", pass.prompt_len)));
    }
    if let Some(&bad) = pass.tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::IndexOutOfRange { index: bad, len: cfg.vocab });
    }
    let knowledge = match (pass.kb, adapters) {
        (Some(kb), Some(ad)) if !kb.is_empty() => {
            if ad.layers.len() != cfg.layers {
                return Err(Error::dim("tape_forward", format!("{} adapter layers for {} layers", ad.layers.len(), cfg.layers)));
            }
            Some((kb, ad))
        }
        _ => None,
    };
    let emb_keys = knowledge.map(|(kb, _)| kb.key_matrix(None));

    let tok = tape.gather_rows(bb.tok_emb(), pass.tokens)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(bb.pos_emb(), &positions)?;
    let mut h = tape.add(tok, pos)?;

    let mut abar = None;
    let mut injected_all = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let w = bb.block(l);
        let x = tape.layer_norm(h, w[0], w[1])?;
        let q = tape.matmul(x, w[2])?;
        let k = tape.matmul(x, w[3])?;
        let v = tape.matmul(x, w[4])?;

        let mut kb_parts = None;
        if let (Some((kb, ad)), Some(emb)) = (knowledge, emb_keys.as_ref()) {
            let [wq, wk, wv] = ad.layers[l];
            let qt = tape.matmul(x, wq)?;
            let m = kb.len();
            let injected: Vec<usize> = match pass.select {
                TrainSelect::TopK { k: top, full_layer } if l != full_layer && top < m => {
                    let prompt_q = tape.value(qt).gather_rows(&(0..pass.prompt_len).collect::<Vec<_>>())?;
                    let s = pool_mean_scores(&prompt_q, tape.value(wk), emb, heads);
                    topk_indices(&s, top)
                }
                _ => (0..m).collect(),
            };
            if pass.abar_layer == Some(l) {
                let prompt_qt = tape.slice_rows(qt, 0, pass.prompt_len)?;
                let qbar = tape.mean_rows(prompt_qt);
                let all = tape.constant(emb.clone());
                let pool_keys = tape.matmul(all, wk)?;
                let s = tape.matmul_bt(qbar, pool_keys)?;
                abar = Some(tape.scale(s, scale / heads as f64));
            }
            let ek = tape.constant(kb.key_matrix(Some(&injected)));
            let ev = tape.constant(kb.value_matrix(Some(&injected)));
            let kb_k = tape.matmul(ek, wk)?;
            let kb_v = tape.matmul(ev, wv)?;
            kb_parts = Some((qt, kb_k, kb_v, injected.len()));
            injected_all.push(injected);
        } else {
            injected_all.push(Vec::new());
        }

        let m = kb_parts.map_or(0, |p| p.3);
        let mut visible = vec![false; n * (m + n)];
        for i in 0..n {
            let row = &mut visible[i * (m + n)..(i + 1) * (m + n)];
            row[..m + i + 1].iter_mut().for_each(|b| *b = true);
        }
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let tok_logits = tape.matmul_bt(qh, kh)?;
            let tok_logits = tape.scale(tok_logits, scale);
            let (logits, values) = match kb_parts {
                Some((qt, kb_k, kb_v, _)) => {
                    let qth = tape.slice_cols(qt, hd * dh, dh)?;
                    let kbk = tape.slice_cols(kb_k, hd * dh, dh)?;
                    let kbv = tape.slice_cols(kb_v, hd * dh, dh)?;
                    let kl = tape.matmul_bt(qth, kbk)?;
                    let kl = tape.scale(kl, scale);
                    (tape.concat_cols(&[kl, tok_logits])?, tape.concat_rows(&[kbv, vh])?)
                }
                None => (tok_logits, vh),
            };
            let weights = tape.masked_softmax(logits, &visible)?;
            outs.push(tape.matmul(weights, values)?);
        }
        let attn = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let proj = tape.matmul(attn, w[5])?;
        h = tape.add(h, proj)?;
        let x2 = tape.layer_norm(h, w[6], w[7])?;
        let f = tape.matmul(x2, w[8])?;
        let f = tape.add_row(f, w[9])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w[10])?;
        let f = tape.add_row(f, w[11])?;
        h = tape.add(h, f)?;
    }
    let (g, b, unembed) = bb.head();
    let xf = tape.layer_norm(h, g, b)?;
    let logits = tape.matmul(xf, unembed)?;
    if !tape.value(logits).all_finite() {
        return Err(Error::NonFinite("tape logits"));
    }
    Ok(TapeOutput { logits, abar, injected: injected_all })
}

/// Adapter gradients in [`AdapterSet::tensors`] order.
pub fn adapter_grads(grads: &crate::numeric::Gradients, layers: usize) -> Result<Vec<Tensor>> {
    (0..layers * 3)
        .map(|i| grads.get(&ParamId(i)).cloned().ok_or_else(|| Error::Invalid(format!("no gradient for adapter {i}"))))
        .collect()
}
