//! Query-guided refilling and greedy decoding.
//!
//! A stored cache answers queries at summary resolution by default. Refill
//! sharpens it: a preliminary pass runs the query tokens *by themselves*
//! (no cache in view), collects each layer's normalized attention inputs,
//! and scores every summary entry by how much attention the query would pay
//! it. The top-scoring summaries get their proxied detail ranges pulled
//! back from the cold tier and spliced into the view, independently per
//! layer. The refill budget converts to whole detail groups:
//! `k = floor(min(window − m, eta) / l)`.
//!
//! Scoring deliberately never reads a stored *value*: it uses query states,
//! query projections, and summary keys only. Scaling every summary value in
//! a cache changes the scores by nothing at all — not just within
//! tolerance, bit for bit — which the tests pin down.

use std::cmp::Ordering;

use crate::cache::{assemble_layer, BiLayerCache};
use crate::error::{Error, Result};
use crate::kernel::{rope_apply, softmax_rows, Matrix};
use crate::model::{forward_inner, project_q, slice_head, CacheView, TinyModel};
use crate::nested::{NestedItem, TokenId, TokenKind};

/// Budgets for query-time refilling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefillConfig {
    /// Maximum detail entries a refill may splice back (η).
    pub max_refill: usize,
    /// Working window the refilled view must fit (W).
    pub window: usize,
    /// Summary interval of the cache (l).
    pub interval: usize,
}

impl RefillConfig {
    pub fn new(max_refill: usize, window: usize, interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::Config("summary interval l must be at least 1".into()));
        }
        Ok(Self { max_refill, window, interval })
    }
}

impl Default for RefillConfig {
    fn default() -> Self {
        Self { max_refill: 4096, window: 4096, interval: 8 }
    }
}

/// Detail groups a refill may splice in: spend at most η entries, never let
/// the view outgrow the window, and count in whole groups of `l`:
/// k = ⌊min(W − m, η)/l⌋, clamped at zero when summaries already fill W.
#[must_use]
pub fn compute_k(cfg: &RefillConfig, m: usize) -> usize {
    debug_assert!(cfg.interval >= 1, "summary interval must be positive");
    cfg.window.saturating_sub(m).min(cfg.max_refill) / cfg.interval
}

/// Mean attention mass each summary entry would receive from the query —
/// one weight per summary, non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores(Vec<f32>);

impl LayerScores {
    #[must_use]
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Scores one layer's summaries against `query`; see [`score_layers`].
pub fn score_l1(
    model: &TinyModel,
    layer: usize,
    cache: &BiLayerCache,
    query: &[TokenId],
) -> Result<LayerScores> {
    let mut all = score_layers(model, cache, query)?;
    if layer >= all.len() {
        return Err(Error::Precondition(format!(
            "layer {layer} out of range for a {}-layer model",
            all.len()
        )));
    }
    Ok(all.swap_remove(layer))
}

/// Scores every layer's summaries against `query`. The preliminary pass
/// runs the query tokens with an empty view — pure self-attention at the
/// positions they would occupy after the cache — so the states it collects
/// depend only on the query and the model, never on cached values.
pub fn score_layers(model: &TinyModel, cache: &BiLayerCache, query: &[TokenId]) -> Result<Vec<LayerScores>> {
    if query.is_empty() {
        return Err(Error::Precondition("scoring needs at least one query token".into()));
    }
    let mc = model.config();
    if cache.n_layers() != mc.n_layers
        || cache.n_heads() != mc.n_heads
        || cache.head_dim() != mc.head_dim
    {
        return Err(Error::Precondition(format!(
            "cache shape {}x{}x{} does not match model {}x{}x{}",
            cache.n_layers(),
            cache.n_heads(),
            cache.head_dim(),
            mc.n_layers,
            mc.n_heads,
            mc.head_dim
        )));
    }
    let base = cache.nested_len();
    let items: Vec<NestedItem> = query
        .iter()
        .enumerate()
        .map(|(t, &token)| NestedItem { kind: TokenKind::L2, token, position: base + t })
        .collect();
    let positions: Vec<usize> = items.iter().map(|it| it.position).collect();
    let kinds = vec![TokenKind::L2; items.len()];

    let mut scratch = CacheView::empty(mc.n_layers, mc.hidden());
    let mut attn_inputs: Vec<Matrix> = Vec::with_capacity(mc.n_layers);
    forward_inner(model, &mut scratch, &items, Some(&mut attn_inputs))?;

    let d = mc.head_dim;
    let scale = 1.0 / (d as f32).sqrt();
    let mut all = Vec::with_capacity(mc.n_layers);
    for (layer, attn_input) in attn_inputs.iter().enumerate() {
        let q_full = project_q(model, layer, attn_input, &kinds)?;
        let (hot_keys, _) = cache.hot_layer(layer);
        let m = cache.summary_count();
        // Every summary position precedes every query position, so the
        // whole hot tier is visible and no causal mask is needed here.
        let mut acc = vec![0f64; m];
        for head in 0..mc.n_heads {
            let q = rope_apply(&slice_head(&q_full, head, d), &positions)?;
            let mut scores = Matrix::zeros(q.rows(), m);
            for r in 0..q.rows() {
                let qrow = q.row(r);
                let srow = scores.row_mut(r);
                for (i, s) in srow.iter_mut().enumerate() {
                    let krow = &hot_keys.row(i)[head * d..(head + 1) * d];
                    *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
            }
            let probs = softmax_rows(&scores);
            for r in 0..probs.rows() {
                for (a, &p) in acc.iter_mut().zip(probs.row(r)) {
                    *a += f64::from(p);
                }
            }
        }
        let denom = (mc.n_heads * query.len()) as f64;
        all.push(LayerScores(acc.into_iter().map(|a| (a / denom) as f32).collect()));
    }
    Ok(all)
}

/// Top-`k` summary indices by score, ties to the lower index, returned
/// ascending. Asks for more than exist? You get them all.
#[must_use]
pub fn select_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    order
}

/// Which detail groups to splice back, chosen independently per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefillPlan {
    /// Group budget the plan was built under.
    pub k: usize,
    /// Selected summary indices per layer, ascending.
    pub selected: Vec<Vec<usize>>,
}

impl RefillPlan {
    /// Detail entries the plan will splice in, summed over layers.
    #[must_use]
    pub fn refilled_entries(&self, cache: &BiLayerCache) -> usize {
        self.selected
            .iter()
            .flat_map(|sel| sel.iter().map(|&i| cache.proxy_range(i).len()))
            .sum()
    }
}

/// Scores the cache against the query and keeps the best `k` groups per
/// layer, with `k` from [`compute_k`] under the given budgets.
pub fn plan_refill(
    model: &TinyModel,
    cache: &BiLayerCache,
    query: &[TokenId],
    cfg: &RefillConfig,
) -> Result<RefillPlan> {
    if cfg.interval != cache.interval() {
        return Err(Error::Precondition(format!(
            "refill config interval {} does not match cache interval {}",
            cfg.interval,
            cache.interval()
        )));
    }
    let k = compute_k(cfg, cache.summary_count());
    let selected = if k == 0 {
        vec![Vec::new(); cache.n_layers()]
    } else {
        score_layers(model, cache, query)?
            .iter()
            .map(|s| select_indices(s.as_slice(), k))
            .collect()
    };
    Ok(RefillPlan { k, selected })
}

/// Materializes the attention view a plan describes: all summaries, plus
/// each selected group's detail spliced in right before its summary entry.
/// Detail rows come through the counting tier boundary.
pub fn refill(cache: &BiLayerCache, plan: &RefillPlan) -> Result<CacheView> {
    if plan.selected.len() != cache.n_layers() {
        return Err(Error::Precondition(format!(
            "plan covers {} layers, cache has {}",
            plan.selected.len(),
            cache.n_layers()
        )));
    }
    let layers = plan
        .selected
        .iter()
        .enumerate()
        .map(|(layer, sel)| assemble_layer(cache, layer, sel))
        .collect::<Result<Vec<_>>>()?;
    Ok(CacheView { layers })
}

/// Greedy decoding on top of a view: feed the query, then repeatedly take
/// the highest-logit token (ties to the lowest id) until `max_new` tokens
/// are out or `eos` comes up. The end token itself is not part of the
/// answer. The view grows as decoding proceeds.
pub fn decode(
    model: &TinyModel,
    view: &mut CacheView,
    query: &[TokenId],
    max_new: usize,
    eos: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    if query.is_empty() {
        return Err(Error::Precondition("decoding needs at least one query token".into()));
    }
    if view.layers.first().is_none_or(|kv| kv.is_empty()) {
        return Err(Error::Precondition("decoding with an empty view".into()));
    }
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let mut pos = view.last_position().expect("nonempty view") + 1;
    let items: Vec<NestedItem> = query
        .iter()
        .map(|&token| {
            let it = NestedItem { kind: TokenKind::L2, token, position: pos };
            pos += 1;
            it
        })
        .collect();
    let logits = forward_inner(model, view, &items, None)?;
    let mut next = argmax_lowest(logits.row(logits.rows() - 1)) as TokenId;
    let mut out = Vec::with_capacity(max_new);
    loop {
        if eos == Some(next) {
            break;
        }
        out.push(next);
        if out.len() == max_new {
            break;
        }
        let item = NestedItem { kind: TokenKind::L2, token: next, position: pos };
        pos += 1;
        let logits = forward_inner(model, view, &[item], None)?;
        next = argmax_lowest(logits.row(0)) as TokenId;
    }
    Ok(out)
}

fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ── Tests ────────────────────────────────────────────────────────────────
