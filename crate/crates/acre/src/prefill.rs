//! Selective-attention prefill: building the bi-layer cache under a bounded
//! attention window.
//!
//! The interleaved stream is consumed in chunks of whole summary groups (a
//! group is up to `l` detail tokens plus their summary token). Before each
//! chunk the working view is pruned down to `window − chunk_len` entries by
//! dropping the *oldest detail entries only* — summary entries are never
//! dropped, so distant context stays represented at summary resolution while
//! recent context keeps full detail. Pruning shapes what a chunk attends to;
//! every computed entry is still archived, so the finished cache is always
//! complete.
//!
//! The pruning rule is purely structural — it depends on entry kinds and
//! counts, never on activations. [`selective_visibility`] exposes the exact
//! same decisions as an index plan, which lets a single full forward pass
//! with a masked attention reproduce the chunked computation bit-for-bit in
//! spirit (and to tolerance in tests): that equivalence is what the training
//! path builds on.

use std::ops::Range;

use crate::cache::{decompose, BiLayerCache};
use crate::error::{Error, Result};
use crate::kernel::Matrix;
use crate::model::{forward_inner, CacheView, TinyModel};
use crate::nested::{interleave, NestedSequence, TokenId, TokenKind};

/// How wide to look and how much to swallow per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillConfig {
    l: usize,
    window: usize,
    chunk: usize,
}

impl PrefillConfig {
    /// A window must fit one maximal chunk, one full summary group's detail,
    /// and the group's summary entry: `window ≥ chunk + l + 1`.
    pub fn new(l: usize, window: usize, chunk: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::Config("summary interval l must be at least 1".into()));
        }
        if chunk == 0 {
            return Err(Error::Config("chunk size must be at least 1".into()));
        }
        if window < chunk + l + 1 {
            return Err(Error::Config(format!(
                "window {window} too small: need at least chunk + l + 1 = {}",
                chunk + l + 1
            )));
        }
        Ok(Self { l, window, chunk })
    }

    /// Picks the largest sensible chunk for the window, capped at 64 groups.
    pub fn with_default_chunk(l: usize, window: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::Config("summary interval l must be at least 1".into()));
        }
        let headroom = window.saturating_sub(l + 1);
        if headroom == 0 {
            return Err(Error::Config(format!(
                "window {window} too small: need at least l + 2 = {}",
                l + 2
            )));
        }
        Self::new(l, window, headroom.min(64 * l))
    }

    #[must_use]
    pub fn interval(&self) -> usize {
        self.l
    }

    #[must_use]
    pub fn window(&self) -> usize {
        self.window
    }

    #[must_use]
    pub fn chunk(&self) -> usize {
        self.chunk
    }
}

/// What survived a pruning pass, as indices into the pre-prune entry list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunedView {
    /// Retained entry indices, ascending: every summary entry plus the most
    /// recent detail entries that fit.
    pub keep: Vec<usize>,
    /// Detail entries dropped to make room.
    pub dropped: usize,
}

/// Shrinks a view to `budget` entries by dropping oldest detail first.
/// Summary entries are untouchable: if they alone exceed the budget the
/// stream has outgrown the window and no pruning can help.
pub fn prune_view(kinds: &[TokenKind], budget: usize) -> Result<PrunedView> {
    let summaries = kinds.iter().filter(|k| **k == TokenKind::L1).count();
    if summaries > budget {
        return Err(Error::Overflow { required: summaries, budget });
    }
    let dropped = kinds.len().saturating_sub(budget);
    let mut to_drop = dropped;
    let keep = kinds
        .iter()
        .enumerate()
        .filter_map(|(i, &kind)| {
            if to_drop > 0 && kind == TokenKind::L2 {
                to_drop -= 1;
                None
            } else {
                Some(i)
            }
        })
        .collect();
    Ok(PrunedView { keep, dropped })
}

/// Splits the nested stream into spans of whole summary groups, packing
/// groups greedily up to `chunk` items. A chunk always holds at least one
/// group, even when a single group exceeds `chunk`.
pub(crate) fn plan_chunks(seq: &NestedSequence, chunk: usize) -> Vec<Range<usize>> {
    let items = seq.items();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut group_start = 0;
    while group_start < items.len() {
        let mut end = group_start;
        while items[end].kind == TokenKind::L2 {
            end += 1;
        }
        end += 1; // the group's summary entry
        if end - start > chunk && start < group_start {
            spans.push(start..group_start);
            start = group_start;
        }
        group_start = end;
    }
    spans.push(start..items.len());
    spans
}

/// Telemetry from one prefill run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillStats {
    /// Forward passes taken (chunks consumed).
    pub chunks: usize,
    /// Largest attention view any chunk saw, retained entries plus the
    /// incoming chunk. Never exceeds the window.
    pub peak_view_entries: usize,
}

/// The chunk spans and, per chunk, exactly which earlier nested indices its
/// items may attend to. This is the pruning schedule in structural form —
/// the training path turns it into an attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct VisibilityPlan {
    pub spans: Vec<Range<usize>>,
    pub visible: Vec<Vec<usize>>,
}

/// Replays the pruning decisions without touching any activations, which is
/// possible precisely because pruning is structural.
pub(crate) fn selective_visibility(seq: &NestedSequence, cfg: &PrefillConfig) -> Result<VisibilityPlan> {
    let spans = plan_chunks(seq, cfg.chunk);
    let items = seq.items();
    let mut kept: Vec<usize> = Vec::new();
    let mut visible = Vec::with_capacity(spans.len());
    for span in &spans {
        let kinds: Vec<TokenKind> = kept.iter().map(|&i| items[i].kind).collect();
        let budget = cfg.window.saturating_sub(span.len());
        let pruned = prune_view(&kinds, budget)?;
        kept = pruned.keep.iter().map(|&k| kept[k]).collect();
        visible.push(kept.clone());
        kept.extend(span.clone());
    }
    Ok(VisibilityPlan { spans, visible })
}

pub(crate) struct EngineRun {
    pub archive: Vec<crate::model::LayerKv>,
    pub logits: Option<Matrix>,
    pub stats: PrefillStats,
}

/// The chunked engine itself: interleave, then per chunk prune → forward →
/// archive. The working view holds what attention sees; the archive keeps
/// every entry ever computed.
pub(crate) fn run_engine(
    model: &TinyModel,
    tokens: &[TokenId],
    cfg: &PrefillConfig,
    want_logits: bool,
) -> Result<EngineRun> {
    let seq = interleave(tokens, cfg.l)?;
    let spans = plan_chunks(&seq, cfg.chunk);
    let hidden = model.config().hidden();
    let n_layers = model.config().n_layers;
    let mut view = CacheView::empty(n_layers, hidden);
    let mut archive = CacheView::empty(n_layers, hidden);
    let mut logits: Option<Matrix> = None;
    let mut peak = 0usize;
    for span in &spans {
        let len = span.len();
        let budget = cfg.window.saturating_sub(len);
        let pruned = prune_view(view.layers[0].kinds(), budget)?;
        if pruned.dropped > 0 {
            for kv in &mut view.layers {
                kv.retain_indices(&pruned.keep);
            }
        }
        peak = peak.max(view.layers[0].len() + len);
        let chunk_logits = forward_inner(model, &mut view, &seq.items()[span.clone()], None)?;
        for (al, vl) in archive.layers.iter_mut().zip(view.layers.iter()) {
            for i in vl.len() - len..vl.len() {
                al.push(vl.key_row(i), vl.value_row(i), vl.kinds()[i], vl.positions()[i]);
            }
        }
        if want_logits {
            logits = Some(match logits {
                Some(acc) => acc.vstack(&chunk_logits)?,
                None => chunk_logits,
            });
        }
    }
    Ok(EngineRun {
        archive: archive.layers,
        logits,
        stats: PrefillStats { chunks: spans.len(), peak_view_entries: peak },
    })
}

/// Prefills a bi-layer cache from raw tokens.
pub fn prefill(model: &TinyModel, tokens: &[TokenId], cfg: &PrefillConfig) -> Result<BiLayerCache> {
    Ok(prefill_with_stats(model, tokens, cfg)?.0)
}

/// Same, returning run telemetry alongside the cache.
pub fn prefill_with_stats(
    model: &TinyModel,
    tokens: &[TokenId],
    cfg: &PrefillConfig,
) -> Result<(BiLayerCache, PrefillStats)> {
    let run = run_engine(model, tokens, cfg, false)?;
    let mc = model.config();
    Ok((decompose(&run.archive, cfg.l, mc.n_heads, mc.head_dim)?, run.stats))
}

// ── Tests ────────────────────────────────────────────────────────────────
