//! The tiny decoder-only transformer.
//!
//! Two projection families live side by side in every layer: the *original*
//! family `{W_Q, W_K, W_V}` projects detail (L2) tokens and plays the role
//! of a pretrained, frozen base; the *summary* family `{W_Q^L1, W_K^L1,
//! W_V^L1}` projects summary (L1) tokens and is the part training is allowed
//! to move, together with the single shared L1 embedding row. Which family a
//! token routes through is decided per row by its kind flag.
//!
//! Layers are pre-norm: RMSNorm → attention (rotary positions over the
//! nested stream, causal mask) → residual → RMSNorm → SiLU MLP → residual,
//! with a final RMSNorm before the vocab head. Keys are rotated once when
//! they enter a [`LayerKv`]; queries are rotated at use.

use crate::error::{Error, Result};
use crate::kernel::{matmul, rmsnorm, rope_apply, softmax_rows, Matrix, Rng};
use crate::nested::{NestedItem, TokenKind};
use crate::wire::{Reader, Writer};

pub const MODEL_MAGIC: &[u8; 4] = b"ACRE";
pub const MODEL_VERSION: u32 = 1;

/// Weight initialization scale for all projection and embedding weights.
const INIT_STD: f32 = 0.02;

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 2, head_dim: 8, vocab_size: 64, ffn_dim: 32, seed: 0 }
    }
}

impl ModelConfig {
    /// Model width; heads are concatenated, so this is `n_heads * head_dim`.
    #[must_use]
    pub const fn hidden(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layer, head, and ffn counts must be nonzero".into()));
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim must be even and nonzero for rotary pairing, got {}",
                self.head_dim
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        Ok(())
    }
}

// ── Weights ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub(crate) attn_norm: Vec<f32>,
    /// Original family: projects detail (L2) rows. Frozen during training.
    pub(crate) w_q: Matrix,
    pub(crate) w_k: Matrix,
    pub(crate) w_v: Matrix,
    /// Summary family: projects summary (L1) rows. Trainable.
    pub(crate) w_q_l1: Matrix,
    pub(crate) w_k_l1: Matrix,
    pub(crate) w_v_l1: Matrix,
    pub(crate) w_o: Matrix,
    pub(crate) ffn_norm: Vec<f32>,
    pub(crate) w_ff1: Matrix,
    pub(crate) w_ff2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub(crate) cfg: ModelConfig,
    /// Vocab embedding, frozen.
    pub(crate) embed: Matrix,
    /// The one shared embedding row every summary token uses. Trainable.
    pub(crate) l1_embed: Vec<f32>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) out_norm: Vec<f32>,
    /// Vocab head; logits never include the summary pseudo-token.
    pub(crate) w_out: Matrix,
}

impl TinyModel {
    /// Seeded init: every projection/embedding weight is `N(0, 0.02²)` drawn
    /// in declaration order from one SplitMix64 stream; norm gains start at
    /// 1 so activations pass through at unit scale.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden();
        let mut rng = Rng::new(cfg.seed);
        let gm = |r: usize, c: usize, rng: &mut Rng| rng.gaussian_matrix(r, c, INIT_STD);

        let embed = gm(cfg.vocab_size, h, &mut rng);
        let l1_embed = gm(1, h, &mut rng).as_slice().to_vec();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerWeights {
                attn_norm: vec![1.0; h],
                w_q: gm(h, h, &mut rng),
                w_k: gm(h, h, &mut rng),
                w_v: gm(h, h, &mut rng),
                w_q_l1: gm(h, h, &mut rng),
                w_k_l1: gm(h, h, &mut rng),
                w_v_l1: gm(h, h, &mut rng),
                w_o: gm(h, h, &mut rng),
                ffn_norm: vec![1.0; h],
                w_ff1: gm(h, cfg.ffn_dim, &mut rng),
                w_ff2: gm(cfg.ffn_dim, h, &mut rng),
            });
        }
        let out_norm = vec![1.0; h];
        let w_out = gm(h, cfg.vocab_size, &mut rng);
        Ok(Self { cfg, embed, l1_embed, layers, out_norm, w_out })
    }

    #[must_use]
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Closed-form parameter count (see the enumeration test for the oracle).
    #[must_use]
    pub fn param_count(&self) -> usize {
        let h = self.cfg.hidden();
        let (v, f, l) = (self.cfg.vocab_size, self.cfg.ffn_dim, self.cfg.n_layers);
        v * h + h + l * (2 * h + 7 * h * h + 2 * h * f) + h + h * v
    }

    /// Embeds nested items: detail rows come from the vocab table, every
    /// summary row is the one shared L1 embedding.
    pub fn embed_items(&self, items: &[NestedItem]) -> Result<Matrix> {
        let h = self.cfg.hidden();
        let mut out = Matrix::zeros(items.len(), h);
        for (r, item) in items.iter().enumerate() {
            match item.kind {
                TokenKind::L1 => out.row_mut(r).copy_from_slice(&self.l1_embed),
                TokenKind::L2 => {
                    let id = item.token as usize;
                    if id >= self.cfg.vocab_size {
                        return Err(Error::Precondition(format!(
                            "token id {id} outside vocab of {}",
                            self.cfg.vocab_size
                        )));
                    }
                    out.row_mut(r).copy_from_slice(self.embed.row(id));
                }
            }
        }
        Ok(out)
    }
}

// ── Per-layer attention context ──────────────────────────────────────────

/// One layer's KV entries: the attention context a new row sees. Keys are
/// stored rotated at their nested position; kinds and positions ride along
/// so pruning and decomposition stay purely structural.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    hidden: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    kinds: Vec<TokenKind>,
    positions: Vec<usize>,
}

impl LayerKv {
    #[must_use]
    pub fn new(hidden: usize) -> Self {
        Self { hidden, keys: Vec::new(), values: Vec::new(), kinds: Vec::new(), positions: Vec::new() }
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    #[must_use]
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn push(&mut self, key: &[f32], value: &[f32], kind: TokenKind, position: usize) {
        debug_assert_eq!(key.len(), self.hidden);
        debug_assert_eq!(value.len(), self.hidden);
        debug_assert!(
            self.positions.last().is_none_or(|&p| p < position),
            "entry positions must be strictly increasing"
        );
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.kinds.push(kind);
        self.positions.push(position);
    }

    #[must_use]
    pub fn key_row(&self, i: usize) -> &[f32] {
        &self.keys[i * self.hidden..(i + 1) * self.hidden]
    }

    #[must_use]
    pub fn value_row(&self, i: usize) -> &[f32] {
        &self.values[i * self.hidden..(i + 1) * self.hidden]
    }

    #[must_use]
    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    #[must_use]
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Keeps exactly the entries at `keep` (ascending); everything else is
    /// dropped. This is the pruning primitive.
    pub fn retain_indices(&mut self, keep: &[usize]) {
        debug_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        let h = self.hidden;
        let mut keys = Vec::with_capacity(keep.len() * h);
        let mut values = Vec::with_capacity(keep.len() * h);
        let mut kinds = Vec::with_capacity(keep.len());
        let mut positions = Vec::with_capacity(keep.len());
        for &i in keep {
            keys.extend_from_slice(self.key_row(i));
            values.extend_from_slice(self.value_row(i));
            kinds.push(self.kinds[i]);
            positions.push(self.positions[i]);
        }
        self.keys = keys;
        self.values = values;
        self.kinds = kinds;
        self.positions = positions;
    }
}

/// The full attention context across layers — what prefill grows and decode
/// consumes. Layers may hold different entry counts after a refill.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheView {
    pub layers: Vec<LayerKv>,
}

impl CacheView {
    #[must_use]
    pub fn empty(n_layers: usize, hidden: usize) -> Self {
        Self { layers: (0..n_layers).map(|_| LayerKv::new(hidden)).collect() }
    }

    /// Largest nested position present, if any. Uniform across layers for
    /// every view this crate constructs.
    #[must_use]
    pub fn last_position(&self) -> Option<usize> {
        self.layers.iter().filter_map(|l| l.positions().last().copied()).max()
    }
}

// ── Projection and attention ─────────────────────────────────────────────

fn route(rows: &Matrix, kinds: &[TokenKind], w_l2: &Matrix, w_l1: &Matrix) -> Result<Matrix> {
    debug_assert_eq!(rows.rows(), kinds.len());
    // Project with both families, then pick per row by kind. At these widths
    // the duplicate work is cheaper than row-gathered matmuls, and it keeps
    // the arithmetic identical whichever family a row lands in.
    let a = matmul(rows, w_l2)?;
    let b = matmul(rows, w_l1)?;
    let mut out = Matrix::zeros(rows.rows(), a.cols());
    for (r, &kind) in kinds.iter().enumerate() {
        let src = match kind {
            TokenKind::L2 => a.row(r),
            TokenKind::L1 => b.row(r),
        };
        out.row_mut(r).copy_from_slice(src);
    }
    Ok(out)
}

/// Projects normalized token states into key and value rows, routing each
/// row through the family its kind selects. Keys come back unrotated; the
/// caller rotates them at the row's nested position before storing.
pub fn project_kv(
    model: &TinyModel,
    layer: usize,
    normed: &Matrix,
    kinds: &[TokenKind],
) -> Result<(Matrix, Matrix)> {
    let lw = &model.layers[layer];
    let k = route(normed, kinds, &lw.w_k, &lw.w_k_l1)?;
    let v = route(normed, kinds, &lw.w_v, &lw.w_v_l1)?;
    Ok((k, v))
}

/// Query projection with the same per-kind routing.
pub fn project_q(
    model: &TinyModel,
    layer: usize,
    normed: &Matrix,
    kinds: &[TokenKind],
) -> Result<Matrix> {
    let lw = &model.layers[layer];
    route(normed, kinds, &lw.w_q, &lw.w_q_l1)
}

pub(crate) fn slice_head(m: &Matrix, head: usize, head_dim: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), head_dim);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[head * head_dim..(head + 1) * head_dim]);
    }
    out
}

/// Scaled dot-product attention of `queries` (unrotated, one row per new
/// token) over one layer's KV entries, causal on nested positions, heads
/// concatenated and projected through `W_O`.
pub fn attend(
    model: &TinyModel,
    layer: usize,
    queries: &Matrix,
    q_positions: &[usize],
    kv: &LayerKv,
) -> Result<Matrix> {
    if kv.is_empty() && queries.rows() > 0 {
        return Err(Error::Precondition("attention over an empty context".into()));
    }
    if q_positions.len() != queries.rows() {
        return Err(Error::Precondition("one position per query row required".into()));
    }
    let (heads, d) = (model.cfg.n_heads, model.cfg.head_dim);
    let scale = 1.0 / (d as f32).sqrt();
    let e = kv.len();
    let mut concat = Matrix::zeros(queries.rows(), model.cfg.hidden());
    for head in 0..heads {
        let q = rope_apply(&slice_head(queries, head, d), q_positions)?;
        // Scores against stored (already rotated) keys, masked causally.
        let mut scores = Matrix::zeros(queries.rows(), e);
        for (r, &qpos) in q_positions.iter().enumerate() {
            let qrow = q.row(r);
            let srow = scores.row_mut(r);
            for (j, s) in srow.iter_mut().enumerate() {
                if kv.positions()[j] > qpos {
                    *s = f32::NEG_INFINITY;
                } else {
                    let krow = &kv.key_row(j)[head * d..(head + 1) * d];
                    *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
            }
        }
        let probs = softmax_rows(&scores);
        for r in 0..queries.rows() {
            let out = &mut concat.row_mut(r)[head * d..(head + 1) * d];
            for j in 0..e {
                let p = probs.get(r, j);
                if p == 0.0 {
                    continue;
                }
                let vrow = &kv.value_row(j)[head * d..(head + 1) * d];
                for (o, &v) in out.iter_mut().zip(vrow) {
                    *o += p * v;
                }
            }
        }
    }
    matmul(&concat, &model.layers[layer].w_o)
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Runs `items` through every layer on top of `view`, appending their KV
/// entries as it goes, and returns vocab logits for each item. When
/// `collect_attn_inputs` is given it receives each layer's normalized
/// attention input (the states the Q/K/V projections consume) — the refill
/// scorer reads those.
pub(crate) fn forward_inner(
    model: &TinyModel,
    view: &mut CacheView,
    items: &[NestedItem],
    mut collect_attn_inputs: Option<&mut Vec<Matrix>>,
) -> Result<Matrix> {
    if items.is_empty() {
        return Err(Error::Precondition("forward pass over zero items".into()));
    }
    if view.layers.len() != model.cfg.n_layers {
        return Err(Error::Precondition(format!(
            "view has {} layers, model has {}",
            view.layers.len(),
            model.cfg.n_layers
        )));
    }
    let positions: Vec<usize> = items.iter().map(|it| it.position).collect();
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("item positions must be strictly increasing".into()));
    }
    if let Some(last) = view.last_position() {
        if positions[0] <= last {
            return Err(Error::Precondition(format!(
                "new item position {} overlaps cached position {last}",
                positions[0]
            )));
        }
    }
    let kinds: Vec<TokenKind> = items.iter().map(|it| it.kind).collect();

    let mut h = model.embed_items(items)?;
    for layer in 0..model.cfg.n_layers {
        let lw = &model.layers[layer];
        let a_in = rmsnorm(&h, &lw.attn_norm)?;
        if let Some(collect) = collect_attn_inputs.as_deref_mut() {
            collect.push(a_in.clone());
        }
        let (k, v) = project_kv(model, layer, &a_in, &kinds)?;
        // Rotate keys per head at their nested positions, then append so the
        // new rows can attend to themselves and each other causally.
        let d = model.cfg.head_dim;
        let mut k_rot = Matrix::zeros(k.rows(), k.cols());
        for head in 0..model.cfg.n_heads {
            let rotated = rope_apply(&slice_head(&k, head, d), &positions)?;
            for r in 0..k.rows() {
                k_rot.row_mut(r)[head * d..(head + 1) * d].copy_from_slice(rotated.row(r));
            }
        }
        for r in 0..items.len() {
            view.layers[layer].push(k_rot.row(r), v.row(r), kinds[r], positions[r]);
        }
        let q = project_q(model, layer, &a_in, &kinds)?;
        let ctx = attend(model, layer, &q, &positions, &view.layers[layer])?;
        for (hv, cv) in h.as_mut_slice().iter_mut().zip(ctx.as_slice()) {
            *hv += cv;
        }

        let f_in = rmsnorm(&h, &lw.ffn_norm)?;
        let mut mid = matmul(&f_in, &lw.w_ff1)?;
        for v in mid.as_mut_slice() {
            *v = silu(*v);
        }
        let ffn = matmul(&mid, &lw.w_ff2)?;
        for (hv, fv) in h.as_mut_slice().iter_mut().zip(ffn.as_slice()) {
            *hv += fv;
        }
    }
    matmul(&rmsnorm(&h, &model.out_norm)?, &model.w_out)
}

/// Appends `items` to the view and returns their vocab logits. The cached
/// positions must all precede the new items' positions.
pub fn forward_logits(model: &TinyModel, view: &mut CacheView, items: &[NestedItem]) -> Result<Matrix> {
    forward_inner(model, view, items, None)
}

// ── Checkpoint format ────────────────────────────────────────────────────

fn weight_blobs(m: &TinyModel) -> Vec<&[f32]> {
    let mut blobs: Vec<&[f32]> = vec![m.embed.as_slice(), &m.l1_embed];
    for lw in &m.layers {
        blobs.push(&lw.attn_norm);
        blobs.push(lw.w_q.as_slice());
        blobs.push(lw.w_k.as_slice());
        blobs.push(lw.w_v.as_slice());
        blobs.push(lw.w_q_l1.as_slice());
        blobs.push(lw.w_k_l1.as_slice());
        blobs.push(lw.w_v_l1.as_slice());
        blobs.push(lw.w_o.as_slice());
        blobs.push(&lw.ffn_norm);
        blobs.push(lw.w_ff1.as_slice());
        blobs.push(lw.w_ff2.as_slice());
    }
    blobs.push(&m.out_norm);
    blobs.push(m.w_out.as_slice());
    blobs
}

/// Serializes a model: magic `ACRE`, version, config, weight blobs in
/// declaration order, trailing CRC32. All little-endian.
#[must_use]
pub fn model_to_bytes(m: &TinyModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.magic(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u32(m.cfg.n_layers as u32);
    w.u32(m.cfg.n_heads as u32);
    w.u32(m.cfg.head_dim as u32);
    w.u32(m.cfg.vocab_size as u32);
    w.u32(m.cfg.ffn_dim as u32);
    w.u64(m.cfg.seed);
    for blob in weight_blobs(m) {
        w.f32_slice(blob);
    }
    w.finish_with_crc()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<TinyModel> {
    let mut r = Reader::with_crc(bytes)?;
    r.expect_magic(MODEL_MAGIC, "model checkpoint")?;
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let cfg = ModelConfig {
        n_layers: r.u32("n_layers")? as usize,
        n_heads: r.u32("n_heads")? as usize,
        head_dim: r.u32("head_dim")? as usize,
        vocab_size: r.u32("vocab_size")? as usize,
        ffn_dim: r.u32("ffn_dim")? as usize,
        seed: r.u64("seed")?,
    };
    cfg.validate().map_err(|e| Error::Format { offset: 8, reason: e.to_string() })?;
    let h = cfg.hidden();
    let mat = |rows: usize, cols: usize, what: &str, r: &mut Reader| -> Result<Matrix> {
        Ok(Matrix::from_vec(rows, cols, r.f32_vec(rows * cols, what)?))
    };
    let embed = mat(cfg.vocab_size, h, "embedding", &mut r)?;
    let l1_embed = r.f32_vec(h, "summary embedding")?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            attn_norm: r.f32_vec(h, "attention norm")?,
            w_q: mat(h, h, "w_q", &mut r)?,
            w_k: mat(h, h, "w_k", &mut r)?,
            w_v: mat(h, h, "w_v", &mut r)?,
            w_q_l1: mat(h, h, "w_q_l1", &mut r)?,
            w_k_l1: mat(h, h, "w_k_l1", &mut r)?,
            w_v_l1: mat(h, h, "w_v_l1", &mut r)?,
            w_o: mat(h, h, "w_o", &mut r)?,
            ffn_norm: r.f32_vec(h, "ffn norm")?,
            w_ff1: mat(h, cfg.ffn_dim, "w_ff1", &mut r)?,
            w_ff2: mat(cfg.ffn_dim, h, "w_ff2", &mut r)?,
        });
    }
    let out_norm = r.f32_vec(h, "output norm")?;
    let w_out = mat(h, cfg.vocab_size, "vocab head", &mut r)?;
    r.finish()?;
    Ok(TinyModel { cfg, embed, l1_embed, layers, out_norm, w_out })
}

pub fn save_model(m: &TinyModel, path: &std::path::Path) -> Result<()> {
    Ok(std::fs::write(path, model_to_bytes(m))?)
}

pub fn load_model(path: &std::path::Path) -> Result<TinyModel> {
    model_from_bytes(&std::fs::read(path)?)
}

// ── Tests ────────────────────────────────────────────────────────────────
