//! The bi-layer cache: what prefill produces and queries consume.
//!
//! Decomposing one layer's nested KV entries splits them by kind: the `m`
//! summary (L1) entries form the *hot* tier, which is always resident and
//! tiny — one entry per `l` detail tokens. The `n` detail (L2) entries form
//! the *cold* tier, held behind an access-counting boundary so a run can
//! report exactly how much detail it pulled back in. The proxy map is purely
//! arithmetic: summary `i` stands for detail rows `[i*l, min((i+1)*l, n))`.
//!
//! The serialized form (`ACKV`) stores the tiers per layer as raw
//! little-endian f32 blobs behind a small header, sealed with a CRC32.
//! Positions and kinds are never stored — they are recomputed from
//! `(l, m, n)`, which is the point of keeping the structure arithmetic.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernel::Matrix;
use crate::model::LayerKv;
use crate::nested::{self, validate_kind_pattern, TokenKind};
use crate::wire::{Reader, Writer};

pub const CACHE_MAGIC: &[u8; 4] = b"ACKV";
pub const CACHE_VERSION: u32 = 1;

// ── Tiered store ─────────────────────────────────────────────────────────

struct ColdLayer {
    keys: Matrix,
    values: Matrix,
}

/// The cold tier: per-layer detail KV behind read counters. Counters are
/// runtime telemetry — they start at zero on construction and on load, and
/// are never serialized. Reads are counted atomically so concurrent readers
/// of a shared cache stay coherent.
pub struct TieredStore {
    layers: Vec<ColdLayer>,
    reads: AtomicU64,
    bytes_read: AtomicU64,
}

impl TieredStore {
    fn new(layers: Vec<ColdLayer>) -> Self {
        Self { layers, reads: AtomicU64::new(0), bytes_read: AtomicU64::new(0) }
    }

    /// Reads a contiguous run of detail entries (key rows, value rows),
    /// counting one cold read per entry and the bytes of both rows.
    pub fn read_range(&self, layer: usize, range: Range<usize>) -> (&[f32], &[f32]) {
        let cl = &self.layers[layer];
        let h = cl.keys.cols();
        let count = range.len() as u64;
        self.reads.fetch_add(count, Ordering::Relaxed);
        self.bytes_read.fetch_add(count * (h as u64) * 4 * 2, Ordering::Relaxed);
        (
            &cl.keys.as_slice()[range.start * h..range.end * h],
            &cl.values.as_slice()[range.start * h..range.end * h],
        )
    }

    /// Total detail entries read since construction.
    #[must_use]
    pub fn cold_reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Total bytes pulled across the tier boundary since construction.
    #[must_use]
    pub fn cold_bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    /// Uncounted access for persistence; serializing a cache is not
    /// attention traffic and must not pollute the refill metrics.
    fn raw(&self, layer: usize) -> (&Matrix, &Matrix) {
        (&self.layers[layer].keys, &self.layers[layer].values)
    }
}

// ── BiLayerCache ─────────────────────────────────────────────────────────

struct HotLayer {
    keys: Matrix,
    values: Matrix,
}

/// Hot summary tier + cold detail tier for every layer, plus the structure
/// parameters that make positions and the proxy map recomputable.
pub struct BiLayerCache {
    l: usize,
    n: usize,
    m: usize,
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    hot: Vec<HotLayer>,
    cold: TieredStore,
}

impl BiLayerCache {
    #[must_use]
    pub fn interval(&self) -> usize {
        self.l
    }

    /// Detail entry count per layer.
    #[must_use]
    pub fn detail_count(&self) -> usize {
        self.n
    }

    /// Summary entry count per layer, `ceil(n/l)`.
    #[must_use]
    pub fn summary_count(&self) -> usize {
        self.m
    }

    #[must_use]
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    #[must_use]
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    #[must_use]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[must_use]
    pub fn hidden(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Length of the nested stream this cache came from.
    #[must_use]
    pub fn nested_len(&self) -> usize {
        self.n + self.m
    }

    /// Detail range proxied by summary entry `i`.
    #[must_use]
    pub fn proxy_range(&self, i: usize) -> Range<usize> {
        nested::proxy_range(i, self.l, self.n)
    }

    /// Nested position of summary entry `i`.
    #[must_use]
    pub fn l1_position(&self, i: usize) -> usize {
        nested::l1_position(i, self.l, self.n)
    }

    /// Nested position of detail entry `j`.
    #[must_use]
    pub fn l2_position(&self, j: usize) -> usize {
        nested::l2_position(j, self.l)
    }

    /// Hot-tier rows for one layer: (keys, values), `m × hidden` each.
    #[must_use]
    pub fn hot_layer(&self, layer: usize) -> (&Matrix, &Matrix) {
        (&self.hot[layer].keys, &self.hot[layer].values)
    }

    #[must_use]
    pub fn cold(&self) -> &TieredStore {
        &self.cold
    }

    /// Hot entries across layers and heads — the resident footprint.
    #[must_use]
    pub fn hot_entries(&self) -> usize {
        self.m * self.n_layers * self.n_heads
    }

    /// Cold entries across layers and heads.
    #[must_use]
    pub fn cold_entries(&self) -> usize {
        self.n * self.n_layers * self.n_heads
    }

    /// Test hook: scales every hot value row in place (never the keys).
    #[cfg(test)]
    pub(crate) fn scale_hot_values(&mut self, factor: f32) {
        for layer in &mut self.hot {
            for v in layer.values.as_mut_slice() {
                *v *= factor;
            }
        }
    }

    /// Test hook: overwrites every hot key row with the layer's first one.
    #[cfg(test)]
    pub(crate) fn make_hot_keys_identical(&mut self) {
        for layer in &mut self.hot {
            let first = layer.keys.row(0).to_vec();
            for r in 1..layer.keys.rows() {
                layer.keys.row_mut(r).copy_from_slice(&first);
            }
        }
    }
}

impl PartialEq for BiLayerCache {
    /// Structural and numeric equality; read counters are telemetry and do
    /// not participate.
    fn eq(&self, other: &Self) -> bool {
        self.l == other.l
            && self.n == other.n
            && self.m == other.m
            && self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.head_dim == other.head_dim
            && (0..self.n_layers).all(|i| {
                self.hot[i].keys == other.hot[i].keys
                    && self.hot[i].values == other.hot[i].values
                    && self.cold.raw(i) == other.cold.raw(i)
            })
    }
}

impl std::fmt::Debug for BiLayerCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BiLayerCache")
            .field("l", &self.l)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("n_layers", &self.n_layers)
            .field("cold_reads", &self.cold.cold_reads())
            .finish()
    }
}

// ── Decompose / recompose ────────────────────────────────────────────────

/// Splits per-layer nested KV entries into a bi-layer cache. The kind
/// pattern must be exactly what interleaving at interval `l` produces, with
/// positions equal to nested indices, identical across layers.
pub fn decompose(
    nested_kv: &[LayerKv],
    l: usize,
    n_heads: usize,
    head_dim: usize,
) -> Result<BiLayerCache> {
    let first = nested_kv
        .first()
        .ok_or_else(|| Error::Precondition("decompose needs at least one layer".into()))?;
    let hidden = n_heads * head_dim;
    if first.hidden() != hidden {
        return Err(Error::Precondition(format!(
            "layer width {} does not match {n_heads} heads of {head_dim}",
            first.hidden()
        )));
    }
    let (n, m) = validate_kind_pattern(first.kinds(), l)?;
    for (idx, &pos) in first.positions().iter().enumerate() {
        if pos != idx {
            return Err(Error::Structure {
                index: idx,
                reason: format!("entry position {pos} is not its nested index"),
            });
        }
    }
    for (li, kv) in nested_kv.iter().enumerate().skip(1) {
        if kv.kinds() != first.kinds() || kv.positions() != first.positions() {
            return Err(Error::Structure {
                index: li,
                reason: "layers disagree on kind/position structure".into(),
            });
        }
    }

    let mut hot = Vec::with_capacity(nested_kv.len());
    let mut cold = Vec::with_capacity(nested_kv.len());
    for kv in nested_kv {
        let mut l1k = Vec::with_capacity(m * hidden);
        let mut l1v = Vec::with_capacity(m * hidden);
        let mut l2k = Vec::with_capacity(n * hidden);
        let mut l2v = Vec::with_capacity(n * hidden);
        for (i, &kind) in kv.kinds().iter().enumerate() {
            match kind {
                TokenKind::L1 => {
                    l1k.extend_from_slice(kv.key_row(i));
                    l1v.extend_from_slice(kv.value_row(i));
                }
                TokenKind::L2 => {
                    l2k.extend_from_slice(kv.key_row(i));
                    l2v.extend_from_slice(kv.value_row(i));
                }
            }
        }
        hot.push(HotLayer {
            keys: Matrix::from_vec(m, hidden, l1k),
            values: Matrix::from_vec(m, hidden, l1v),
        });
        cold.push(ColdLayer {
            keys: Matrix::from_vec(n, hidden, l2k),
            values: Matrix::from_vec(n, hidden, l2v),
        });
    }
    Ok(BiLayerCache {
        l,
        n,
        m,
        n_layers: nested_kv.len(),
        n_heads,
        head_dim,
        hot,
        cold: TieredStore::new(cold),
    })
}

/// Rebuilds one layer's attention view: all summary entries, with the
/// proxied detail ranges of `selected` spliced back immediately before
/// their summary entry. `selected` must be ascending, unique, in `[0, m)`.
/// Detail reads go through the counting boundary.
pub(crate) fn assemble_layer(cache: &BiLayerCache, layer: usize, selected: &[usize]) -> Result<LayerKv> {
    for pair in selected.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::Selection(format!(
                "selected summary indices must be strictly ascending, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if let Some(&last) = selected.last() {
        if last >= cache.m {
            return Err(Error::Selection(format!(
                "selected summary index {last} out of range (m = {})",
                cache.m
            )));
        }
    }
    let hidden = cache.hidden();
    let (hk, hv) = cache.hot_layer(layer);
    let mut out = LayerKv::new(hidden);
    let mut sel = selected.iter().peekable();
    for i in 0..cache.m {
        if sel.peek() == Some(&&i) {
            sel.next();
            let range = cache.proxy_range(i);
            let (keys, values) = cache.cold.read_range(layer, range.clone());
            for (off, j) in range.enumerate() {
                out.push(
                    &keys[off * hidden..(off + 1) * hidden],
                    &values[off * hidden..(off + 1) * hidden],
                    TokenKind::L2,
                    cache.l2_position(j),
                );
            }
        }
        out.push(hk.row(i), hv.row(i), TokenKind::L1, cache.l1_position(i));
    }
    Ok(out)
}

/// Rebuilds the nested attention view with the same selection applied to
/// every layer. Selecting all of `0..m` reproduces the full interleaved
/// order exactly.
pub fn recompose(cache: &BiLayerCache, selected: &[usize]) -> Result<Vec<LayerKv>> {
    (0..cache.n_layers).map(|layer| assemble_layer(cache, layer, selected)).collect()
}

// ── Serialization ────────────────────────────────────────────────────────

/// `ACKV` layout: magic, version u32, l u32, m u64, n u64, n_layers u32,
/// n_heads u32, head_dim u32, then per layer the four f32 blobs (summary
/// keys, summary values, detail keys, detail values), then CRC32 of all
/// preceding bytes. Everything little-endian.
#[must_use]
pub fn cache_to_bytes(cache: &BiLayerCache) -> Vec<u8> {
    let mut w = Writer::new();
    w.magic(CACHE_MAGIC);
    w.u32(CACHE_VERSION);
    w.u32(cache.l as u32);
    w.u64(cache.m as u64);
    w.u64(cache.n as u64);
    w.u32(cache.n_layers as u32);
    w.u32(cache.n_heads as u32);
    w.u32(cache.head_dim as u32);
    for layer in 0..cache.n_layers {
        let (hk, hv) = cache.hot_layer(layer);
        let (ck, cv) = cache.cold.raw(layer);
        w.f32_slice(hk.as_slice());
        w.f32_slice(hv.as_slice());
        w.f32_slice(ck.as_slice());
        w.f32_slice(cv.as_slice());
    }
    w.finish_with_crc()
}

pub fn cache_from_bytes(bytes: &[u8]) -> Result<BiLayerCache> {
    let mut r = Reader::with_crc(bytes)?;
    r.expect_magic(CACHE_MAGIC, "cache")?;
    let version = r.u32("version")?;
    if version != CACHE_VERSION {
        return Err(Error::Format { offset: 4, reason: format!("unsupported cache version {version}") });
    }
    let l = r.u32("interval l")? as usize;
    let m = r.u64("summary count m")? as usize;
    let n = r.u64("detail count n")? as usize;
    let n_layers = r.u32("layer count")? as usize;
    let n_heads = r.u32("head count")? as usize;
    let head_dim = r.u32("head dim")? as usize;
    if l == 0 || n == 0 || n_layers == 0 || n_heads == 0 || head_dim == 0 {
        return Err(Error::Format { offset: 8, reason: "zero structure field in header".into() });
    }
    if m != nested::summary_count(n, l) {
        return Err(Error::Format {
            offset: 12,
            reason: format!("summary count {m} inconsistent with n={n}, l={l}"),
        });
    }
    let hidden = n_heads * head_dim;
    let mut hot = Vec::with_capacity(n_layers);
    let mut cold = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let hk = Matrix::from_vec(m, hidden, r.f32_vec(m * hidden, "summary keys")?);
        let hv = Matrix::from_vec(m, hidden, r.f32_vec(m * hidden, "summary values")?);
        let ck = Matrix::from_vec(n, hidden, r.f32_vec(n * hidden, "detail keys")?);
        let cv = Matrix::from_vec(n, hidden, r.f32_vec(n * hidden, "detail values")?);
        hot.push(HotLayer { keys: hk, values: hv });
        cold.push(ColdLayer { keys: ck, values: cv });
    }
    r.finish()?;
    Ok(BiLayerCache { l, n, m, n_layers, n_heads, head_dim, hot, cold: TieredStore::new(cold) })
}

pub fn save_cache(cache: &BiLayerCache, path: &std::path::Path) -> Result<()> {
    Ok(std::fs::write(path, cache_to_bytes(cache))?)
}

pub fn load_cache(path: &std::path::Path) -> Result<BiLayerCache> {
    cache_from_bytes(&std::fs::read(path)?)
}

// ── Tests ────────────────────────────────────────────────────────────────
