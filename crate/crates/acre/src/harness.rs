//! End-to-end experiment runs: a config goes in, an answer and a metrics
//! record come out.
//!
//! Three attention regimes share one pipeline shape (ingest → context
//! processing → query → greedy decode) and one metrics schema, so their
//! costs read off a common table:
//!
//! - **acre** — the tiered pipeline: windowed selective prefill into a
//!   [`BiLayerCache`], query-guided refilling, decode over the refilled
//!   view. Context memory is bounded by the window.
//! - **full** — every nested entry stays live, unchunked. An optional hard
//!   cap on live entries models running out of memory: past the cap the run
//!   fails with [`Error::Capacity`] before any compute, which is expected
//!   behavior for this comparator, not a bug.
//! - **streaming** — a fixed count of pinned sink rows plus a recent
//!   window; everything between is evicted. Constant memory, no recall of
//!   the middle.
//!
//! Metric units are entry counts, not device bytes: `peak_view_entries`
//! counts per-layer view rows over context processing, `hot_entries` and
//! `cold_entries` sum over layers and heads, `cold_reads` and
//! `refill_entries` count detail entries. Counts are device-independent
//! and honest at desk scale.
//!
//! Every run is deterministic per config: corpora are seeded or byte-level
//! (one token per byte, folded onto the vocabulary), decoding is greedy
//! with fixed tie-breaks, and `wall_ms` stays 0 unless timing is opted
//! into. Repeating a run therefore reproduces its metrics line byte for
//! byte.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::cache::BiLayerCache;
use crate::error::{Error, Result};
use crate::model::{forward_logits, CacheView, LayerKv, ModelConfig, TinyModel};
use crate::nested::{interleave, TokenId};
use crate::prefill::{plan_chunks, prefill_with_stats, PrefillConfig};
use crate::refill::{decode, plan_refill, refill, RefillConfig};
use crate::train::synth::{kv_recall, markov_stream, MAX_QA_ALPHABET, QA_VOCAB};

// ── Corpus ingestion ─────────────────────────────────────────────────────

/// Byte-level tokenization folded onto the model vocabulary: each byte
/// becomes the token `byte mod vocab`. One token per byte, no external
/// assets, deterministic.
pub fn tokenize(bytes: &[u8], vocab: usize) -> Result<Vec<TokenId>> {
    if vocab == 0 {
        return Err(Error::Config("vocabulary must be at least 1".into()));
    }
    Ok(bytes.iter().map(|&b| (b as usize % vocab) as TokenId).collect())
}

/// Reads a file into byte-level tokens. Empty input is an error: a run
/// over nothing would otherwise masquerade as a successful run.
pub fn ingest(path: &Path, vocab: usize) -> Result<Vec<TokenId>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Precondition(format!("input file {} is empty", path.display())));
    }
    tokenize(&bytes, vocab)
}

/// Text placed around a text article and its query. The preamble is
/// prefilled — and therefore summarized — together with the article body;
/// the query prefix rides with the query and is never summarized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    pub preamble: String,
    pub query_prefix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            preamble: "Now, the article begins:\n".into(),
            query_prefix: "\nQuestion: ".into(),
        }
    }
}

impl PromptTemplate {
    /// No framing at all.
    #[must_use]
    pub fn none() -> Self {
        Self { preamble: String::new(), query_prefix: String::new() }
    }

    /// The context stream as the model sees it: preamble bytes, then the
    /// article body, tokenized together before any interleaving.
    pub fn wrap_context(&self, body: &[u8], vocab: usize) -> Result<Vec<TokenId>> {
        if body.is_empty() {
            return Err(Error::Precondition("refusing to frame an empty article".into()));
        }
        let mut tokens = tokenize(self.preamble.as_bytes(), vocab)?;
        tokens.extend(tokenize(body, vocab)?);
        Ok(tokens)
    }

    /// The query as appended after the context, prefix included.
    pub fn wrap_query(&self, query: &str, vocab: usize) -> Result<Vec<TokenId>> {
        if query.is_empty() {
            return Err(Error::Precondition("refusing to frame an empty query".into()));
        }
        let mut tokens = tokenize(self.query_prefix.as_bytes(), vocab)?;
        tokens.extend(tokenize(query.as_bytes(), vocab)?);
        Ok(tokens)
    }
}

/// Decorrelates the probe stream from the article stream under one seed.
const QUERY_SALT: u64 = 0x51;

/// Where a run's article and query come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "corpus", rename_all = "snake_case")]
pub enum CorpusSpec {
    /// A seeded pseudo-text stream probed by a short seeded query.
    Synthetic { len: usize, query_len: usize },
    /// A seeded key-value recall episode; the query names one stored key.
    Recall { pairs: usize },
    /// Article text from disk, query given verbatim; both template-framed.
    File { path: PathBuf, query: String },
    /// Inline article text, query verbatim; both template-framed.
    Inline { text: String, query: String },
    /// A previously serialized cache. It holds KV entries, not tokens, so
    /// it cannot be resolved into streams; it exists so metrics from
    /// cache-reuse runs echo where their context actually came from.
    Cached { path: PathBuf, query: String },
}

/// Materializes a config's context and query token streams. Synthetic
/// corpora are already token-level and bypass the template; text corpora
/// are framed by it.
pub fn resolve_corpus(cfg: &ExperimentConfig) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let vocab = cfg.model.vocab_size;
    let seed = cfg.model.seed;
    match &cfg.corpus {
        CorpusSpec::Synthetic { len, query_len } => Ok((
            markov_stream(seed, *len, vocab),
            markov_stream(seed ^ QUERY_SALT, *query_len, vocab),
        )),
        CorpusSpec::Recall { pairs } => {
            let ex = kv_recall(seed, *pairs, MAX_QA_ALPHABET);
            Ok((ex.context, ex.query))
        }
        CorpusSpec::File { path, query } => {
            let bytes = std::fs::read(path)?;
            Ok((cfg.template.wrap_context(&bytes, vocab)?, cfg.template.wrap_query(query, vocab)?))
        }
        CorpusSpec::Inline { text, query } => Ok((
            cfg.template.wrap_context(text.as_bytes(), vocab)?,
            cfg.template.wrap_query(query, vocab)?,
        )),
        CorpusSpec::Cached { path, .. } => Err(Error::Precondition(format!(
            "{} is a serialized cache, not a token source; load it and use query_cache",
            path.display()
        ))),
    }
}

// ── Experiment configuration ─────────────────────────────────────────────

/// Attention regime of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Streaming,
    Acre,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::Streaming => "streaming",
            Mode::Acre => "acre",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "streaming" => Ok(Mode::Streaming),
            "acre" => Ok(Mode::Acre),
            other => Err(Error::Config(format!(
                "unknown mode `{other}`: expected full, streaming, or acre"
            ))),
        }
    }
}

/// One experiment, fully specified. Identical configs produce identical
/// answers and metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub template: PromptTemplate,
    /// Summary interval l.
    pub l: usize,
    /// Working window W, in per-layer view rows.
    pub window: usize,
    /// Refill budget η, in detail entries.
    pub eta: usize,
    /// Prefill chunk budget, in nested items.
    pub chunk: usize,
    /// Greedy decode budget.
    pub max_new: usize,
    /// Sink rows the streaming baseline pins.
    pub sinks: usize,
    /// Live-entry cap for the full baseline, in per-layer view rows.
    pub cap: Option<usize>,
    /// Measure wall time. Off by default: measured time varies run to run,
    /// and the default contract is byte-reproducible metrics.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Acre,
            model: ModelConfig::default(),
            corpus: CorpusSpec::Synthetic { len: 256, query_len: 8 },
            template: PromptTemplate::default(),
            l: 8,
            window: 128,
            eta: 64,
            chunk: 16,
            max_new: 16,
            sinks: 4,
            cap: None,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    /// Mode-specific requirements, checked before any compute.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match self.mode {
            // Both windowed regimes must fit a maximal chunk beside the
            // entries they are obliged to retain.
            Mode::Acre => {
                PrefillConfig::new(self.l, self.window, self.chunk)?;
                RefillConfig::new(self.eta, self.window, self.l)?;
            }
            Mode::Streaming => {
                PrefillConfig::new(self.l, self.window, self.chunk)?;
            }
            Mode::Full => {
                if self.l == 0 {
                    return Err(Error::Config("summary interval l must be at least 1".into()));
                }
            }
        }
        match &self.corpus {
            CorpusSpec::Synthetic { len, query_len } => {
                if *len == 0 || *query_len == 0 {
                    return Err(Error::Config(
                        "synthetic corpus needs a nonempty stream and query".into(),
                    ));
                }
            }
            CorpusSpec::Recall { pairs } => {
                if !(1..=MAX_QA_ALPHABET).contains(pairs) {
                    return Err(Error::Config(format!(
                        "recall corpus supports 1..={MAX_QA_ALPHABET} pairs, got {pairs}"
                    )));
                }
                if self.model.vocab_size < QA_VOCAB {
                    return Err(Error::Config(format!(
                        "recall corpus needs a vocabulary of at least {QA_VOCAB}, got {}",
                        self.model.vocab_size
                    )));
                }
            }
            // Text sources surface their own errors on read; cached
            // corpora carry no parameters to check.
            CorpusSpec::File { .. } | CorpusSpec::Inline { .. } | CorpusSpec::Cached { .. } => {}
        }
        Ok(())
    }
}

// ── Metrics ──────────────────────────────────────────────────────────────

/// What one run cost, in cache entries rather than device bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunMetrics {
    /// Largest per-layer KV view over context processing: prefill chunks
    /// and the assembled refill view. Query and decode appends are small,
    /// identical across modes, and tracked by `decode_tokens` instead.
    pub peak_view_entries: usize,
    /// Resident entries after context processing, summed over layers and
    /// heads: the hot tier for tiered runs, every live entry otherwise.
    pub hot_entries: usize,
    /// Detail entries parked in the cold tier, summed over layers and heads.
    pub cold_entries: usize,
    /// Detail entries pulled through the tier boundary.
    pub cold_reads: u64,
    /// Detail entries the refill plan spliced back, summed over layers.
    pub refill_entries: usize,
    /// Forward passes spent on the context.
    pub prefill_steps: usize,
    /// Tokens decoded beyond the query.
    pub decode_tokens: usize,
    /// Wall-clock duration; 0 unless timing was requested.
    pub wall_ms: u64,
}

/// A finished run: what was decoded, and what it cost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub answer: Vec<TokenId>,
    pub metrics: RunMetrics,
}

/// One metrics line: the measurements plus the config that produced them.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub metrics: RunMetrics,
    pub config: ExperimentConfig,
}

impl RunRecord {
    #[must_use]
    pub fn new(cfg: &ExperimentConfig, metrics: RunMetrics) -> Self {
        Self { metrics, config: cfg.clone() }
    }
}

/// Wall-clock source that reads 0 when timing is off, keeping metrics
/// byte-reproducible by default.
struct Clock {
    start: Option<Instant>,
}

impl Clock {
    fn start(enabled: bool) -> Self {
        Self { start: enabled.then(Instant::now) }
    }

    fn elapsed_ms(&self) -> u64 {
        self.start.map_or(0, |s| s.elapsed().as_millis() as u64)
    }
}

/// Longest same-token run a decoded answer may contain before it counts as
/// degenerate. A structural stand-in for readability judgments.
pub const MAX_RUN: usize = 64;

/// Structural validity of a decoded answer: every id in vocabulary, and no
/// token repeated more than [`MAX_RUN`] times in a row.
pub fn validate_answer(answer: &[TokenId], vocab: usize) -> Result<()> {
    let mut prev = None;
    let mut run = 0usize;
    for (i, &t) in answer.iter().enumerate() {
        if (t as usize) >= vocab {
            return Err(Error::Structure {
                index: i,
                reason: format!("token id {t} outside the vocabulary of {vocab}"),
            });
        }
        run = if prev == Some(t) { run + 1 } else { 1 };
        prev = Some(t);
        if run > MAX_RUN {
            return Err(Error::Structure {
                index: i,
                reason: format!("token {t} repeated more than {MAX_RUN} times in a row"),
            });
        }
    }
    Ok(())
}

// ── Pipelines ────────────────────────────────────────────────────────────

/// Plans, refills, and decodes one query over an existing cache. This is
/// the cache-sharing path: the prefill cost lives wherever the cache came
/// from, and `cold_reads` counts only this query's tier traffic.
pub fn query_cache(
    model: &TinyModel,
    cache: &BiLayerCache,
    query: &[TokenId],
    cfg: &RefillConfig,
    max_new: usize,
) -> Result<RunOutput> {
    let reads_before = cache.cold().cold_reads();
    let plan = plan_refill(model, cache, query, cfg)?;
    let mut view = refill(cache, &plan)?;
    let peak = view.layers.iter().map(LayerKv::len).max().unwrap_or(0);
    let answer = decode(model, &mut view, query, max_new, None)?;
    validate_answer(&answer, model.config().vocab_size)?;
    let metrics = RunMetrics {
        peak_view_entries: peak,
        hot_entries: cache.hot_entries(),
        cold_entries: cache.cold_entries(),
        cold_reads: cache.cold().cold_reads() - reads_before,
        refill_entries: plan.refilled_entries(cache),
        prefill_steps: 0,
        decode_tokens: answer.len(),
        wall_ms: 0,
    };
    Ok(RunOutput { answer, metrics })
}

/// The tiered pipeline end to end: selective prefill, query-guided refill,
/// greedy decode.
pub fn run_acre(cfg: &ExperimentConfig) -> Result<RunOutput> {
    if cfg.mode != Mode::Acre {
        return Err(Error::Precondition(format!(
            "run_acre requires mode acre, config says {}",
            cfg.mode
        )));
    }
    cfg.validate()?;
    let clock = Clock::start(cfg.timing);
    let model = TinyModel::init(cfg.model)?;
    let (context, query) = resolve_corpus(cfg)?;
    let pcfg = PrefillConfig::new(cfg.l, cfg.window, cfg.chunk)?;
    let (cache, stats) = prefill_with_stats(&model, &context, &pcfg)?;
    let rcfg = RefillConfig::new(cfg.eta, cfg.window, cfg.l)?;
    let mut out = query_cache(&model, &cache, &query, &rcfg, cfg.max_new)?;
    out.metrics.peak_view_entries = out.metrics.peak_view_entries.max(stats.peak_view_entries);
    out.metrics.prefill_steps = stats.chunks;
    out.metrics.wall_ms = clock.elapsed_ms();
    Ok(out)
}

/// Prefill only: builds the cache that query-time callers will share.
/// The metrics carry no decode or refill figures — those belong to the
/// queries.
pub fn run_prefill(cfg: &ExperimentConfig) -> Result<(BiLayerCache, RunOutput)> {
    if cfg.mode != Mode::Acre {
        return Err(Error::Precondition(format!(
            "only mode acre builds a tiered cache, config says {}",
            cfg.mode
        )));
    }
    cfg.validate()?;
    let clock = Clock::start(cfg.timing);
    let model = TinyModel::init(cfg.model)?;
    let (context, _) = resolve_corpus(cfg)?;
    let pcfg = PrefillConfig::new(cfg.l, cfg.window, cfg.chunk)?;
    let (cache, stats) = prefill_with_stats(&model, &context, &pcfg)?;
    let metrics = RunMetrics {
        peak_view_entries: stats.peak_view_entries,
        hot_entries: cache.hot_entries(),
        cold_entries: cache.cold_entries(),
        cold_reads: 0,
        refill_entries: 0,
        prefill_steps: stats.chunks,
        decode_tokens: 0,
        wall_ms: clock.elapsed_ms(),
    };
    Ok((cache, RunOutput { answer: Vec::new(), metrics }))
}

/// Unchunked full attention over the same nested stream. The configured
/// cap bounds live entries the way device memory would; exceeding it fails
/// before any compute, which is this comparator's expected failure mode.
fn run_full(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let clock = Clock::start(cfg.timing);
    let model = TinyModel::init(cfg.model)?;
    let (context, query) = resolve_corpus(cfg)?;
    let seq = interleave(&context, cfg.l)?;
    let live = seq.len() + query.len() + cfg.max_new;
    if let Some(cap) = cfg.cap {
        if live > cap {
            return Err(Error::Capacity { needed: live, cap });
        }
    }
    let mc = *model.config();
    let mut view = CacheView::empty(mc.n_layers, mc.hidden());
    forward_logits(&model, &mut view, seq.items())?;
    let answer = decode(&model, &mut view, &query, cfg.max_new, None)?;
    validate_answer(&answer, mc.vocab_size)?;
    let metrics = RunMetrics {
        peak_view_entries: seq.len(),
        hot_entries: seq.len() * mc.n_layers * mc.n_heads,
        cold_entries: 0,
        cold_reads: 0,
        refill_entries: 0,
        prefill_steps: 1,
        decode_tokens: answer.len(),
        wall_ms: clock.elapsed_ms(),
    };
    Ok(RunOutput { answer, metrics })
}

/// Evicts down to `budget` rows, pinning the first `sinks` rows of the
/// stream and keeping the most recent of the rest. No-op when the view
/// already fits.
fn shrink_streaming(view: &mut CacheView, sinks: usize, budget: usize) {
    let len = view.layers.first().map_or(0, LayerKv::len);
    if len <= budget {
        return;
    }
    let pinned = sinks.min(budget);
    let keep: Vec<usize> = (0..pinned).chain(len - (budget - pinned)..len).collect();
    for kv in &mut view.layers {
        kv.retain_indices(&keep);
    }
}

/// Sink-and-recent-window attention over the nested stream: before each
/// chunk (and the query), the view shrinks so that pinned sinks, retained
/// recents, and the incoming rows together never exceed `sinks + window`.
fn run_streaming(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let clock = Clock::start(cfg.timing);
    let model = TinyModel::init(cfg.model)?;
    let (context, query) = resolve_corpus(cfg)?;
    if query.len() >= cfg.window {
        return Err(Error::Config(format!(
            "query of {} tokens does not fit the streaming window of {}",
            query.len(),
            cfg.window
        )));
    }
    let seq = interleave(&context, cfg.l)?;
    let spans = plan_chunks(&seq, cfg.chunk);
    let mc = *model.config();
    let mut view = CacheView::empty(mc.n_layers, mc.hidden());
    let mut peak = 0usize;
    for span in &spans {
        shrink_streaming(&mut view, cfg.sinks, (cfg.sinks + cfg.window).saturating_sub(span.len()));
        peak = peak.max(view.layers[0].len() + span.len());
        forward_logits(&model, &mut view, &seq.items()[span.clone()])?;
    }
    let hot_entries = view.layers[0].len() * mc.n_layers * mc.n_heads;
    shrink_streaming(&mut view, cfg.sinks, (cfg.sinks + cfg.window).saturating_sub(query.len()));
    let answer = decode(&model, &mut view, &query, cfg.max_new, None)?;
    validate_answer(&answer, mc.vocab_size)?;
    let metrics = RunMetrics {
        peak_view_entries: peak,
        hot_entries,
        cold_entries: 0,
        cold_reads: 0,
        refill_entries: 0,
        prefill_steps: spans.len(),
        decode_tokens: answer.len(),
        wall_ms: clock.elapsed_ms(),
    };
    Ok(RunOutput { answer, metrics })
}

/// Runs one of the two comparators.
pub fn run_baseline(cfg: &ExperimentConfig) -> Result<RunOutput> {
    match cfg.mode {
        Mode::Full => run_full(cfg),
        Mode::Streaming => run_streaming(cfg),
        Mode::Acre => Err(Error::Precondition(
            "run_baseline handles full and streaming; use run_acre for the tiered pipeline".into(),
        )),
    }
}

/// Dispatches a config to its pipeline.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    match cfg.mode {
        Mode::Acre => run_acre(cfg),
        Mode::Full | Mode::Streaming => run_baseline(cfg),
    }
}

// ── Sweeps ───────────────────────────────────────────────────────────────

/// Which knob a sweep turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Summary interval l.
    Interval,
    /// Refill budget η.
    Eta,
    /// Working window W.
    Window,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Interval => "l",
            SweepParam::Eta => "eta",
            SweepParam::Window => "window",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l" => Ok(SweepParam::Interval),
            "eta" => Ok(SweepParam::Eta),
            "window" => Ok(SweepParam::Window),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}`: expected l, eta, or window"
            ))),
        }
    }
}

/// Runs `base` once per value, collecting one record each, and checks the
/// monotonicities the structure forces: the hot tier cannot grow as l
/// does, refilled entries cannot shrink as η grows, and no tiered run may
/// peak past its window. A violation is a structural bug, not a noisy
/// measurement, so it is an error.
pub fn sweep(
    param: SweepParam,
    values: &[usize],
    base: &ExperimentConfig,
) -> Result<Vec<RunRecord>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut records = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::Interval => cfg.l = value,
            SweepParam::Eta => cfg.eta = value,
            SweepParam::Window => cfg.window = value,
        }
        let out = run(&cfg)?;
        if cfg.mode == Mode::Acre && out.metrics.peak_view_entries > cfg.window {
            return Err(Error::Structure {
                index: records.len(),
                reason: format!(
                    "peak view of {} exceeded the window of {}",
                    out.metrics.peak_view_entries, cfg.window
                ),
            });
        }
        records.push(RunRecord::new(&cfg, out.metrics));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by_key(|&i| values[i]);
    for pair in order.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if values[a] == values[b] {
            continue;
        }
        let (ma, mb) = (&records[a].metrics, &records[b].metrics);
        match param {
            SweepParam::Interval if mb.hot_entries > ma.hot_entries => {
                return Err(Error::Structure {
                    index: b,
                    reason: format!(
                        "hot entries grew from {} to {} as l rose from {} to {}",
                        ma.hot_entries, mb.hot_entries, values[a], values[b]
                    ),
                });
            }
            SweepParam::Eta if mb.refill_entries < ma.refill_entries => {
                return Err(Error::Structure {
                    index: b,
                    reason: format!(
                        "refilled entries shrank from {} to {} as eta rose from {} to {}",
                        ma.refill_entries, mb.refill_entries, values[a], values[b]
                    ),
                });
            }
            _ => {}
        }
    }
    Ok(records)
}

// ── Reporting ────────────────────────────────────────────────────────────

/// Writes records as JSON Lines, one run per line: the metrics fields with
/// the config echoed under `config`. Field order is fixed by the types, so
/// identical records give identical bytes.
pub fn write_jsonl<W: Write>(records: &[RunRecord], out: &mut W) -> Result<()> {
    for record in records {
        let line = serde_json::to_string(record).expect("metrics records always serialize");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Fixed-width table of a batch of runs, one row each — the human-readable
/// companion to the JSONL.
#[must_use]
pub fn summary_table(records: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<9} {:>6} {:>5} {:>6} {:>6} {:>9} {:>8} {:>8} {:>6} {:>6} {:>6} {:>6}\n",
        "mode", "n", "l", "window", "eta", "hot", "refill", "cold_rd", "peak", "steps", "dec", "ms"
    ));
    for r in records {
        let (m, c) = (&r.metrics, &r.config);
        let n = match &c.corpus {
            CorpusSpec::Synthetic { len, .. } => len.to_string(),
            CorpusSpec::Recall { pairs } => (4 * pairs).to_string(),
            _ => "-".into(),
        };
        out.push_str(&format!(
            "{:<9} {:>6} {:>5} {:>6} {:>6} {:>9} {:>8} {:>8} {:>6} {:>6} {:>6} {:>6}\n",
            c.mode.to_string(),
            n,
            c.l,
            c.window,
            c.eta,
            m.hot_entries,
            m.refill_entries,
            m.cold_reads,
            m.peak_view_entries,
            m.prefill_steps,
            m.decode_tokens,
            m.wall_ms
        ));
    }
    out
}

// ── Tests ────────────────────────────────────────────────────────────────
