//! Command-line front end over the experiment harness. All logic lives in
//! the library; this file is argument plumbing, table printing, and exit
//! codes: 0 on success, 2 when the full baseline trips its capacity cap,
//! 1 for everything else (usage errors included).

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use acre::cache::{load_cache, save_cache};
use acre::harness::{
    query_cache, run, run_prefill, summary_table, sweep, write_jsonl, CorpusSpec,
    ExperimentConfig, Mode, PromptTemplate, RunRecord, SweepParam,
};
use acre::model::{load_model, save_model, ModelConfig, TinyModel};
use acre::refill::RefillConfig;
use acre::train::synth::MAX_QA_ALPHABET;
use acre::train::{
    check_gradients, pretrain_base, train_steps, CacheMode, GradCheckConfig, Stage, TrainConfig,
};
use acre::{Error, Result};

#[derive(Parser)]
#[command(
    name = "acre",
    version,
    about = "Bi-layer KV cache experiments: tiered prefill, query-guided refill, baselines, sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a tiered cache from a context and optionally save it.
    Prefill(PrefillArgs),
    /// Answer a query, end to end or over a previously saved cache.
    Query(QueryArgs),
    /// Run one parameter across several values and print the table.
    Sweep(SweepArgs),
    /// Train the summary families (stage 0 boots the frozen base first).
    Train(TrainArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare memory scaling of all three regimes across context sizes.
    Bench(BenchArgs),
}

/// Flags shared by the run-shaped subcommands.
#[derive(Args)]
struct CommonArgs {
    /// Seed for the model and the synthetic corpora.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Summary interval l.
    #[arg(long, default_value_t = 8)]
    l: usize,
    /// Working window W, in per-layer view rows.
    #[arg(long, default_value_t = 128)]
    window: usize,
    /// Refill budget eta, in detail entries.
    #[arg(long, default_value_t = 64)]
    eta: usize,
    /// Prefill chunk budget, in nested items.
    #[arg(long, default_value_t = 16)]
    chunk: usize,
    /// Synthetic context length, used when neither --input nor --text is given.
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// Synthetic query length.
    #[arg(long, default_value_t = 4)]
    query_len: usize,
    /// Article file to ingest instead of a synthetic stream.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Inline article text instead of a synthetic stream.
    #[arg(long, conflicts_with = "input")]
    text: Option<String>,
    /// Query text for --input/--text corpora (and for --cache-in).
    #[arg(long, default_value = "What does the article say?")]
    query: String,
    /// Greedy decode budget.
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    /// Sink rows the streaming baseline pins.
    #[arg(long, default_value_t = 4)]
    sinks: usize,
    /// Live-entry cap for the full baseline.
    #[arg(long)]
    cap: Option<usize>,
    /// Measure wall time (metrics stop being byte-reproducible).
    #[arg(long)]
    timing: bool,
    /// Write metrics JSONL here, one run per line.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

impl CommonArgs {
    fn corpus(&self) -> CorpusSpec {
        match (&self.input, &self.text) {
            (Some(path), _) => {
                CorpusSpec::File { path: path.clone(), query: self.query.clone() }
            }
            (None, Some(text)) => {
                CorpusSpec::Inline { text: text.clone(), query: self.query.clone() }
            }
            (None, None) => CorpusSpec::Synthetic { len: self.n, query_len: self.query_len },
        }
    }

    fn config(&self, mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            model: ModelConfig { seed: self.seed, ..ModelConfig::default() },
            corpus: self.corpus(),
            template: PromptTemplate::default(),
            l: self.l,
            window: self.window,
            eta: self.eta,
            chunk: self.chunk,
            max_new: self.max_new,
            sinks: self.sinks,
            cap: self.cap,
            timing: self.timing,
        }
    }
}

#[derive(Args)]
struct PrefillArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Save the cache here for later queries.
    #[arg(long)]
    cache_out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Attention regime for end-to-end runs.
    #[arg(long, default_value = "acre", value_parser = parse_mode)]
    mode: Mode,
    /// Reuse a previously saved cache instead of prefilling.
    #[arg(long)]
    cache_in: Option<PathBuf>,
    /// Use a trained checkpoint instead of a fresh seeded model. It must
    /// match whatever model filled the cache.
    #[arg(long)]
    model_in: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which knob to turn: l, eta, or window.
    #[arg(long, value_parser = parse_param)]
    param: SweepParam,
    /// Comma-separated values for the swept parameter.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    values: Vec<usize>,
    /// Attention regime for every point.
    #[arg(long, default_value = "acre", value_parser = parse_mode)]
    mode: Mode,
}

#[derive(Args)]
struct TrainArgs {
    /// 0 boots the frozen base on flat recall episodes; 1 and 2 are the
    /// summary-family stages.
    #[arg(long, default_value_t = 1)]
    stage: u8,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    l: usize,
    #[arg(long, default_value_t = 48)]
    window: usize,
    #[arg(long, default_value_t = 16)]
    chunk: usize,
    /// Stage-1 stream length in tokens.
    #[arg(long, default_value_t = 64)]
    stream_len: usize,
    /// Recall pairs per stage-2 episode.
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    /// Stage-2 refill budget; 0 decodes from summaries only.
    #[arg(long, default_value_t = 64)]
    eta: usize,
    /// Continue from a checkpoint instead of a fresh seeded model.
    #[arg(long)]
    model_in: Option<PathBuf>,
    /// Save the trained model here.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Write one JSON step trace per line.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step, within [1e-4, 1e-2].
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Coordinates sampled per trainable family.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
    #[arg(long, default_value_t = 8)]
    l: usize,
    #[arg(long, default_value_t = 48)]
    window: usize,
    #[arg(long, default_value_t = 16)]
    chunk: usize,
    /// Recall pairs in the probe example.
    #[arg(long, default_value_t = 6)]
    pairs: usize,
    /// Stage-2 refill budget; 0 checks the summaries-only path.
    #[arg(long, default_value_t = 64)]
    eta: usize,
    /// Check a trained checkpoint instead of a fresh seeded model.
    #[arg(long)]
    model_in: Option<PathBuf>,
    /// Write the full report as one JSON line.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    l: usize,
    #[arg(long, default_value_t = 512)]
    window: usize,
    #[arg(long, default_value_t = 256)]
    eta: usize,
    #[arg(long, default_value_t = 16)]
    chunk: usize,
    /// Context sizes to compare at.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
    sizes: Vec<usize>,
    /// Live-entry cap for the full baseline; sizes past it demonstrate the
    /// capacity failure rather than aborting the bench.
    #[arg(long, default_value_t = 3072)]
    cap: usize,
    #[arg(long, default_value_t = 4)]
    sinks: usize,
    #[arg(long, default_value_t = 8)]
    max_new: usize,
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_param(s: &str) -> std::result::Result<SweepParam, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn emit_records(records: &[RunRecord], path: Option<&PathBuf>) -> Result<()> {
    if let Some(path) = path {
        let mut file = std::fs::File::create(path)?;
        write_jsonl(records, &mut file)?;
    }
    Ok(())
}

fn emit_lines<T: serde::Serialize>(items: &[T], path: Option<&PathBuf>) -> Result<()> {
    if let Some(path) = path {
        let mut file = std::fs::File::create(path)?;
        for item in items {
            let line = serde_json::to_string(item).expect("plain records always serialize");
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn print_answer(answer: &[u32]) {
    let ids: Vec<String> = answer.iter().map(u32::to_string).collect();
    println!("answer: {}", ids.join(" "));
}

fn cmd_prefill(args: PrefillArgs) -> Result<()> {
    let cfg = args.common.config(Mode::Acre);
    let (cache, out) = run_prefill(&cfg)?;
    if let Some(path) = &args.cache_out {
        save_cache(&cache, path)?;
        println!(
            "cache: {} ({} summaries over {} detail tokens, interval {})",
            path.display(),
            cache.summary_count(),
            cache.detail_count(),
            cache.interval()
        );
    }
    let records = [RunRecord::new(&cfg, out.metrics)];
    print!("{}", summary_table(&records));
    emit_records(&records, args.common.metrics_out.as_ref())
}

fn cmd_query(args: QueryArgs) -> Result<()> {
    let records = if let Some(cache_path) = &args.cache_in {
        let cache = load_cache(cache_path)?;
        let model = match &args.model_in {
            Some(path) => load_model(path)?,
            None => {
                TinyModel::init(ModelConfig { seed: args.common.seed, ..ModelConfig::default() })?
            }
        };
        let template = PromptTemplate::default();
        let query = template.wrap_query(&args.common.query, model.config().vocab_size)?;
        let rcfg = RefillConfig::new(args.common.eta, args.common.window, cache.interval())?;
        let out = query_cache(&model, &cache, &query, &rcfg, args.common.max_new)?;
        let echo = ExperimentConfig {
            corpus: CorpusSpec::Cached {
                path: cache_path.clone(),
                query: args.common.query.clone(),
            },
            l: cache.interval(),
            ..args.common.config(Mode::Acre)
        };
        print_answer(&out.answer);
        vec![RunRecord::new(&echo, out.metrics)]
    } else {
        let cfg = args.common.config(args.mode);
        let out = run(&cfg)?;
        print_answer(&out.answer);
        vec![RunRecord::new(&cfg, out.metrics)]
    };
    print!("{}", summary_table(&records));
    emit_records(&records, args.common.metrics_out.as_ref())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = args.common.config(args.mode);
    let records = sweep(args.param, &args.values, &base)?;
    print!("{}", summary_table(&records));
    emit_records(&records, args.common.metrics_out.as_ref())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut model = match &args.model_in {
        Some(path) => load_model(path)?,
        None => TinyModel::init(ModelConfig { seed: args.seed, ..ModelConfig::default() })?,
    };
    let mode =
        if args.eta == 0 { CacheMode::L1Only } else { CacheMode::Refilled { max_refill: args.eta } };
    let traces = match args.stage {
        0 => pretrain_base(
            &mut model,
            args.steps,
            args.lr,
            args.seed,
            args.pairs,
            MAX_QA_ALPHABET,
            args.l,
        )?,
        1 | 2 => {
            let cfg = TrainConfig {
                stage: if args.stage == 1 { Stage::One } else { Stage::Two },
                steps: args.steps,
                lr: args.lr,
                seed: args.seed,
                l: args.l,
                window: args.window,
                chunk: args.chunk,
                stream_len: args.stream_len,
                pairs: args.pairs,
                alphabet: MAX_QA_ALPHABET,
                mode,
            };
            train_steps(&mut model, &cfg)?
        }
        other => {
            return Err(Error::Config(format!("stage must be 0, 1, or 2, got {other}")));
        }
    };
    if let (Some(first), Some(last)) = (traces.first(), traces.last()) {
        println!(
            "stage {}: {} steps at lr {}, loss {:.4} -> {:.4}",
            args.stage,
            traces.len(),
            args.lr,
            first.loss,
            last.loss
        );
    }
    if let Some(path) = &args.model_out {
        save_model(&model, path)?;
        println!("model: {}", path.display());
    }
    emit_lines(&traces, args.metrics_out.as_ref())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let model = match &args.model_in {
        Some(path) => load_model(path)?,
        None => TinyModel::init(ModelConfig { seed: args.seed, ..ModelConfig::default() })?,
    };
    let ex = acre::train::synth::kv_recall(args.seed, args.pairs, MAX_QA_ALPHABET);
    let pcfg = acre::prefill::PrefillConfig::new(args.l, args.window, args.chunk)?;
    let mode =
        if args.eta == 0 { CacheMode::L1Only } else { CacheMode::Refilled { max_refill: args.eta } };
    let gc = GradCheckConfig {
        eps: args.eps,
        samples_per_family: args.samples,
        seed: args.seed ^ 0x6D,
        threshold: args.threshold,
    };
    let report = check_gradients(&model, &ex, &pcfg, mode, &gc)?;
    for family in &report.families {
        println!(
            "{:<10} {:>3} samples, max relative error {:.3e}",
            family.family, family.samples, family.max_rel_err
        );
    }
    println!(
        "frozen families zero: {}; overall max {:.3e} against threshold {:.1e}",
        report.frozen_zero, report.max_rel_err, report.threshold
    );
    emit_lines(std::slice::from_ref(&report), args.metrics_out.as_ref())?;
    if !report.passed {
        return Err(Error::Training {
            step: 0,
            reason: format!(
                "gradient check failed: max relative error {:.3e} over threshold {:.1e}",
                report.max_rel_err, report.threshold
            ),
        });
    }
    println!("gradient check passed");
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut records = Vec::new();
    let mut notes = Vec::new();
    for &n in &args.sizes {
        let base = ExperimentConfig {
            model: ModelConfig { seed: args.seed, ..ModelConfig::default() },
            corpus: CorpusSpec::Synthetic { len: n, query_len: 4 },
            l: args.l,
            window: args.window,
            eta: args.eta,
            chunk: args.chunk,
            max_new: args.max_new,
            sinks: args.sinks,
            cap: Some(args.cap),
            timing: args.timing,
            ..ExperimentConfig::default()
        };
        for mode in [Mode::Acre, Mode::Streaming, Mode::Full] {
            let cfg = ExperimentConfig { mode, ..base.clone() };
            match run(&cfg) {
                Ok(out) => records.push(RunRecord::new(&cfg, out.metrics)),
                // The cap demonstrating its point is a result, not an abort.
                Err(Error::Capacity { needed, cap }) => notes.push(format!(
                    "full      n={n}: {needed} live entries over the cap of {cap}"
                )),
                Err(e) => return Err(e),
            }
        }
    }
    print!("{}", summary_table(&records));
    for note in &notes {
        println!("{note}");
    }
    emit_records(&records, args.metrics_out.as_ref())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prefill(args) => cmd_prefill(args),
        Command::Query(args) => cmd_query(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Train(args) => cmd_train(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => match dispatch(cli) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                if matches!(e, Error::Capacity { .. }) {
                    ExitCode::from(2)
                } else {
                    ExitCode::from(1)
                }
            }
        },
        // --help and --version arrive as "errors" that are not failures.
        Err(e) => {
            let code = u8::from(e.use_stderr());
            e.print().expect("clap diagnostics print to a standard stream");
            ExitCode::from(code)
        }
    }
}
