//! Structural ablations: what the summary interval l and the refill budget
//! eta each buy, measured rather than asserted.
//!
//! The interval controls the hot tier directly — m = ceil(n/l) summaries
//! per layer and head — so doubling l halves resident memory. The refill
//! budget controls how much detail a query may pull back, in whole groups,
//! until the window is the binding constraint.
//!
//! Run with `cargo run -p acre --example parameter_sweep`.

use acre::harness::{sweep, summary_table, write_jsonl, CorpusSpec, ExperimentConfig, SweepParam};

fn main() -> acre::Result<()> {
    let base = ExperimentConfig {
        corpus: CorpusSpec::Synthetic { len: 1024, query_len: 4 },
        window: 512,
        eta: 64,
        ..ExperimentConfig::default()
    };

    // Hot entries march down 128, 64, 32, 16, 8 per layer-head as l climbs
    // the powers of two. The sweep itself verifies the monotonicity.
    println!("summary interval l over n = 1024:");
    let by_l = sweep(SweepParam::Interval, &[8, 16, 32, 64, 128], &base)?;
    print!("{}", summary_table(&by_l));

    // Below l the budget buys no whole group; past min(W − m, n) it cannot
    // buy more than exists. Between the two it grows in steps of l.
    let smaller = ExperimentConfig {
        corpus: CorpusSpec::Synthetic { len: 256, query_len: 4 },
        ..base
    };
    println!("\nrefill budget eta over n = 256 (m = 32, so 480 entries saturate):");
    let by_eta = sweep(SweepParam::Eta, &[0, 4, 8, 32, 128, 480, 4096], &smaller)?;
    print!("{}", summary_table(&by_eta));

    // Every row above is also a JSONL record carrying its full config, the
    // machine-readable form scripts consume. Identical sweeps produce
    // byte-identical files.
    let mut jsonl = Vec::new();
    write_jsonl(&by_eta, &mut jsonl)?;
    let text = String::from_utf8(jsonl).expect("JSON is UTF-8");
    println!("\nfirst JSONL record:\n{}", text.lines().next().unwrap());
    Ok(())
}
