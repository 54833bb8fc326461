//! Query-guided refilling: scoring the hot tier against a query, choosing
//! the detail groups worth pulling back, and decoding over the result.
//!
//! The scorer forwards the query through the model with an empty view and
//! measures how much attention each summary entry would receive — a
//! probability vector per layer, computed from summary keys only, so the
//! stored summary values never influence the selection. The budget formula
//! `k = floor(min(W − m, eta) / l)` converts window and refill budgets into
//! whole groups.
//!
//! Run with `cargo run -p acre --example query_refill`.

use acre::kernel::Rng;
use acre::model::{ModelConfig, TinyModel};
use acre::prefill::{prefill, PrefillConfig};
use acre::refill::{compute_k, decode, plan_refill, refill, score_layers, RefillConfig};

fn main() -> acre::Result<()> {
    let model = TinyModel::init(ModelConfig { seed: 5, ..ModelConfig::default() })?;
    let mut rng = Rng::new(11);
    let tokens: Vec<u32> = (0..128).map(|_| rng.next_below(64) as u32).collect();
    let cache = prefill(&model, &tokens, &PrefillConfig::new(8, 160, 16)?)?;
    let query: Vec<u32> = (0..4).map(|_| rng.next_below(64) as u32).collect();

    // One score per summary entry and layer, nonnegative, summing to one.
    let scores = score_layers(&model, &cache, &query)?;
    for (layer, s) in scores.iter().enumerate() {
        let sum: f32 = s.as_slice().iter().sum();
        let (best, weight) = s
            .as_slice()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        println!(
            "layer {layer}: {} scores, sum {sum:.6}, strongest group {best} at {weight:.4}",
            s.as_slice().len()
        );
        assert!((sum - 1.0).abs() < 1e-5);
    }

    // How the budgets turn into whole groups: m = 16 summaries here.
    println!("\nk = floor(min(W - m, eta) / l) with m = {}:", cache.summary_count());
    for (window, eta) in [(160, 64), (160, 7), (24, 4096), (4096, 4096)] {
        let cfg = RefillConfig::new(eta, window, 8)?;
        println!("  W {window:>4}, eta {eta:>4} -> k = {}", compute_k(&cfg, cache.summary_count()));
    }

    // Plan, splice, decode. The refilled view holds every summary plus the
    // chosen groups' detail, in nested order with strictly increasing
    // positions; decoding continues from the end of the stream.
    let cfg = RefillConfig::new(32, 160, 8)?;
    let plan = plan_refill(&model, &cache, &query, &cfg)?;
    println!("\nplan under eta = 32: k = {}, per-layer groups {:?}", plan.k, plan.selected);
    let mut view = refill(&cache, &plan)?;
    let rows = view.layers[0].len();
    assert_eq!(rows, cache.summary_count() + plan.refilled_entries(&cache) / plan.selected.len());
    let refilled = decode(&model, &mut view, &query, 12, None)?;

    // The same query without any detail: k = 0 leaves summaries only.
    let starved = plan_refill(&model, &cache, &query, &RefillConfig::new(0, 160, 8)?)?;
    let mut bare = refill(&cache, &starved)?;
    let summaries_only = decode(&model, &mut bare, &query, 12, None)?;

    println!("\nview of {rows} rows -> refilled decode:  {refilled:?}");
    println!("view of {} rows -> summaries-only decode: {summaries_only:?}", cache.summary_count());
    println!("\nthe detail the query pulled back changes what gets decoded");
    Ok(())
}
