//! The two training stages, end to end: stage 1 teaches summaries to stand
//! in for pruned detail on next-token prediction; stage 2 teaches them to
//! coexist with refilled detail on a recall task. Only the four summary
//! families ever move — the base model stays frozen, so a trained cache
//! remains readable by the engine that wrote it.
//!
//! Run with `cargo run --example two_stage_training`.

use acre::model::{ModelConfig, TinyModel};
use acre::train::synth::kv_recall;
use acre::train::{
    pretrain_base, qa_accuracy, qa_answer, train_steps, CacheMode, Stage, TrainConfig,
};
use acre::Result;

fn main() -> Result<()> {
    // ── Stage 1: next-token prediction through a tight window ────────────
    //
    // The window forces pruning, so late positions can only see early
    // context through summaries. Descent here means the summary families
    // are learning to compress.
    let mut model = TinyModel::init(ModelConfig::default())?;
    let cfg = TrainConfig { steps: 200, lr: 0.1, ..TrainConfig::default() };
    println!("stage 1: {} steps over a fixed stream, window {}", cfg.steps, cfg.window);
    let traces = train_steps(&mut model, &cfg)?;
    for t in traces.iter().step_by(25).chain(traces.last()) {
        println!("  step {:>3}  loss {:.4}", t.step, t.loss);
    }
    let (first, last) = (traces.first().unwrap().loss, traces.last().unwrap().loss);
    println!("  uniform guessing over 64 tokens would sit at ln 64 = {:.4}", (64f64).ln());
    assert!(last < first, "fixed-corpus descent must reduce the loss");

    // ── Stage 2: key-value recall with and without refilling ─────────────
    //
    // Summary training cannot help while the frozen pathway is illiterate,
    // so first boot the base families on the flat task (summaries stay
    // bit-identical), then train summaries under the refilled view.
    let (pairs, alphabet, l) = (3usize, 6usize, 8usize);
    let mut qa = TinyModel::init(ModelConfig { seed: 1, ..ModelConfig::default() })?;
    println!("\nbooting the frozen pathway on flat recall ({pairs} pairs, alphabet {alphabet})");
    let boot = pretrain_base(&mut qa, 30_000, 0.1, 0, pairs, alphabet, l)?;
    for t in boot.iter().step_by(6000).chain(boot.last()) {
        println!("  step {:>5}  loss {:.4}", t.step, t.loss);
    }

    let stage2 = TrainConfig {
        stage: Stage::Two,
        steps: 800,
        lr: 0.05,
        seed: 0,
        l,
        pairs,
        alphabet,
        mode: CacheMode::Refilled { max_refill: 64 },
        ..TrainConfig::default()
    };
    println!("stage 2: {} steps against refilled caches", stage2.steps);
    let s2 = train_steps(&mut qa, &stage2)?;
    println!("  loss {:.4} -> {:.4}", s2.first().unwrap().loss, s2.last().unwrap().loss);

    // Held-out accuracy, same trained model, two ways of reading the cache.
    let held_out = 1_000_000u64;
    let refilled = CacheMode::Refilled { max_refill: 64 };
    let acc_refilled = qa_accuracy(&qa, held_out, 50, pairs, alphabet, l, refilled)?;
    let acc_l1 = qa_accuracy(&qa, held_out, 50, pairs, alphabet, l, CacheMode::L1Only)?;
    println!("\nheld-out exact match over 50 episodes (chance = {:.2}):", 1.0 / alphabet as f64);
    println!("  summaries + refilled detail  {acc_refilled:.2}");
    println!("  summaries only               {acc_l1:.2}");

    // One concrete episode for color.
    let ex = kv_recall(held_out, pairs, alphabet);
    let got = qa_answer(&qa, &ex, l, refilled)?;
    println!("\nsample episode:");
    println!("  context {:?}", ex.context);
    println!("  query   {:?}", ex.query);
    println!("  wanted  {:?}, decoded {:?}", ex.answer, got);
    Ok(())
}
