//! The bi-layer cache itself: how a token stream becomes a nested sequence,
//! where every entry's position comes from in closed form, and how the two
//! tiers round-trip through the file format.
//!
//! Run with `cargo run -p acre --example bilayer_cache`.

use acre::cache::{cache_from_bytes, cache_to_bytes, recompose};
use acre::kernel::Rng;
use acre::model::{ModelConfig, TinyModel};
use acre::nested::{interleave, l1_position, l2_position, proxy_range, TokenKind};
use acre::prefill::{prefill, PrefillConfig};

fn main() -> acre::Result<()> {
    // Twenty tokens at summary interval 8: groups of eight detail (L2)
    // tokens, each closed by one summary (L1) token, the last group ragged.
    let tokens: Vec<u32> = (0..20).map(|t| t % 7).collect();
    let seq = interleave(&tokens, 8)?;
    let pattern: String = seq
        .items()
        .iter()
        .map(|it| if it.kind == TokenKind::L2 { '.' } else { 'S' })
        .collect();
    println!("nested stream (l = 8): {pattern}");
    println!(
        "n = {} detail + m = {} summary = {} entries",
        seq.detail_count(),
        seq.summary_count(),
        seq.len()
    );

    // Positions never need to be stored: entry j of the detail tier sits at
    // j + floor(j/l), and summary i right after the group it closes.
    println!("\nclosed-form positions:");
    for j in [0, 7, 8, 19] {
        println!("  detail {j:>2} -> position {}", l2_position(j, 8));
    }
    for i in 0..seq.summary_count() {
        let r = proxy_range(i, 8, seq.detail_count());
        println!(
            "  summary {i} -> position {:>2}, proxying details {:?}",
            l1_position(i, 8, seq.detail_count()),
            r
        );
    }
    for (idx, it) in seq.items().iter().enumerate() {
        assert_eq!(it.position, idx, "positions are just nested indices during prefill");
    }

    // Prefill splits the stream into the two tiers: summaries stay hot,
    // detail goes cold behind read counters.
    let model = TinyModel::init(ModelConfig::default())?;
    let mut rng = Rng::new(42);
    let long: Vec<u32> = (0..96).map(|_| rng.next_below(64) as u32).collect();
    let cache = prefill(&model, &long, &PrefillConfig::new(8, 128, 16)?)?;
    println!(
        "\nprefilled 96 tokens: {} hot entries, {} cold entries (layers x heads counted)",
        cache.hot_entries(),
        cache.cold_entries()
    );

    // Splicing every group back reproduces the nested order exactly.
    let all: Vec<usize> = (0..cache.summary_count()).collect();
    let layers = recompose(&cache, &all)?;
    let positions: Vec<usize> = layers[0].positions().to_vec();
    assert!(positions.windows(2).all(|w| w[0] + 1 == w[1]) && positions[0] == 0);
    println!("recompose(all groups) rebuilds positions 0..{} in order", positions.len());

    // The file format is little-endian with a trailing checksum; the bytes
    // round-trip exactly, and a flipped byte is caught rather than loaded.
    let bytes = cache_to_bytes(&cache);
    let back = cache_from_bytes(&bytes)?;
    assert_eq!(bytes, cache_to_bytes(&back));
    println!("\nserialized cache: {} bytes, round-trips bit-exactly", bytes.len());

    let mut corrupt = bytes.clone();
    corrupt[100] ^= 1;
    match cache_from_bytes(&corrupt) {
        Err(e) => println!("one flipped byte: {e}"),
        Ok(_) => unreachable!("corruption must not load"),
    }
    Ok(())
}
