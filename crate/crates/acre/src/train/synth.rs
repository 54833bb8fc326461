//! Seeded synthetic corpora for training and evaluation.
//!
//! Everything here is deterministic per seed and deliberately tiny. The
//! streams carry enough structure that a learner's progress (or a frozen
//! family's lack of it) shows up in the loss; the key-value recall task is
//! sensitive to whether refilling actually brings back the right detail
//! segment, which is the property the toy training runs demonstrate.

use crate::kernel::Rng;
use crate::nested::TokenId;

/// Marker tokens for the recall task. They sit below the key alphabet so
/// the three roles never collide.
pub const KEY_MARK: TokenId = 1;
pub const VAL_MARK: TokenId = 2;
pub const QUERY_MARK: TokenId = 3;

const KEY_BASE: TokenId = 16;
const VAL_BASE: TokenId = 40;

/// Largest usable alphabet: keys occupy [16, 40), values [40, 64), so both
/// fit a 64-token vocabulary with no overlap.
pub const MAX_QA_ALPHABET: usize = 24;

/// Smallest vocabulary that contains every token a recall episode can emit.
pub const QA_VOCAB: usize = VAL_BASE as usize + MAX_QA_ALPHABET;

/// One key-value recall problem: the context lists `[KEY_MARK key VAL_MARK
/// value]` quadruples, the query names one key, the answer is its value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub context: Vec<TokenId>,
    pub query: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// Order-1 Markov stream: each token follows a fixed random successor table
/// with probability 0.9, otherwise jumps uniformly. Low conditional
/// entropy, so next-token prediction has something to learn.
#[must_use]
pub fn markov_stream(seed: u64, len: usize, vocab: usize) -> Vec<TokenId> {
    assert!(vocab >= 2);
    let mut rng = Rng::new(seed);
    let table: Vec<TokenId> =
        (0..vocab).map(|_| rng.next_below(vocab) as TokenId).collect();
    let mut cur = rng.next_below(vocab) as TokenId;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(cur);
        cur = if rng.next_f64() < 0.9 {
            table[cur as usize]
        } else {
            rng.next_below(vocab) as TokenId
        };
    }
    out
}

/// A random motif of `period` tokens repeated to `len` — the most
/// learnable stream there is, used for loss-decrease demonstrations.
#[must_use]
pub fn repetitive_stream(seed: u64, len: usize, vocab: usize, period: usize) -> Vec<TokenId> {
    assert!(period >= 1 && vocab >= 2);
    let mut rng = Rng::new(seed);
    let motif: Vec<TokenId> =
        (0..period).map(|_| rng.next_below(vocab) as TokenId).collect();
    (0..len).map(|i| motif[i % period]).collect()
}

/// Builds one recall example with `pairs` distinct keys. Keys and values
/// draw from disjoint alphabets of the given size (≤ [`MAX_QA_ALPHABET`]);
/// the probed pair is chosen uniformly. Context length is exactly
/// `4 * pairs`, so an interval of 8 aligns two pairs per summary group.
#[must_use]
pub fn kv_recall(seed: u64, pairs: usize, alphabet: usize) -> QaExample {
    assert!(pairs >= 1 && pairs <= alphabet && alphabet <= MAX_QA_ALPHABET);
    let mut rng = Rng::new(seed);
    let mut keys = rng.sample_indices(alphabet, pairs);
    // sample_indices returns ascending order; shuffle so key identity and
    // context position are uncorrelated.
    for i in (1..keys.len()).rev() {
        keys.swap(i, rng.next_below(i + 1));
    }
    let values: Vec<TokenId> =
        (0..pairs).map(|_| VAL_BASE + rng.next_below(alphabet) as TokenId).collect();
    let mut context = Vec::with_capacity(4 * pairs);
    for (k, &v) in keys.iter().zip(&values) {
        context.extend_from_slice(&[KEY_MARK, KEY_BASE + *k as TokenId, VAL_MARK, v]);
    }
    let probe = rng.next_below(pairs);
    QaExample {
        context,
        query: vec![QUERY_MARK, KEY_BASE + keys[probe] as TokenId],
        answer: vec![values[probe]],
    }
}
