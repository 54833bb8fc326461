//! Nested sequences: a detail (L2) token stream with a summary (L1) token
//! inserted after every `l` detail tokens, and after the trailing partial
//! group if the length is not a multiple of `l`.
//!
//! For `n` detail tokens this yields `m = ceil(n / l)` summary slots; the
//! `i`-th summary token stands for ("proxies") the detail range
//! `[i*l, min((i+1)*l, n))`. Nested positions number the combined stream
//! `0..n+m` and are what the rotary embedding sees downstream.

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Which projection family a token routes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Summary token: one learned embedding, trainable projections.
    L1,
    /// Detail token: ordinary vocab embedding, frozen projections.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NestedItem {
    pub kind: TokenKind,
    /// Vocab id for L2 items; L2 groups share their L1 item's slot, whose
    /// `token` is 0 and never read (L1 items embed through a dedicated row).
    pub token: TokenId,
    /// Index in the combined stream; doubles as the rotary position.
    pub position: usize,
}

/// The combined stream plus its bookkeeping. Constructed by [`interleave`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestedSequence {
    items: Vec<NestedItem>,
    l: usize,
    n: usize,
    m: usize,
}

/// `ceil(n / l)` summary slots for `n` detail tokens at interval `l`.
#[must_use]
pub const fn summary_count(n: usize, l: usize) -> usize {
    n.div_ceil(l)
}

/// Nested position of the `j`-th detail token (0-based): `j` plus the number
/// of summary tokens inserted before it.
#[must_use]
pub const fn l2_position(j: usize, l: usize) -> usize {
    j + j / l
}

/// Nested position of the `i`-th summary token: right after the last detail
/// token of its group.
#[must_use]
pub fn l1_position(i: usize, l: usize, n: usize) -> usize {
    let range_end = ((i + 1) * l).min(n);
    range_end + i
}

/// The detail range the `i`-th summary token proxies.
#[must_use]
pub fn proxy_range(i: usize, l: usize, n: usize) -> std::ops::Range<usize> {
    i * l..((i + 1) * l).min(n)
}

/// Builds the nested stream for `tokens` at summary interval `l`.
pub fn interleave(tokens: &[TokenId], l: usize) -> Result<NestedSequence> {
    if l == 0 {
        return Err(Error::Config("summary interval l must be at least 1".into()));
    }
    if tokens.is_empty() {
        return Err(Error::Precondition("cannot interleave an empty token stream".into()));
    }
    let n = tokens.len();
    let m = summary_count(n, l);
    let mut items = Vec::with_capacity(n + m);
    for (j, &tok) in tokens.iter().enumerate() {
        items.push(NestedItem { kind: TokenKind::L2, token: tok, position: items.len() });
        if (j + 1) % l == 0 || j + 1 == n {
            items.push(NestedItem { kind: TokenKind::L1, token: 0, position: items.len() });
        }
    }
    debug_assert_eq!(items.len(), n + m);
    Ok(NestedSequence { items, l, n, m })
}

impl NestedSequence {
    #[must_use]
    pub fn items(&self) -> &[NestedItem] {
        &self.items
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.items.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Summary interval `l`.
    #[must_use]
    pub fn interval(&self) -> usize {
        self.l
    }

    /// Detail token count `n`.
    #[must_use]
    pub fn detail_count(&self) -> usize {
        self.n
    }

    /// Summary token count `m = ceil(n/l)`.
    #[must_use]
    pub fn summary_count(&self) -> usize {
        self.m
    }
}

/// Checks that a kind pattern is exactly what [`interleave`] would emit for
/// some stream at interval `l`; returns `(n, m)`. Errors name the first
/// offending index, so malformed caches fail loudly rather than desync.
pub fn validate_kind_pattern(kinds: &[TokenKind], l: usize) -> Result<(usize, usize)> {
    if l == 0 {
        return Err(Error::Config("summary interval l must be at least 1".into()));
    }
    let mut n = 0usize;
    let mut m = 0usize;
    let mut run = 0usize; // L2 items since the last L1
    for (idx, &kind) in kinds.iter().enumerate() {
        match kind {
            TokenKind::L2 => {
                if run == l {
                    return Err(Error::Structure {
                        index: idx,
                        reason: format!("expected a summary item after {l} detail items"),
                    });
                }
                run += 1;
                n += 1;
            }
            TokenKind::L1 => {
                if run == 0 {
                    return Err(Error::Structure {
                        index: idx,
                        reason: "summary item proxies an empty detail group".into(),
                    });
                }
                run = 0;
                m += 1;
            }
        }
    }
    if kinds.is_empty() {
        return Err(Error::Precondition("empty kind pattern".into()));
    }
    if run != 0 {
        return Err(Error::Structure {
            index: kinds.len() - 1,
            reason: "stream ends with an unsummarized detail group".into(),
        });
    }
    debug_assert_eq!(m, summary_count(n, l));
    Ok((n, m))
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds(seq: &NestedSequence) -> Vec<TokenKind> {
        seq.items().iter().map(|it| it.kind).collect()
    }

    #[test]
    fn five_tokens_interval_two_matches_hand_expansion() {
        use TokenKind::{L1, L2};
        let seq = interleave(&[1, 2, 3, 4, 5], 2).unwrap();
        assert_eq!(seq.detail_count(), 5);
        assert_eq!(seq.summary_count(), 3);
        assert_eq!(kinds(&seq), vec![L2, L2, L1, L2, L2, L1, L2, L1]);
        let toks: Vec<u32> = seq
            .items()
            .iter()
            .filter(|it| it.kind == L2)
            .map(|it| it.token)
            .collect();
        assert_eq!(toks, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn summary_counts_for_64_tokens_across_intervals() {
        // Frozen from the closed form m = ceil(n/l) evaluated by hand.
        for (l, want_m) in [(8, 8), (16, 4), (32, 2), (64, 1), (128, 1)] {
            let tokens: Vec<u32> = (0..64).collect();
            let seq = interleave(&tokens, l).unwrap();
            assert_eq!(seq.summary_count(), want_m, "l={l}");
            assert_eq!(summary_count(64, l), want_m);
        }
    }

    #[test]
    fn positions_are_consecutive_and_match_closed_forms() {
        let tokens: Vec<u32> = (0..13).collect();
        let seq = interleave(&tokens, 5).unwrap();
        for (i, item) in seq.items().iter().enumerate() {
            assert_eq!(item.position, i);
        }
        // Closed-form position helpers agree with the built stream.
        let mut j = 0usize;
        let mut i = 0usize;
        for item in seq.items() {
            match item.kind {
                TokenKind::L2 => {
                    assert_eq!(item.position, l2_position(j, 5));
                    j += 1;
                }
                TokenKind::L1 => {
                    assert_eq!(item.position, l1_position(i, 5, 13));
                    i += 1;
                }
            }
        }
        assert_eq!(proxy_range(2, 5, 13), 10..13); // trailing partial group
    }

    #[test]
    fn rejects_zero_interval_and_empty_stream() {
        assert!(matches!(interleave(&[1], 0), Err(crate::Error::Config(_))));
        assert!(matches!(interleave(&[], 4), Err(crate::Error::Precondition(_))));
    }

    #[test]
    fn validate_accepts_own_output_and_names_first_bad_index() {
        use TokenKind::{L1, L2};
        let seq = interleave(&(0..23u32).collect::<Vec<_>>(), 4).unwrap();
        assert_eq!(validate_kind_pattern(&kinds(&seq), 4).unwrap(), (23, 6));

        // A detail run of length l+1 must be flagged at the overflow item.
        let bad = vec![L2, L2, L2, L2, L2];
        let err = validate_kind_pattern(&bad, 4).unwrap_err();
        match err {
            crate::Error::Structure { index, .. } => assert_eq!(index, 4),
            other => panic!("wrong error: {other}"),
        }

        // Leading L1 proxies nothing.
        assert!(validate_kind_pattern(&[L1, L2, L2, L1], 2).is_err());
        // Trailing unsummarized group.
        assert!(validate_kind_pattern(&[L2, L2, L1, L2], 2).is_err());
    }

    proptest! {
        #[test]
        fn interleave_structure_holds_for_arbitrary_sizes(
            n in 1usize..700,
            l in 1usize..80,
        ) {
            let tokens: Vec<u32> = (0..n as u32).collect();
            let seq = interleave(&tokens, l).unwrap();
            prop_assert_eq!(seq.len(), n + summary_count(n, l));
            prop_assert_eq!(seq.summary_count(), n.div_ceil(l));

            // Every run of detail items between summaries has length l,
            // except possibly the last.
            let ks = kinds(&seq);
            prop_assert!(validate_kind_pattern(&ks, l).is_ok());

            // Positions are 0..len, strictly increasing by construction.
            for (i, item) in seq.items().iter().enumerate() {
                prop_assert_eq!(item.position, i);
            }
        }
    }
}
