//! Frequency-counted n-grams over the generated text, recalled by their
//! first token as extra draft branches.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use crate::{Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stats {
    freq: u64,
    /// Index of the generated token that last completed this gram.
    last_end: u64,
}

#[derive(Debug, Clone)]
pub struct NGramTable {
    n: usize,
    k_max: usize,
    counts: HashMap<Vec<TokenId>, Stats>,
    by_first: HashMap<TokenId, Vec<Vec<TokenId>>>,
    /// Generated tokens seen so far.
    seen: u64,
}

impl NGramTable {
    pub fn new(n: usize, k_max: usize) -> Self {
        assert!(n > 0, "n-gram length must be positive");
        Self {
            n,
            k_max,
            counts: HashMap::new(),
            by_first: HashMap::new(),
            seen: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn frequency(&self, gram: &[TokenId]) -> u64 {
        self.counts.get(gram).map_or(0, |s| s.freq)
    }

    /// Counts every window that ends inside `committed`. `tail` holds the
    /// generated tokens right before it; only its last `n - 1` are used.
    pub fn update(&mut self, committed: &[TokenId], tail: &[TokenId]) {
        let tail = &tail[tail.len().saturating_sub(self.n - 1)..];
        let mut joined = Vec::with_capacity(tail.len() + committed.len());
        joined.extend_from_slice(tail);
        joined.extend_from_slice(committed);
        let first_end = (tail.len() + 1).max(self.n);
        for end in first_end..=joined.len() {
            let gram = &joined[end - self.n..end];
            let end_index = self.seen + (end - tail.len()) as u64;
            match self.counts.get_mut(gram) {
                Some(s) => {
                    s.freq += 1;
                    s.last_end = end_index;
                }
                None => {
                    self.counts.insert(
                        gram.to_vec(),
                        Stats {
                            freq: 1,
                            last_end: end_index,
                        },
                    );
                    self.by_first
                        .entry(gram[0])
                        .or_default()
                        .push(gram.to_vec());
                }
            }
        }
        self.seen += committed.len() as u64;
    }

    /// Up to `k` grams starting with `first`, most frequent first; among
    /// equal counts the most recently completed gram wins. `k` is capped at
    /// `k_max`.
    pub fn retrieve(&self, first: TokenId, k: usize) -> Vec<Vec<TokenId>> {
        let k = k.min(self.k_max);
        if k == 0 {
            return Vec::new();
        }
        let Some(grams) = self.by_first.get(&first) else {
            return Vec::new();
        };
        let mut ranked: Vec<(&Vec<TokenId>, Stats)> =
            grams.iter().map(|g| (g, self.counts[g])).collect();
        ranked.sort_by(|a, b| {
            b.1.freq
                .cmp(&a.1.freq)
                .then_with(|| b.1.last_end.cmp(&a.1.last_end))
        });
        ranked.into_iter().take(k).map(|(g, _)| g.clone()).collect()
    }

    /// All `(gram, freq)` pairs as JSON lines, most frequent first.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            gram: &'a [TokenId],
            freq: u64,
        }
        let mut rows: Vec<(&Vec<TokenId>, &Stats)> = self.counts.iter().collect();
        rows.sort_by(|a, b| b.1.freq.cmp(&a.1.freq).then_with(|| a.0.cmp(b.0)));
        for (gram, s) in rows {
            serde_json::to_writer(&mut out, &Row { gram, freq: s.freq })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: TokenId = 1;
    const B: TokenId = 2;

    #[test]
    fn one_token_with_full_tail_counts_one_window() {
        let mut t = NGramTable::new(4, 20);
        t.update(&[7, 8, 9], &[]);
        assert_eq!(t.len(), 0);
        t.update(&[10], &[7, 8, 9]);
        assert_eq!(t.len(), 1);
        assert_eq!(t.frequency(&[7, 8, 9, 10]), 1);
    }

    #[test]
    fn alternating_bigrams() {
        let mut t = NGramTable::new(2, 20);
        t.update(&[A, B, A, B, A, B], &[]);
        assert_eq!(t.frequency(&[A, B]), 3);
        assert_eq!(t.frequency(&[B, A]), 2);
    }

    #[test]
    fn incremental_updates_match_single_pass() {
        let seq = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9, 3, 2, 3, 8, 4];
        let mut once = NGramTable::new(3, 20);
        once.update(&seq, &[]);
        let mut pieces = NGramTable::new(3, 20);
        let mut at = 0;
        for len in [1, 4, 2, 1, 7, 5] {
            pieces.update(&seq[at..at + len], &seq[..at]);
            at += len;
        }
        assert_eq!(once.counts, pieces.counts);
    }

    #[test]
    fn short_start_yields_nothing() {
        let mut t = NGramTable::new(4, 20);
        t.update(&[1, 2], &[]);
        assert!(t.is_empty());
    }

    #[test]
    fn retrieval_filters_and_sorts() {
        let mut t = NGramTable::new(4, 20);
        let q = 17;
        let (x, y, z, c, d) = (5, 6, 7, 3, 4);
        let mut seq = Vec::new();
        for _ in 0..5 {
            seq.extend([A, B, c, d, 0]);
        }
        for _ in 0..3 {
            seq.extend([A, x, y, z, 0]);
        }
        for _ in 0..9 {
            seq.extend([q, 8, 9, 10, 0]);
        }
        t.update(&seq, &[]);
        let got = t.retrieve(A, 2);
        assert_eq!(got, vec![vec![A, B, c, d], vec![A, x, y, z]]);
        assert!(t.retrieve(99, 5).is_empty());
        assert!(t.retrieve(A, 0).is_empty());
    }

    #[test]
    fn ties_prefer_recent() {
        let mut t = NGramTable::new(2, 20);
        t.update(&[A, 5, 0, A, 6, 0], &[]);
        assert_eq!(t.retrieve(A, 2), vec![vec![A, 6], vec![A, 5]]);
    }

    #[test]
    fn k_is_capped() {
        let mut t = NGramTable::new(2, 1);
        t.update(&[A, 5, A, 6], &[]);
        assert_eq!(t.retrieve(A, 10).len(), 1);
    }
}
