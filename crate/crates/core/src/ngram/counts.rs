//! N-gram counting over token sequences, with sentence-boundary padding and
//! top-K pruning of the maximal order.

use std::collections::HashMap;

use crate::error::Error;
use crate::vocab::{TokenId, TokenSequence};
use crate::Result;

/// Raw n-gram occurrence counts up to a fixed order.
///
/// Ids `0..vocab_size` are the regular tokens of the source vocabulary;
/// `bos()`/`eos()` are appended sentence markers and `unk()` is reserved for
/// the smoother. Every window of every length up to `order` is counted, so
/// each n-gram's prefix is always present.
#[derive(Debug, Clone)]
pub struct CountTable {
    order: usize,
    vocab_size: usize,
    /// counts[k] holds (k+1)-gram counts.
    counts: Vec<HashMap<Vec<TokenId>, u64>>,
}

impl CountTable {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn bos(&self) -> TokenId {
        self.vocab_size
    }

    pub fn eos(&self) -> TokenId {
        self.vocab_size + 1
    }

    pub fn unk(&self) -> TokenId {
        self.vocab_size + 2
    }

    pub fn count(&self, gram: &[TokenId]) -> u64 {
        assert!(!gram.is_empty() && gram.len() <= self.order);
        self.counts[gram.len() - 1].get(gram).copied().unwrap_or(0)
    }

    pub fn grams(&self, n: usize) -> impl Iterator<Item = (&Vec<TokenId>, u64)> {
        assert!(n >= 1 && n <= self.order);
        self.counts[n - 1].iter().map(|(g, &c)| (g, c))
    }

    pub fn total(&self, n: usize) -> u64 {
        assert!(n >= 1 && n <= self.order);
        self.counts[n - 1].values().sum()
    }
}

/// Count all n-grams up to `order` with (order−1) start markers prepended and
/// one end marker appended per sentence.
pub fn count_ngrams(
    corpus: &[TokenSequence],
    order: usize,
    vocab_size: usize,
) -> Result<CountTable> {
    if corpus.is_empty() {
        return Err(Error::input("count_ngrams: empty corpus"));
    }
    if order < 1 {
        return Err(Error::input("count_ngrams: order must be >= 1"));
    }
    let bos = vocab_size;
    let eos = vocab_size + 1;
    let mut counts: Vec<HashMap<Vec<TokenId>, u64>> = vec![HashMap::new(); order];
    for sentence in corpus {
        for &t in sentence {
            if t >= vocab_size {
                return Err(Error::input(format!(
                    "count_ngrams: token id {t} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        let mut padded = Vec::with_capacity(sentence.len() + order);
        padded.extend(std::iter::repeat_n(bos, order - 1));
        padded.extend_from_slice(sentence);
        padded.push(eos);
        for n in 1..=order {
            for window in padded.windows(n) {
                *counts[n - 1].entry(window.to_vec()).or_insert(0) += 1;
            }
        }
    }
    Ok(CountTable {
        order,
        vocab_size,
        counts,
    })
}

/// Keep only the `k` highest-count maximal-order n-grams; lower orders are
/// untouched. Count ties are broken by token-id order, lower tuple first.
pub fn prune_top_k(counts: &CountTable, k: usize) -> CountTable {
    let mut pruned = counts.clone();
    let top = &mut pruned.counts[counts.order - 1];
    if top.len() <= k {
        return pruned;
    }
    let mut entries: Vec<(Vec<TokenId>, u64)> = top.drain().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(k);
    top.extend(entries);
    pruned
}
