//! Interpolated modified Kneser-Ney smoothing in backoff form.
//!
//! Highest-order probabilities are estimated from raw counts; lower orders
//! from continuation-type counts (raw for n-grams that start at a sentence
//! boundary, where nothing can precede the start marker). Per-order discounts
//! D1/D2/D3+ come from the Chen-Goodman count-of-count formulas; when those
//! degenerate on a toy corpus the order falls back to a single absolute
//! discount of 0.5 and the order is flagged in the model metadata.

use std::collections::HashMap;

use crate::error::Error;
use crate::ngram::CountTable;
use crate::vocab::{TokenId, TokenSequence, BOS_SYMBOL, EOS_SYMBOL, UNK_SYMBOL};
use crate::Result;

/// Natural-log placeholder for the start marker's unigram "probability"
/// (log10 of -99, the ARPA convention).
pub(crate) const BOS_LOGP: f64 = -99.0 * std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Entry {
    /// Natural-log probability.
    pub logp: f64,
    /// Natural-log backoff weight; 0.0 when this n-gram is never a context.
    pub backoff: f64,
}

/// Backoff n-gram model. All in-memory scores are natural logs; ARPA
/// serialization converts to/from log10.
#[derive(Debug, Clone)]
pub struct NGramModel {
    pub(crate) order: usize,
    /// Model-internal symbol table: regular tokens first, then markers.
    pub(crate) symbols: Vec<String>,
    pub(crate) bos: TokenId,
    pub(crate) eos: TokenId,
    /// Reserved unknown-token id, if the model has one.
    pub(crate) unk: Option<TokenId>,
    /// entries[k] holds (k+1)-gram entries.
    pub(crate) entries: Vec<HashMap<Vec<TokenId>, Entry>>,
    /// Orders whose discount estimation fell back to D = 0.5.
    pub(crate) discount_fallback_orders: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Discounts {
    d1: f64,
    d2: f64,
    d3: f64,
}

impl Discounts {
    fn flat(d: f64) -> Self {
        Discounts {
            d1: d,
            d2: d,
            d3: d,
        }
    }

    fn for_count(&self, c: u64) -> f64 {
        match c {
            0 => 0.0,
            1 => self.d1,
            2 => self.d2,
            _ => self.d3,
        }
    }
}

/// Chen-Goodman discounts from count-of-counts; `None` when degenerate.
fn estimate_discounts(counts: impl Iterator<Item = u64>) -> Option<Discounts> {
    let mut n = [0u64; 4];
    for c in counts {
        if (1..=4).contains(&c) {
            n[(c - 1) as usize] += 1;
        }
    }
    let [n1, n2, n3, n4] = n.map(|x| x as f64);
    if n[0] == 0 || n[1] == 0 || n[2] == 0 || n[3] == 0 {
        return None;
    }
    let y = n1 / (n1 + 2.0 * n2);
    let d = Discounts {
        d1: 1.0 - 2.0 * y * n2 / n1,
        d2: 2.0 - 3.0 * y * n3 / n2,
        d3: 3.0 - 4.0 * y * n4 / n3,
    };
    if d.d1 > 0.0 && d.d2 > 0.0 && d.d3 > 0.0 {
        Some(d)
    } else {
        None
    }
}

/// Train an interpolated modified-KN model from a count table.
///
/// The reserved `<unk>` token enters the unigram distribution with one
/// pseudo-count, so out-of-vocabulary events keep nonzero mass.
pub fn train_kn(counts: &CountTable, symbols: &[String]) -> Result<NGramModel> {
    let order = counts.order();
    let v = counts.vocab_size();
    if symbols.len() != v {
        return Err(Error::shape(format!(
            "train_kn: {} symbols for vocabulary of size {v}",
            symbols.len()
        )));
    }
    let bos = counts.bos();
    let eos = counts.eos();
    let unk = counts.unk();

    let mut all_symbols: Vec<String> = symbols.to_vec();
    all_symbols.push(BOS_SYMBOL.to_string());
    all_symbols.push(EOS_SYMBOL.to_string());
    all_symbols.push(UNK_SYMBOL.to_string());

    // Event counts per order: raw at the top, continuation types below
    // (raw again for bos-initial grams), plus the unk pseudo-count.
    let mut events: Vec<HashMap<Vec<TokenId>, u64>> = Vec::with_capacity(order);
    for n in 1..=order {
        let mut map: HashMap<Vec<TokenId>, u64> = HashMap::new();
        if n == order {
            for (gram, c) in counts.grams(n) {
                if *gram.last().unwrap() != bos {
                    map.insert(gram.clone(), c);
                }
            }
        } else {
            for (longer, _c) in counts.grams(n + 1) {
                let suffix = &longer[1..];
                if *suffix.last().unwrap() == bos {
                    continue;
                }
                *map.entry(suffix.to_vec()).or_insert(0) += 1;
            }
            // grams anchored at the sentence start keep raw counts
            for (gram, c) in counts.grams(n) {
                if gram[0] == bos && *gram.last().unwrap() != bos {
                    map.insert(gram.clone(), c);
                }
            }
        }
        if n == 1 {
            map.insert(vec![unk], 1);
        }
        events.push(map);
    }

    let mut fallback = Vec::new();
    let mut entries: Vec<HashMap<Vec<TokenId>, Entry>> = vec![HashMap::new(); order];

    for n in 1..=order {
        let ev = &events[n - 1];
        let discounts = match estimate_discounts(ev.values().copied()) {
            Some(d) => d,
            None => {
                fallback.push(n);
                Discounts::flat(0.5)
            }
        };

        // group events by context; sorted so float accumulation order (and
        // therefore every serialized byte) is reproducible
        let mut by_context: HashMap<Vec<TokenId>, Vec<(TokenId, u64)>> = HashMap::new();
        for (gram, &c) in ev {
            let (ctx, w) = gram.split_at(n - 1);
            by_context
                .entry(ctx.to_vec())
                .or_default()
                .push((w[0], c));
        }
        let mut grouped: Vec<(Vec<TokenId>, Vec<(TokenId, u64)>)> = by_context.into_iter().collect();
        grouped.sort_by(|a, b| a.0.cmp(&b.0));

        let n_uni_types = events[0].len() as f64;
        for (ctx, mut conts) in grouped {
            conts.sort_unstable();
            let total: u64 = conts.iter().map(|(_, c)| c).sum();
            let discounted: f64 = conts
                .iter()
                .map(|&(_, c)| discounts.for_count(c))
                .sum();
            let gamma = discounted / total as f64;
            for (w, c) in &conts {
                let base = (*c as f64 - discounts.for_count(*c)).max(0.0) / total as f64;
                let lower = if n == 1 {
                    // uniform over the observed unigram event space
                    1.0 / n_uni_types
                } else {
                    let mut key = ctx[1..].to_vec();
                    key.push(*w);
                    entries[n - 2]
                        .get(&key)
                        .map(|e| e.logp.exp())
                        .ok_or_else(|| {
                            Error::contract(format!(
                                "kn: missing lower-order entry for {key:?}"
                            ))
                        })?
                };
                let p = base + gamma * lower;
                let mut gram = ctx.clone();
                gram.push(*w);
                entries[n - 1].insert(
                    gram,
                    Entry {
                        logp: p.ln(),
                        backoff: 0.0,
                    },
                );
            }
            // hang the interpolation weight on the context as its backoff
            if !ctx.is_empty() {
                let e = entries[ctx.len() - 1].entry(ctx.clone()).or_insert(Entry {
                    logp: BOS_LOGP,
                    backoff: 0.0,
                });
                e.backoff = gamma.ln();
            }
        }
    }

    // make sure the start marker has its placeholder even in corner cases
    entries[0].entry(vec![bos]).or_insert(Entry {
        logp: BOS_LOGP,
        backoff: 0.0,
    });

    Ok(NGramModel {
        order,
        symbols: all_symbols,
        bos,
        eos,
        unk: Some(unk),
        entries,
        discount_fallback_orders: fallback,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk
    }

    /// Orders where discount estimation fell back to an absolute 0.5.
    pub fn discount_fallback_orders(&self) -> &[usize] {
        &self.discount_fallback_orders
    }

    pub fn ngram_count(&self, n: usize) -> usize {
        self.entries[n - 1].len()
    }

    fn has_unigram(&self, t: TokenId) -> bool {
        self.entries[0].contains_key(std::slice::from_ref(&t))
    }

    /// Map any id without a unigram entry to `<unk>` (or leave it; a missing
    /// unigram then scores -inf).
    fn resolve(&self, t: TokenId) -> TokenId {
        if t < self.symbols.len() && self.has_unigram(t) {
            t
        } else {
            self.unk.unwrap_or(t)
        }
    }

    pub(crate) fn stored(&self, gram: &[TokenId]) -> Option<Entry> {
        self.entries[gram.len() - 1].get(gram).copied()
    }

    /// Backoff-resolved natural-log probability of `token` after `context`.
    /// Only the trailing `order-1` context tokens matter; out-of-vocabulary
    /// ids map to `<unk>`.
    pub fn score(&self, context: &[TokenId], token: TokenId) -> f64 {
        let w = self.resolve(token);
        let keep = context.len().min(self.order - 1);
        let mut ctx: Vec<TokenId> = context[context.len() - keep..]
            .iter()
            .map(|&t| self.resolve(t))
            .collect();
        let mut acc = 0.0;
        loop {
            let mut gram = ctx.clone();
            gram.push(w);
            if let Some(e) = self.stored(&gram) {
                return acc + e.logp;
            }
            if ctx.is_empty() {
                // not even a unigram: zero probability
                return f64::NEG_INFINITY;
            }
            if let Some(c) = self.stored(&ctx) {
                acc += c.backoff;
            }
            ctx.remove(0);
        }
    }

    /// Σ over positions of `score`, with the start marker as initial context.
    /// The end-marker factor is added iff `include_eos` (internal-LM usage
    /// scores exactly the U emitted tokens and sets it false).
    pub fn sequence_logprob(&self, y: &TokenSequence, include_eos: bool) -> Result<f64> {
        if y.is_empty() {
            return Err(Error::input("sequence_logprob: empty sequence"));
        }
        let mut ctx: Vec<TokenId> = vec![self.bos];
        let mut total = 0.0;
        for &t in y {
            total += self.score(&ctx, t);
            ctx.push(t);
        }
        if include_eos {
            total += self.score(&ctx, self.eos);
        }
        Ok(total)
    }

    /// exp(−(Σ log-probs with eos) / (token count incl. end markers)).
    pub fn perplexity(&self, corpus: &[TokenSequence]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::input("perplexity: empty corpus"));
        }
        let mut lp = 0.0;
        let mut n = 0usize;
        for y in corpus {
            lp += self.sequence_logprob(y, true)?;
            n += y.len() + 1;
        }
        Ok((-lp / n as f64).exp())
    }

    /// Event space for normalization: every id with a unigram entry except
    /// the start marker.
    pub fn event_ids(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.symbols.len())
            .filter(|&t| t != self.bos && self.has_unigram(t))
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Observed contexts (any stored n-gram of length < order, plus the
    /// empty context).
    pub fn contexts(&self) -> Vec<Vec<TokenId>> {
        let mut out = vec![Vec::new()];
        for n in 1..self.order {
            let mut keys: Vec<Vec<TokenId>> = self.entries[n - 1].keys().cloned().collect();
            keys.sort_unstable();
            out.extend(keys);
        }
        out
    }

    /// Max over observed contexts of |Σ_w P(w|ctx) − 1|.
    pub fn normalization_defect(&self) -> f64 {
        let events = self.event_ids();
        let mut worst = 0.0f64;
        for ctx in self.contexts() {
            let total: f64 = events.iter().map(|&w| self.score(&ctx, w).exp()).sum();
            worst = worst.max((total - 1.0).abs());
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::count_ngrams;
    use crate::vocab::Vocab;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// The 3-sentence corpus whose full modified-KN model was worked out by
    /// hand (all quantities are dyadic or small rationals, so the expected
    /// values below are exact).
    fn fixture_model() -> (Vocab, NGramModel) {
        let v = Vocab::new(["a", "b", "c"].map(String::from)).unwrap();
        let corpus: Vec<_> = ["a b", "a c", "b c"]
            .iter()
            .map(|l| v.encode_line(l).unwrap())
            .collect();
        let t = count_ngrams(&corpus, 2, v.len()).unwrap();
        let m = train_kn(&t, v.symbols()).unwrap();
        (v, m)
    }

    #[test]
    fn kn_fixture_matches_hand_computation() {
        // Hand derivation: order-2 count-of-counts are n1=5, n2=2, n3=n4=0
        // (degenerate) and the unigram continuation counts are {1,2,2,2,1}
        // (degenerate), so both orders use the flat 0.5 discount.
        //   unigrams: P(a)=1/8 P(b)=1/4 P(c)=1/4 P(</s>)=1/4 P(<unk>)=1/8
        //   backoffs: bo(<s>)=1/3 bo(a)=1/2 bo(b)=1/2 bo(c)=1/4
        //   bigrams:  P(a|<s>)=13/24 P(b|<s>)=1/4 P(b|a)=3/8 P(c|a)=3/8
        //             P(c|b)=3/8 P(</s>|b)=3/8 P(</s>|c)=13/16
        let (_v, m) = fixture_model();
        let (a, b, c) = (0usize, 1usize, 2usize);
        let bos = m.bos_id();
        let eos = m.eos_id();
        let unk = m.unk_id().unwrap();

        assert_eq!(m.discount_fallback_orders(), &[1, 2]);

        let uni = [
            (a, 1.0f64 / 8.0),
            (b, 1.0 / 4.0),
            (c, 1.0 / 4.0),
            (eos, 1.0 / 4.0),
            (unk, 1.0 / 8.0),
        ];
        for (t, p) in uni {
            let got = m.stored(&[t]).unwrap().logp;
            assert!(close(got, p.ln(), 1e-6), "unigram {t}: {got} vs {}", p.ln());
        }

        let backoffs = [(bos, 1.0f64 / 3.0), (a, 0.5), (b, 0.5), (c, 0.25)];
        for (t, w) in backoffs {
            let got = m.stored(&[t]).unwrap().backoff;
            assert!(close(got, w.ln(), 1e-6), "backoff {t}: {got} vs {}", w.ln());
        }

        let bi = [
            (vec![bos, a], 13.0f64 / 24.0),
            (vec![bos, b], 1.0 / 4.0),
            (vec![a, b], 3.0 / 8.0),
            (vec![a, c], 3.0 / 8.0),
            (vec![b, c], 3.0 / 8.0),
            (vec![b, eos], 3.0 / 8.0),
            (vec![c, eos], 13.0 / 16.0),
        ];
        for (gram, p) in bi {
            let got = m.stored(&gram).unwrap().logp;
            assert!(close(got, p.ln(), 1e-6), "bigram {gram:?}: {got} vs {}", p.ln());
        }
        assert_eq!(m.ngram_count(2), 7);
        // start marker carries the placeholder probability
        assert!(close(m.stored(&[bos]).unwrap().logp, BOS_LOGP, 1e-9));
    }

    #[test]
    fn fixture_is_normalized() {
        let (_v, m) = fixture_model();
        assert!(m.normalization_defect() <= 1e-9);
    }

    #[test]
    fn backoff_path_matches_hand_trace() {
        // (c, a) is unseen: P(a|c) = bo(c)·P(a) = 1/4 · 1/8 = 1/32.
        let (_v, m) = fixture_model();
        let got = m.score(&[2], 0);
        assert!(close(got, (1.0f64 / 32.0).ln(), 1e-9), "got {got}");
    }

    #[test]
    fn score_uses_only_trailing_context() {
        let (_v, m) = fixture_model();
        for w in 0..3usize {
            let full = m.score(&[0, 1, 2], w);
            let trunc = m.score(&[2], w);
            assert_eq!(full, trunc);
        }
    }

    #[test]
    fn oov_scores_as_unk() {
        let (_v, m) = fixture_model();
        let unk = m.unk_id().unwrap();
        assert_eq!(m.score(&[], 999), m.score(&[], unk));
        // unseen context token also resolves through unk
        assert_eq!(m.score(&[999], 0), m.score(&[unk], 0));
    }

    #[test]
    fn sequence_logprob_is_additive_and_matches_hand_value() {
        let (v, m) = fixture_model();
        let y = v.encode_line("a b").unwrap();
        let no_eos = m.sequence_logprob(&y, false).unwrap();
        // P(a|<s>)·P(b|a) = 13/24 · 3/8
        assert!(close(no_eos, (13.0f64 / 24.0).ln() + (3.0f64 / 8.0).ln(), 1e-9));
        let with_eos = m.sequence_logprob(&y, true).unwrap();
        assert!(close(with_eos, no_eos + (3.0f64 / 8.0).ln(), 1e-9));

        // additivity against per-token score calls
        let mut acc = 0.0;
        let mut ctx = vec![m.bos_id()];
        for &t in &y {
            acc += m.score(&ctx, t);
            ctx.push(t);
        }
        assert!(close(no_eos, acc, 1e-12));
    }

    #[test]
    fn single_token_sequence_scores_from_start_marker() {
        let (_v, m) = fixture_model();
        let lp = m.sequence_logprob(&vec![0], false).unwrap();
        assert!(close(lp, (13.0f64 / 24.0).ln(), 1e-9));
    }

    #[test]
    fn perplexity_fixture() {
        let (v, m) = fixture_model();
        // single-sentence corpus "a b": PPL = exp(-(ln P(a|<s>)+ln P(b|a)+ln P(</s>|b))/3)
        let corpus = vec![v.encode_line("a b").unwrap()];
        let expect =
            (-((13.0f64 / 24.0).ln() + (3.0f64 / 8.0).ln() + (3.0f64 / 8.0).ln()) / 3.0).exp();
        let got = m.perplexity(&corpus).unwrap();
        assert!(close(got, expect, 1e-9), "{got} vs {expect}");
        assert!(got.is_finite() && got > 0.0);
    }

    #[test]
    fn near_uniform_corpus_is_symmetric() {
        // Sentences enumerating every symbol once give equal counts to every
        // symbol and to the end marker; smoothing must preserve the symmetry.
        // The reserved <unk> pseudo-count keeps a small slice of mass, so the
        // shared value sits just below 1/(V+1).
        let v = Vocab::synthetic(10);
        let corpus: Vec<_> = (0..50).map(|_| (0..10usize).collect()).collect();
        let t = count_ngrams(&corpus, 1, v.len()).unwrap();
        let m = train_kn(&t, v.symbols()).unwrap();
        let p0 = m.score(&[], 0).exp();
        for w in 1..10usize {
            assert!(close(m.score(&[], w).exp(), p0, 1e-12));
        }
        assert!(close(m.score(&[], m.eos_id()).exp(), p0, 1e-12));
        // exact value: counts of 50 over a total of 551 (incl. the pseudo-count)
        assert!(close(p0, 50.0 / 551.0, 1e-12), "p0 {p0}");
        let uniform = 1.0 / 11.0;
        assert!((p0 - uniform).abs() < 3e-3 * uniform, "p0 {p0} vs {uniform}");
        let punk = m.score(&[], m.unk_id().unwrap()).exp();
        assert!(close(11.0 * p0 + punk, 1.0, 1e-9));
        assert!(m.normalization_defect() <= 1e-9);
    }

    #[test]
    fn trained_models_normalize_on_random_corpora() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for case in 0..20 {
            let vs = rng.random_range(2..6usize);
            let v = Vocab::synthetic(vs);
            let n_sent = rng.random_range(3..40);
            let corpus: Vec<_> = (0..n_sent)
                .map(|_| {
                    let len = rng.random_range(1..7);
                    (0..len).map(|_| rng.random_range(0..vs)).collect()
                })
                .collect();
            let order = rng.random_range(1..4usize);
            let t = count_ngrams(&corpus, order, vs).unwrap();
            let m = train_kn(&t, v.symbols()).unwrap();
            let defect = m.normalization_defect();
            assert!(defect <= 1e-9, "case {case}: defect {defect}");
        }
    }

    #[test]
    fn pruned_models_still_normalize() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(321);
        let vs = 5usize;
        let v = Vocab::synthetic(vs);
        let corpus: Vec<_> = (0..80)
            .map(|_| {
                let len = rng.random_range(1..8);
                (0..len).map(|_| rng.random_range(0..vs)).collect()
            })
            .collect();
        let t = count_ngrams(&corpus, 2, vs).unwrap();
        for k in [0usize, 1, 5, 12, 1000] {
            let m = train_kn(&prune_top_k_local(&t, k), v.symbols()).unwrap();
            assert!(m.normalization_defect() <= 1e-9, "k={k}");
        }
    }

    fn prune_top_k_local(t: &CountTable, k: usize) -> CountTable {
        crate::ngram::prune_top_k(t, k)
    }
}
