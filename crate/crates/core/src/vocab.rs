//! Token inventory shared by the transducer, the language models and the
//! file formats.
//!
//! `TokenId` indexes the emittable (non-blank) symbols only. The blank label
//! and the prediction-network start symbol never appear in a
//! `TokenSequence`; models reserve their own internal rows/logits for them.
//! Sentence markers (`<s>`, `</s>`) and `<unk>` are likewise internal to the
//! n-gram module.

use std::collections::HashMap;

use crate::error::Error;
use crate::Result;

/// Index of an emittable token, dense in `0..vocab.len()`.
pub type TokenId = usize;

/// A label sequence Y of non-blank tokens.
pub type TokenSequence = Vec<TokenId>;

pub const BLANK_SYMBOL: &str = "<blk>";
pub const BOS_SYMBOL: &str = "<s>";
pub const EOS_SYMBOL: &str = "</s>";
pub const UNK_SYMBOL: &str = "<unk>";

/// Bidirectional symbol table. Ids are assigned in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(symbols: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = Vocab {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        for s in symbols {
            v.push(s)?;
        }
        Ok(v)
    }

    /// `w00, w01, ...` used by the synthetic data generator.
    pub fn synthetic(n: usize) -> Self {
        let width = if n <= 100 { 2 } else { 3 };
        Vocab::new((0..n).map(|i| format!("w{i:0width$}"))).expect("generated symbols are unique")
    }

    pub fn push(&mut self, symbol: String) -> Result<TokenId> {
        if self.index.contains_key(&symbol) {
            return Err(Error::input(format!("duplicate vocabulary symbol {symbol:?}")));
        }
        let id = self.symbols.len();
        self.index.insert(symbol.clone(), id);
        self.symbols.push(symbol);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id).map(|s| s.as_str())
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Parse a whitespace-separated token line into ids.
    pub fn encode_line(&self, line: &str) -> Result<TokenSequence> {
        line.split_whitespace()
            .map(|tok| {
                self.id(tok)
                    .ok_or_else(|| Error::input(format!("unknown token {tok:?}")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            out.push(
                self.symbol(t)
                    .ok_or_else(|| Error::input(format!("token id {t} out of range")))?,
            );
        }
        Ok(out.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let v = Vocab::synthetic(5);
        assert_eq!(v.len(), 5);
        assert_eq!(v.symbol(0), Some("w00"));
        assert_eq!(v.id("w04"), Some(4));
        let seq = v.encode_line("w01 w00 w04").unwrap();
        assert_eq!(seq, vec![1, 0, 4]);
        assert_eq!(v.decode(&seq).unwrap(), "w01 w00 w04");
    }

    #[test]
    fn unknown_token_is_input_error() {
        let v = Vocab::synthetic(2);
        assert!(matches!(v.encode_line("w09"), Err(Error::Input(_))));
    }

    #[test]
    fn duplicate_symbol_rejected() {
        assert!(Vocab::new(["a".to_string(), "a".to_string()]).is_err());
    }
}
