//! Count-based n-gram language model with modified Kneser-Ney smoothing,
//! top-K count pruning, perplexity evaluation and ARPA serialization.
//!
//! The low-order pruned bi-gram built here serves as the LODR internal-LM
//! estimate; a full model doubles as an n-gram external LM when configured.

mod arpa;
mod counts;
mod kn;

pub use arpa::{read_arpa, write_arpa};
pub use counts::{count_ngrams, prune_top_k, CountTable};
pub use kn::{train_kn, NGramModel};
