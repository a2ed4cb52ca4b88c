//! Desk-scale laboratory for language-model integration in RNN-Transducer
//! speech recognition.
//!
//! The crate implements a toy transducer (encoder, prediction network, joint
//! network) with an exact lattice loss, monotonic beam-search decoding into
//! n-best lists, count-based and recurrent language models, the four fusion
//! rules compared in rescoring (none, shallow fusion, density ratio, ILME,
//! LODR), a coordinate-descent weight tuner, and an experiment harness over
//! synthetic Markov-chain domains.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod lstm;
pub mod metrics;
pub mod nbest;
pub mod ngram;
pub mod nnlm;
pub mod numerics;
pub mod optim;
pub mod transducer;
pub mod tuner;
pub mod vocab;

pub use decoder::{FusionConfig, FusionMethod, Hypothesis};
pub use error::Error;
pub use ngram::NGramModel;
pub use nnlm::RecurrentLm;
pub use transducer::TransducerModel;
pub use vocab::{TokenId, TokenSequence, Vocab};

/// T frames of d-dimensional acoustic features.
pub type FeatureSequence = Vec<numerics::Vector>;

pub type Result<T> = std::result::Result<T, Error>;
