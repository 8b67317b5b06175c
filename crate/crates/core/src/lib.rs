//! Differentially private training of a prompt-conditioned language model
//! and generation of labeled synthetic "twin" corpora.
//!
//! The pipeline: build a vocabulary and pretrain on a public corpus, fine-tune
//! on a private labeled corpus with DP-Adam under a Rényi-DP accountant,
//! prompt the model with rendered attribute instructions to synthesize a
//! labeled corpus, then audit it for utility, leakage and distributional
//! similarity.

pub mod accountant;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod dp_optim;
pub mod error;
pub mod eval;
pub mod model;
pub mod parallel;
pub mod prompt;
pub mod seed;
pub mod synthesis;
pub mod tokenizer;

pub use error::{Error, Result};
