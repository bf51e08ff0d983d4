//! Weakly-supervised semantic parsing over a symbolic knowledge base.
//!
//! The pipeline couples a symbolic interpreter (which executes short
//! Lisp-style programs against an immutable triple store and offers
//! "code assistance": the exact set of valid next tokens) with a neural
//! "programmer" (a GRU encoder/decoder with dot-product attention and a
//! key-variable memory) trained from question-answer pairs only, via
//! iterative maximum likelihood plus beam-based REINFORCE.

pub mod datagen;
pub mod interpreter;
pub mod kbstore;
pub mod learning;
pub mod metrics;
pub mod nn;
pub mod search;
