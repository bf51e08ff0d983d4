//! The neural "programmer": GRU encoder/decoder with dot-product attention
//! and a key-variable memory, built on a small reverse-mode tape so every
//! parameter gets an exact gradient.

pub mod model;
pub mod params;
pub mod tape;

pub use model::{
    property_raw_embedding, register_result_variable, Checkpoint, EncodedQuestion, LogProb,
    Model, ModelConfig, NnError, NnSession, StepOutput, WordVocab,
};
pub use params::{Adam, Grads, ParamStore, Tensor};
pub use tape::{NodeId, Tape};
