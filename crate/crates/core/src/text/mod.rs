//! Whitespace tokenizer and a small transformer text encoder.

mod encoder;
mod vocab;

pub use encoder::{MlmStep, TextEncoderConfig, TextEncoderModel};
pub use vocab::{tokenize, TokenBatch, Vocab, CLS, MASK, NUM_SPECIAL, PAD, SEP, UNK};
