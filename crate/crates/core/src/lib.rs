//! Laboratory for locating typo-handling components inside a small
//! decoder-only transformer.
//!
//! The pipeline: train a byte-level BPE vocabulary and a toy transformer on a
//! synthetic definition-lookup corpus, build clean/typo/split prompt triplets,
//! score every FFN neuron and attention head for how differently it behaves
//! across the three variants, then knock the top-scoring units out and measure
//! what the model loses.

pub mod corpus;
pub mod detector;
pub mod harness;
pub mod model;
pub mod plot;
pub mod tokenizer;

mod seeds;

pub use seeds::derive_seed;
