//! Desk-scale Gemma 2 style decoder.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! decoder itself with grouped-query attention, alternating sliding-window
//! and global layers, logit soft-capping and pre+post RMSNorm ([`model`]), a
//! byte tokenizer with the chat control-token schema ([`tokenizer`],
//! [`chat`]), training with cross-entropy, knowledge distillation and model
//! merging ([`train`]), ablation runners ([`eval`]) and a training-data
//! memorization audit ([`audit`]).

pub mod audit;
pub mod chat;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod util;
