//! A frozen decoder-only language model extended to images by trainable
//! insertion layers placed inside its layer stack.
//!
//! - `tensor`, `autograd`, `gradcheck`, `optim`: dense tensors, a tape
//!   autograd over f32/f64, finite-difference checks, AdamW with warmup and
//!   cosine decay.
//! - `backbone`, `kv_cache`: the text model and its incremental decoder.
//! - `adaptor`, `model`: insertion layers, gates, duplicated embedding and
//!   head, projector, toy image encoder, and the combined model.
//! - `data`, `vocab`: synthetic text, caption, instruction and grounding
//!   generators.
//! - `trainer`, `eval`: stages, the multimodal pipeline, the unfrozen
//!   contrast and the ablation matrix.
//! - `runtime`, `accounting`: request routing, generation, latency and exact
//!   cost accounting.
//! - `checkpoint`, `config`, `verify`: persistence, experiment config and
//!   invariant checks.

pub mod accounting;
pub mod adaptor;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kv_cache;
pub mod model;
pub mod optim;
pub mod runtime;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod vocab;
