//! A small, dependency-free decoder-only transformer used as the in-repo
//! testbed for random-weight dynamics and end-to-end steering.

mod config;
mod transformer;

pub use config::{encode_bytes, ModelConfig, BOS, DEFAULT_VOCAB};
pub use transformer::{forward_hidden, generate_greedy, init_model, model_from_trajectory, Model};
