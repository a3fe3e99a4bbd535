//! Alternating-roles dialog modeling: two role-specific decoder-only language
//! models (user and system) that take turns reading and writing one shared
//! key/value memory.

pub mod ardm;
pub mod bundle;
pub mod chat;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use ardm::{ArdmParams, Dialog, DialogNll, Turn};
pub use decode::{Preset, SamplerConfig};
pub use error::{Error, Result};
pub use model::{KvMemory, ModelConfig, Params};
pub use tensor::{Tape, Tensor, Var};
pub use tokenizer::{format_turn, Role, TokenSeq, Vocab};
