//! Noise-gated dynamic-capacity layers trained jointly for accuracy and
//! model size, plus the tooling around them: a small reverse-mode tensor
//! engine, auditory filter banks for a synthetic regression task, a
//! two-phase trainer, a FLOP profiler and experiment runners.

pub mod error;
pub mod experiments;
pub mod filterbank;
pub mod gate;
pub mod gradcheck;
pub mod layers;
pub mod profiler;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
