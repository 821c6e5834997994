//! Seq2seq encoder-decoder transformer with tape-based reverse-mode
//! differentiation, token pipeline (embedding, sinusoidal positional
//! encoding, padding) and a staged experiment harness over binary
//! sequence tasks.

pub mod error;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Value};
pub use tensor::{Parameter, Tensor};

pub mod masking;
pub mod nn;
pub mod seqdata;
pub mod tokens;
pub mod transformer;
pub mod model;
pub mod optim;
pub mod checkpoint;
pub mod experiments;
