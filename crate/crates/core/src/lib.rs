//! Transducer training with knowledge distillation from teacher output lattices.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod kd;
pub mod lattice;
pub mod lm;
pub mod nnet;
pub mod transducer;

pub use error::{Error, Result};
pub use lattice::{Alignment, OutputLattice, Step, TokenSeq, Vocab, BLANK};
pub use transducer::{ForwardBackward, LatticeGradient};
