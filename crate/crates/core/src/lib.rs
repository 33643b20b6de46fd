//! Bootstrapped self-questioning and answering for a toy video-QA world,
//! with an uncertainty filter built on decoupled Dirichlet evidence.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the CLI
//! and anything else that touches the operating system live in the `bovila`
//! companion crate.

#![no_std]

extern crate alloc;

pub mod data;
pub mod edl;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod gumbel;
pub mod model;
pub mod optim;
pub mod param;
pub mod prompt;
pub mod rng;
pub mod special;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
