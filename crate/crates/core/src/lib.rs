#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod assignment;
pub mod chain;
pub mod error;
pub mod eval;
pub mod fd;
pub mod graph;
pub mod math;
pub mod mlp;
pub mod model;
pub mod objective;
pub mod operator_lab;
pub mod optim;
pub mod params;
pub mod risk;
pub mod rng;
pub mod synthgen;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
