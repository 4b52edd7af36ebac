#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod blocks;
pub mod cait;
pub mod data;
pub mod error;
pub mod math;
pub mod params;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::{Tape, Tensor, TensorId};
