#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod config;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod pyramid;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
