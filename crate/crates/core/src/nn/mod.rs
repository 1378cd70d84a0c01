//! Parameterized building blocks.

pub mod aligner;
pub mod encoder;
pub mod head;
pub mod layers;
pub mod resnext;

pub use aligner::{Aligner, AlignerBlock};
pub use encoder::{build_encoder_family, Encoder};
pub use head::{
    detect, heading_from, heading_residual, BoxCoder, DetectionMap, ForegroundSet, Head, HeadOut,
    REG_CHANNELS,
};
pub use layers::{Conv, Init, Norm};
pub use resnext::{build_scale, resnext_scale_forward, ResNeXtBlock};
