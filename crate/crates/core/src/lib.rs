//! Trajectory tokens for video: a patch encoder, a query segmenter that
//! partitions each chunk into trajectories, and a masked refiner that turns
//! every trajectory into a few tokens. Built on a small `f64` tape.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod segmenter;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod tensor_file;
pub mod train;
pub mod traj;
pub mod video;

pub use config::Config;
pub use error::{Error, Result};
pub use model::Model;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

// The book's snippets run as doc-tests so they cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/video.md")]
    mod video {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    mod segmentation {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
}
