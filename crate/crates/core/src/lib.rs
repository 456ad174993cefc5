//! Cross-modal dense contrastive feature learning between images and point
//! clouds: a small reverse-mode autodiff engine, Tuple-Circle and Circle
//! losses over shared/private feature tuples, a PointNet++-style point
//! encoder with set-abstraction feature propagation, a U-Net image encoder,
//! synthetic paired scenes with exact pixel/point correspondences, matching
//! metrics and cosine k-means visualisation.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod point;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tensor};
