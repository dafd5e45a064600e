//! Glow-style normalizing flows, latent-interpolation oversampling of a rare
//! class, and a leakage-free cross-validation harness for measuring its effect
//! on an imbalanced image classifier.
//!
//! Everything runs on the small dense-tensor and reverse-mode
//! differentiation core in [`tensor`], [`kernels`] and [`autodiff`]; there is
//! no external ML runtime.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod kernels;
pub mod objective;
pub mod optim;
pub mod param;
pub mod rng;
pub mod synthesis;
pub mod tensor;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel, LatentCode};
pub use objective::{Dequantizer, LossReport, TrainConfig};
pub use param::{ParamStore, Parameter};
pub use rng::SeededRng;
pub use tensor::Tensor;
