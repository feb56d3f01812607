//! Cross-modality (RGB/infrared) person re-identification with
//! modality-adaptive mixup and modality-adaptive convolution decomposition.

pub mod agent;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod macd;
pub mod metrics;
pub mod modality;
pub mod nn;
pub mod trainer;

pub use error::{MidError, Result};
pub use mid_tensor::par;
pub use modality::Modality;
