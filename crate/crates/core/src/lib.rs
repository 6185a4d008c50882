//! Frequency-adaptive SAR despeckling.
//!
//! Speckle statistics and Haar analysis, the network modules for the
//! low- and high-frequency sub-bands, quality metrics and the training
//! pipeline.

pub mod attention;
mod error;
pub mod hfde;
mod image;
pub mod lfsp;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod speckle;
pub mod ssm;
pub mod wavelet;

pub use error::{CoreError, Result};
pub use image::Image;
pub use metrics::{MetricReport, Region};
pub use model::{loss_l1, param_count, Model, ModelConfig, SarFah};
pub use speckle::{GammaParams, GgdParams, Looks};
pub use wavelet::{dwt2_haar, idwt2_haar, SubBands};
