//! Neural calibration of option premium surfaces with exact input
//! derivatives and a no-arbitrage penalty.

pub mod activations;
pub mod config;
pub mod constraints;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod network;
pub mod plot;
pub mod pricing;
pub mod training;

pub use activations::ActivationKind;
pub use config::ExperimentConfig;
pub use constraints::{Intensifier, LossReport, PenaltyConfig, PremiumSurface};
pub use datasets::{DatasetManifest, GridSpec, QuoteGrid, QuotePoint};
pub use error::{Error, Result};
pub use experiments::{Condition, MatrixRow, Metrics, MetricsRow, RiskProfile, SabrSurface, Sample};
pub use network::{DerivativeMode, MlpParams};
pub use pricing::SabrParams;
pub use training::{ModelMode, Objective, TrainConfig, TrainReport};
