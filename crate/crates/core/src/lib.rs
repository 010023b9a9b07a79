//! Distributed Kalman fusion estimation over bandwidth-constrained, delayed links.
//!
//! Each sink node runs a local Kalman filter, transmits a randomly selected
//! subset of its estimate components through a constant-delay channel, and the
//! fusion center rebuilds a compensating estimate per node before fusing them
//! with covariance-optimal matrix weights.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, which is what the CLI and the
//! bundled scenarios use.

pub mod compensation_fusion;
pub mod covariance_engine;
pub mod error;
pub mod linalg;
pub mod local_estimation;
pub mod model_core;
pub mod reduction_channel;
pub mod sim_harness;
pub mod stability_analysis;

pub use error::{Error, Result};
pub use linalg::Real;

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

pub type SystemModel = model_core::SystemModel<f64>;
pub type SensorModel = model_core::SensorModel<f64>;
pub type LocalFilterState = local_estimation::LocalFilterState<f64>;
pub type SelectionScheme = reduction_channel::SelectionScheme<f64>;
pub type DelayedLink = reduction_channel::DelayedLink;
pub type CompressedPacket = reduction_channel::CompressedPacket<f64>;
pub type CovarianceLedger = covariance_engine::CovarianceLedger<f64>;
pub type CseState = compensation_fusion::CseState<f64>;
pub type FusionState = compensation_fusion::FusionState<f64>;
pub type AugmentedSystem = stability_analysis::AugmentedSystem<f64>;
pub type StabilityReport = stability_analysis::StabilityReport<f64>;
pub type Scenario = sim_harness::Scenario<f64>;
