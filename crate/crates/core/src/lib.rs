//! Heatwave mortality early warning.
//!
//! Two forecasts run side by side: an attention model predicts all-cause
//! deaths for the next few days and a quasi-Poisson regression predicts the
//! baseline. Their relative difference over a synoptically detected
//! heatwave decides whether an alarm is raised.

pub mod decision;
pub mod error;
pub mod evaluation;
pub mod forecaster;
pub mod glm;
pub mod reference;
pub mod synoptic;
pub mod synthgen;
pub mod timeseries;

pub use error::{Error, Result};
