//! Forecast-then-authenticate behavioral biometrics for VR controller
//! trajectories.
//!
//! A transformer forecaster extends each observed window of a throw with
//! its predicted continuation; a per-user classifier (FCN or transformer
//! encoder) decides genuine vs impostor on the extended sequence.

pub mod authenticator;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod forecaster;
pub mod seed;

pub use error::{CoreError, Result};
pub use motionauth_nn as nn;
