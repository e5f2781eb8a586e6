//! Heteroskedastic geospatial tracking.
//!
//! Per-view detectors report full-covariance Gaussians over an object's
//! position in a rectangular arena. A constant-velocity Kalman filter fuses
//! any number of them per frame. Detection covariances can be recalibrated
//! by grid search or fine-tuned jointly with the filter's acceleration noise
//! through exact sequence-NLL gradients. Tracks are scored with NLL, object
//! probability mass and thresholded detection/localization metrics.
//!
//! A synthetic multi-camera simulator supplies data for every stage.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod calibration;
pub mod error;
pub mod geo;
pub mod head;
pub mod io;
pub mod kalman;
pub mod metrics;
pub mod simulator;
pub mod tuning;

pub use calibration::{CalibrationFit, CalibrationGrid, CalibrationParams, CalibrationSet};
pub use error::{Error, Result};
pub use geo::{Arena, Gaussian2D, ObjectPose};
pub use kalman::{Detection, DetectionFrame, FilterParams, KalmanState, TrackResult, ViewId};
pub use metrics::{AlphaSweep, EvalRecord, MetricReport};
pub use simulator::{build_dataset, Dataset, ScenarioConfig};
pub use tuning::{TuneConfig, TunableParams};
