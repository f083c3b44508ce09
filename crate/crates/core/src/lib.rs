//! Estimation of group-level disparities in police-vehicle deployment from
//! geolocated dashcam detections.
//!
//! The pipeline: classifier scores on street images are thresholded into
//! detections, detections are assigned to census block groups by
//! point-in-polygon lookup ([`geoindex`]), per-CBG detection rates are
//! corrected for classifier error using a validation-set confusion model
//! ([`eval`], [`estimator`]), and group-level rates are formed by
//! post-stratification over census populations, reported relative to the
//! population-weighted city average ([`estimator`]). Uncertainty comes from
//! a parametric image-level bootstrap ([`bootstrap`]); subgroup calibration
//! of the error model is auditable ([`eval::calibration_audit`]); synthetic
//! cities with analytically known disparities support end-to-end testing
//! ([`synth`]).
//!
//! [`pipeline`] wires these into three file-to-file commands (validate,
//! disparities, coverage) that the CLI exposes.

pub mod bootstrap;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod geoindex;
pub mod geom;
pub mod ingest;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
