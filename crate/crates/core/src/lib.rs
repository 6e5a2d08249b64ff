// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod covariance;
pub mod diagnostics;
pub mod eigen;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod report;
pub mod synth;
