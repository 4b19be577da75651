//! Crowd density forecasting.
//!
//! The crate covers the whole pipeline: a social-force pedestrian simulator
//! ([`simulator`]), projection of trajectories into image space and
//! geometry-adaptive density synthesis ([`synth`]), a variational optical
//! flow solver with mass-preserving warping ([`flow`]), a small reverse-mode
//! autodiff engine ([`autodiff`]) and the two-stream recurrent forecaster
//! built on it ([`forecaster`]), plus patch-wise evaluation ([`metrics`]).

pub mod autodiff;
pub mod error;
pub mod flow;
pub mod forecaster;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod simulator;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{AnnotationSet, DensityMap, FlowField, Frame, Grid2D, GridFormat};
