//! Simulation and analysis toolkit for wide-field sub-shot-noise imaging with
//! spatially multimode twin beams.
//!
//! The crate is organised along the data flow of an experiment:
//!
//! - [`physics`]: closed-form sensitivity bounds, twin-beam uncertainty laws,
//!   per-mode photon statistics and the binning collection-efficiency model.
//! - [`simkernel`]: Monte Carlo generation of correlated probe/reference count
//!   frames from a spatial pair-birth process.
//! - [`estimators`]: calibration from no-sample frames and the four absorption
//!   estimators (ratio, subtraction, optimized subtraction, direct).
//! - [`imaging`]: absorption maps, resolution filtering and phantom masks.
//! - [`sweeps`]: resolution sweeps and quantum-advantage crossover analysis.
//! - [`io`]: run configuration and the on-disk formats (stack files, masks,
//!   maps, calibration and sweep tables).

pub mod error;
pub mod estimators;
pub mod grid;
pub mod imaging;
pub mod io;
pub mod physics;
pub mod simkernel;
pub mod sweeps;

pub use error::{Error, Result};
pub use estimators::{CalibrationRecord, Roi, Uncertainty};
pub use grid::Grid;
pub use imaging::{EstimateMap, ResolutionSpec};
pub use physics::{EstimatorKind, LossParams, NoiseModel};
pub use simkernel::{FramePair, FrameStack, MaskImage, Scene};
pub use sweeps::{Advantage, SweepResult, SweepRow};
