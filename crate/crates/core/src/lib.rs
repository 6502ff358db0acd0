//! Extrinsic calibration of two RGB-D cameras from matched line features.
//!
//! The crate estimates the rigid transform `X_target = R * X_source + t`
//! between two depth cameras whose fields of view overlap little or not at
//! all. Matched lines are classified into fully 3D correspondences (depth
//! fits well in both cameras) and perspective-n-line correspondences (depth
//! only on the source side). Both kinds are merged into one quadratic
//! system over Cayley-Gibbs-Rodrigues rotation parameters, solved
//! algebraically and refined with Levenberg-Marquardt.
//!
//! Scene selection keeps only pairs that move a linear rotation estimate
//! closer to SO(3), and a convergence vote over translation candidates
//! (lines or planes) rejects mismatched pairs before the final solve.
//!
//! Module map:
//!
//! - [`geometry`]: camera model, Plücker lines, CGR rotations, SO(3) projection.
//! - [`constraints`]: correspondence classification, system assembly, residuals.
//! - [`solver`]: algebraic solve of the merged system and LM refinement.
//! - [`selection`]: rotation gate, translation candidates, convergence voting.
//! - [`pipeline`]: streaming calibration loop with RANSAC line fitting.
//! - [`simulator`]: synthetic rig generator and parameter sweeps.
//! - [`io`]: JSON observation/calibration files and the CSV sweep table.
//! - [`eval`]: pose-variation errors and plane-merge metrics.

pub mod constraints;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod selection;
pub mod simulator;
pub mod solver;

pub use constraints::{
    classify, CaseKind, Classification, Correspondence, ConstraintError, QuadraticSystem,
};
pub use geometry::{CameraIntrinsics, CgrParams, Extrinsics, GeometryError, Line2D, PluckerLine};
pub use pipeline::{
    CalibrationReport, LineObservation, PipelineConfig, PipelineError, Termination,
};
pub use selection::{Candidate, CandidateLine, CandidatePlane, VotingResult};
pub use simulator::{GroundTruthRecord, RigSpec};
pub use solver::{PoseSolution, SolverConfig, SolverError};
