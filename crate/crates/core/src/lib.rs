//! Cone-beam CT rigid-motion simulation and autofocus compensation toolkit.
//!
//! The pipeline stages are:
//!
//! 1. **geometry** – projective cameras, short-scan trajectories, rigid motion.
//! 2. **motion** – Akima-spline motion curves, annihilating trajectories,
//!    random motion generation.
//! 3. **phantom** – analytic ellipsoid head phantom, exact line integrals,
//!    voxelization.
//! 4. **fdk** – short-scan filtered back-projection onto arbitrary slice sets.
//! 5. **rpe** – virtual-marker reprojection error, the object-independent
//!    ground truth.
//! 6. **iqm** – image-quality metrics (histogram entropy, total variation,
//!    reprojection oracle, learned score) behind a common registry.
//! 7. **appearance** – dataset generation and the multi-task slice regressor.
//! 8. **autofocus** – staged node-sequential simplex trajectory estimation.
//! 9. **bench** – the motion-estimation benchmark over scenarios and axes.

pub mod appearance;
pub mod autofocus;
pub mod bench;
pub mod config;
pub mod error;
pub mod fdk;
pub mod geometry;
pub mod io;
pub mod iqm;
pub mod motion;
pub mod phantom;
pub mod rpe;

pub use error::{Error, Result};
