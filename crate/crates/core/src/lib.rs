//! Learning constrained Lagrangian dynamics of multi-body systems from
//! keypoint trajectories, with energy-shaping control on the learned model.
//!
//! States are Cartesian keypoint coordinates `x ∈ ℝᵏ` (two per keypoint)
//! restricted by holonomic constraints `Φ(x) = 0`. The learned pieces are a
//! diagonal mass matrix, a potential network and an input-matrix network.

pub mod adjoint;
pub mod constraints;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod integrate;
pub mod json;
pub mod keypoints;
pub mod learn;
mod linalg;
pub mod nnmodels;
pub mod rigid;
pub mod rng;
pub mod systems;

pub use constraints::{ConstraintKind, ConstraintRow, ConstraintSet};
pub use dynamics::{InputMatrix, LagrangianSystem, LearnedSystem, MassMatrix, Multipliers, Potential};
pub use control::{ClosedLoop, ControlGains};
pub use error::{Error, Result};
pub use integrate::{rk4_step, rollout, RolloutConfig, Trajectory};
pub use keypoints::{HeatmapStack, Image, WorldFrame};
pub use nnmodels::{DynamicsParams, MlpParams};
pub use systems::{Benchmark, SystemKind};
