//! Energy-shaping control of fully actuated systems.
//!
//! The input replaces the potential `V` by a quadratic bowl around `x*`
//! and injects damping along the actuated directions:
//!
//! ```text
//! u = (gᵀg)⁻¹ gᵀ [∇V − kp (x − x*)] − kd gᵀ ẋ
//! ```
//!
//! When the columns of `g` span the tangent space, `T + ½ kp ‖x − x*‖²`
//! decreases at rate `kd ‖gᵀẋ‖²` along closed-loop motion.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{kinetic_energy, InputMatrix, LagrangianSystem, Potential};
use crate::error::{check_dim, Error, Result};
use crate::integrate::{rk4_step, Trajectory};

pub const DEFAULT_KP: f64 = 5.0;
pub const DEFAULT_KD: f64 = 2.0;
/// `gᵀg` with a larger condition number counts as not fully actuated.
pub const ACTUATION_COND_LIMIT: f64 = 1e8;
/// Settling band on `‖x − x*‖` and `‖ẋ‖`.
pub const POSITION_BAND: f64 = 0.05;
pub const VELOCITY_BAND: f64 = 0.1;
/// Steps the state must stay in the band at the end of a run.
pub const SETTLE_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGains {
    pub kp: f64,
    pub kd: f64,
    pub x_star: Vec<f64>,
}

impl ControlGains {
    /// Validates gains and that the target satisfies the constraints.
    pub fn new<P, G>(sys: &LagrangianSystem<P, G>, kp: f64, kd: f64, x_star: Vec<f64>) -> Result<Self> {
        if !(kp > 0.0) || !(kd >= 0.0) {
            return Err(Error::InvalidInput(format!("gains need kp > 0 and kd ≥ 0, got {kp}, {kd}")));
        }
        let phi = sys.constraints.eval_phi(&x_star)?;
        if phi.amax() > 1e-4 {
            return Err(Error::InvalidInput(format!(
                "target {x_star:?} violates the constraints by {:e}",
                phi.amax()
            )));
        }
        Ok(Self { kp, kd, x_star })
    }
}

/// `V_d = kp ‖x − x*‖²`.
pub fn desired_potential(gains: &ControlGains, x: &[f64]) -> Result<f64> {
    check_dim("desired potential state", gains.x_star.len(), x.len())?;
    Ok(gains.kp * x.iter().zip(&gains.x_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// `∇V_d = 2 kp (x − x*)`.
pub fn desired_potential_gradient(gains: &ControlGains, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("desired potential state", gains.x_star.len(), x.len())?;
    Ok(x.iter().zip(&gains.x_star).map(|(a, b)| 2.0 * gains.kp * (a - b)).collect())
}

/// Storage function of the closed loop, `T + ½ kp ‖x − x*‖²`.
pub fn shaped_energy<P, G>(sys: &LagrangianSystem<P, G>, gains: &ControlGains, x: &[f64], v: &[f64]) -> Result<f64> {
    Ok(kinetic_energy(&sys.mass, v)? + 0.5 * desired_potential(gains, x)?)
}

pub fn energy_shaping_u<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    gains: &ControlGains,
    x: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    check_dim("controller velocity", sys.k(), v.len())?;
    check_dim("target", sys.k(), gains.x_star.len())?;
    let g = sys.input_matrix(x)?;
    let (l, dof) = (g.ncols(), sys.constraints.dof());
    let deficient = |reason: String| Error::ActuationDeficiency { x: x.to_vec(), reason };
    if l < dof {
        return Err(deficient(format!("{l} actuators for {dof} degrees of freedom")));
    }
    let gtg = g.tr_mul(&g);
    let eig = gtg.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo > ACTUATION_COND_LIMIT {
        return Err(deficient(format!("gᵀg is singular or ill-conditioned (eigenvalues {lo:e}, {hi:e})")));
    }
    let grad_v = sys.potential.gradient(x);
    let shaped = DVector::from_iterator(sys.k(), (0..sys.k()).map(|i| grad_v[i] - gains.kp * (x[i] - gains.x_star[i])));
    let chol = gtg.cholesky().ok_or_else(|| deficient("gᵀg is not positive definite".into()))?;
    let mut u = chol.solve(&g.tr_mul(&shaped));
    u -= gains.kd * g.tr_mul(&DVector::from_column_slice(v));
    Ok(u.as_slice().to_vec())
}

/// Outcome of a closed-loop simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    /// States and velocities; `u` of the trajectory is empty since inputs
    /// vary per step.
    pub trajectory: Trajectory,
    /// Input applied over each step, and a zero row for the final state.
    pub inputs: Vec<Vec<f64>>,
    pub shaped_energy: Vec<f64>,
    pub success: bool,
    /// First step from which the state stays in the settling band.
    pub settled_at: Option<usize>,
    /// Step and reason of an actuation failure that ended the run.
    pub failure: Option<(usize, String)>,
}

impl ClosedLoop {
    /// Per-row extra CSV columns `u0.., E_shaped`.
    pub fn csv_columns(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let l = self.inputs.first().map_or(0, Vec::len);
        let mut names: Vec<String> = (0..l).map(|i| format!("u{i}")).collect();
        names.push("E_shaped".into());
        let rows = self
            .inputs
            .iter()
            .zip(&self.shaped_energy)
            .map(|(u, e)| {
                let mut r = u.clone();
                r.push(*e);
                r
            })
            .collect();
        (names, rows)
    }
}

fn in_band(gains: &ControlGains, x: &[f64], v: &[f64]) -> bool {
    let dx = x.iter().zip(&gains.x_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let sv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dx <= POSITION_BAND && sv <= VELOCITY_BAND
}

/// Simulates `steps` steps. The feedback is re-evaluated at every RK4
/// stage; `inputs` records its value at the start of each step. Success means the final `SETTLE_STEPS + 1` states lie in the band.
pub fn closed_loop<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    gains: &ControlGains,
    x0: &[f64],
    v0: &[f64],
    steps: usize,
    h: f64,
) -> Result<ClosedLoop> {
    let minv = sys.mass.inverse_diagonal()?;
    let l = sys.l();
    let mut states = vec![x0.to_vec()];
    let mut velocities = vec![v0.to_vec()];
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut energy = vec![shaped_energy(sys, gains, x0, v0)?];
    let mut failure = None;
    for step in 0..steps {
        let (x, v) = (&states[step], &velocities[step]);
        let u = match energy_shaping_u(sys, gains, x, v) {
            Ok(u) => u,
            Err(Error::ActuationDeficiency { reason, .. }) => {
                failure = Some((step, reason));
                break;
            }
            Err(e) => return Err(e),
        };
        let (xn, vn) = rk4_step(
            |x, v| {
                let us = energy_shaping_u(sys, gains, x, v)?;
                Ok(sys.accel_with(&minv, x, v, &us))
            },
            x,
            v,
            h,
        )?;
        energy.push(shaped_energy(sys, gains, &xn, &vn)?);
        inputs.push(u);
        states.push(xn);
        velocities.push(vn);
    }
    inputs.push(vec![0.0; l]);

    let mut settled_at = None;
    for i in (0..states.len()).rev() {
        if in_band(gains, &states[i], &velocities[i]) {
            settled_at = Some(i);
        } else {
            break;
        }
    }
    let success = failure.is_none() && settled_at.is_some_and(|s| states.len() - s > SETTLE_STEPS);
    Ok(ClosedLoop {
        trajectory: Trajectory {
            states,
            velocities: Some(velocities),
            u: Vec::new(),
            h,
        },
        inputs,
        shaped_energy: energy,
        success,
        settled_at,
        failure,
    })
}
