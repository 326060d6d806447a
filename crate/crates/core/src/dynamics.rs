//! Constrained Euler-Lagrange dynamics in Cartesian coordinates.
//!
//! With a constant diagonal mass matrix `M`, generalized force
//! `f = −∇V(x) + g(x)u` and constraints `Φ(x) = 0`, the acceleration is
//!
//! ```text
//! λ = [DΦ M⁻¹ DΦᵀ]⁻¹ (DΦ M⁻¹ f + ⟨D²Φ, ẋ⟩ẋ)
//! ẍ = M⁻¹ (f − DΦᵀ λ)
//! ```

use nalgebra::{DMatrix, DVector};

use crate::constraints::ConstraintSet;
use crate::error::{check_dim, Error, Result};
use crate::linalg::solve_spd;
use crate::nnmodels::{DynamicsParams, MlpInputMatrix, MlpParams};

/// Square-root masses below this magnitude are floored during dynamics
/// evaluation.
pub const MASS_FLOOR: f64 = 1e-6;

/// A scalar potential energy `V(x)`.
pub trait Potential: Send + Sync {
    fn energy(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// An input matrix `g(x)` of shape `k × l`.
pub trait InputMatrix: Send + Sync {
    fn actuators(&self) -> usize;
    fn matrix(&self, x: &[f64]) -> DMatrix<f64>;

    /// `g(x) u`.
    fn force(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let g = self.matrix(x);
        (g * DVector::from_column_slice(u)).as_slice().to_vec()
    }
}

impl<T: Potential + ?Sized> Potential for &T {
    fn energy(&self, x: &[f64]) -> f64 {
        (**self).energy(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (**self).gradient(x)
    }
}

impl<T: Potential + ?Sized> Potential for Box<T> {
    fn energy(&self, x: &[f64]) -> f64 {
        (**self).energy(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (**self).gradient(x)
    }
}

impl<T: InputMatrix + ?Sized> InputMatrix for &T {
    fn actuators(&self) -> usize {
        (**self).actuators()
    }
    fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        (**self).matrix(x)
    }
    fn force(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (**self).force(x, u)
    }
}

impl<T: InputMatrix + ?Sized> InputMatrix for Box<T> {
    fn actuators(&self) -> usize {
        (**self).actuators()
    }
    fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        (**self).matrix(x)
    }
    fn force(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (**self).force(x, u)
    }
}

/// Diagonal point-mass matrix parameterized by square-root masses.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    pub sqrt_masses: Vec<f64>,
}

impl MassMatrix {
    pub fn new(sqrt_masses: Vec<f64>) -> Self {
        Self { sqrt_masses }
    }

    /// From realized (positive) masses.
    pub fn from_masses(masses: &[f64]) -> Self {
        Self {
            sqrt_masses: masses.iter().map(|m| m.sqrt()).collect(),
        }
    }

    pub fn k(&self) -> usize {
        2 * self.sqrt_masses.len()
    }

    /// Realized masses `s²`, one per keypoint.
    pub fn masses(&self) -> Vec<f64> {
        self.sqrt_masses.iter().map(|s| s * s).collect()
    }

    /// Diagonal of `M⁻¹` with the zero-mass floor applied, length `k`.
    pub fn inverse_diagonal(&self) -> Result<Vec<f64>> {
        if self.sqrt_masses.iter().all(|s| s.abs() < MASS_FLOOR) {
            return Err(Error::InvalidModel("all point masses are zero".into()));
        }
        Ok(self
            .sqrt_masses
            .iter()
            .flat_map(|s| {
                let s = s.abs().max(MASS_FLOOR);
                let inv = 1.0 / (s * s);
                [inv, inv]
            })
            .collect())
    }

    /// The full `k × k` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let diag: Vec<f64> = self.masses().iter().flat_map(|&m| [m, m]).collect();
        DMatrix::from_diagonal(&DVector::from_vec(diag))
    }
}

/// `T = ½ vᵀ M v`.
pub fn kinetic_energy(m: &MassMatrix, v: &[f64]) -> Result<f64> {
    check_dim("kinetic_energy velocity", m.k(), v.len())?;
    Ok(0.5
        * m.sqrt_masses
            .iter()
            .zip(v.chunks_exact(2))
            .map(|(s, vk)| s * s * (vk[0] * vk[0] + vk[1] * vk[1]))
            .sum::<f64>())
}

/// Constraints, masses, potential and input model of one system.
#[derive(Debug, Clone)]
pub struct LagrangianSystem<P, G> {
    pub constraints: ConstraintSet,
    pub mass: MassMatrix,
    pub potential: P,
    pub input: G,
}

/// A system whose potential and input matrix are the learned networks.
pub type LearnedSystem<'a> = LagrangianSystem<&'a MlpParams, MlpInputMatrix<'a>>;

/// Result of the multiplier solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub lambda: DVector<f64>,
    /// The normal matrix `DΦ M⁻¹ DΦᵀ` was singular or badly conditioned and
    /// the pseudo-inverse was used.
    pub pinv_fallback: bool,
}

impl<P: Potential, G: InputMatrix> LagrangianSystem<P, G> {
    pub fn new(constraints: ConstraintSet, mass: MassMatrix, potential: P, input: G) -> Result<Self> {
        check_dim("mass matrix", constraints.k(), mass.k())?;
        Ok(Self {
            constraints,
            mass,
            potential,
            input,
        })
    }

    pub fn k(&self) -> usize {
        self.constraints.k()
    }

    pub fn l(&self) -> usize {
        self.input.actuators()
    }

    fn check_state(&self, x: &[f64], v: Option<&[f64]>, u: Option<&[f64]>) -> Result<()> {
        check_dim("state", self.k(), x.len())?;
        if let Some(v) = v {
            check_dim("velocity", self.k(), v.len())?;
        }
        if let Some(u) = u {
            check_dim("input", self.l(), u.len())?;
        }
        Ok(())
    }

    /// `f = −∇V(x) + g(x)u`.
    pub fn generalized_force(&self, x: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        self.check_state(x, None, Some(u))?;
        Ok(DVector::from_vec(self.force_unchecked(x, u)))
    }

    pub(crate) fn force_unchecked(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut f = self.potential.gradient(x);
        for fi in &mut f {
            *fi = -*fi;
        }
        if self.l() > 0 && u.iter().any(|&ui| ui != 0.0) {
            for (fi, gi) in f.iter_mut().zip(self.input.force(x, u)) {
                *fi += gi;
            }
        }
        f
    }

    /// Lagrange multipliers for the given state and generalized force.
    pub fn solve_multipliers(&self, x: &[f64], v: &[f64], f: &[f64]) -> Result<Multipliers> {
        self.check_state(x, Some(v), None)?;
        check_dim("force", self.k(), f.len())?;
        let minv = self.mass.inverse_diagonal()?;
        let jac = self.constraints.jacobian_unchecked(x);
        let (lambda, pinv_fallback) = multipliers(&jac, &minv, f, &self.constraints.hessian_contract_unchecked(v));
        Ok(Multipliers { lambda, pinv_fallback })
    }

    /// Constrained acceleration `ẍ`.
    pub fn constrained_accel(&self, x: &[f64], v: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        self.check_state(x, Some(v), Some(u))?;
        let minv = self.mass.inverse_diagonal()?;
        Ok(DVector::from_vec(self.accel_with(&minv, x, v, u)))
    }

    /// Acceleration with a precomputed `M⁻¹` diagonal and no shape checks.
    pub(crate) fn accel_with(&self, minv: &[f64], x: &[f64], v: &[f64], u: &[f64]) -> Vec<f64> {
        let f = self.force_unchecked(x, u);
        let jac = self.constraints.jacobian_unchecked(x);
        let curv = self.constraints.hessian_contract_unchecked(v);
        let (lambda, _) = multipliers(&jac, minv, &f, &curv);
        let jt_lambda = jac.tr_mul(&lambda);
        f.iter()
            .zip(minv)
            .zip(jt_lambda.iter())
            .map(|((fi, mi), cl)| mi * (fi - cl))
            .collect()
    }

    /// `T + V`.
    pub fn total_energy(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        self.check_state(x, Some(v), None)?;
        Ok(kinetic_energy(&self.mass, v)? + self.potential.energy(x))
    }

    pub fn potential_energy(&self, x: &[f64]) -> Result<f64> {
        self.check_state(x, None, None)?;
        Ok(self.potential.energy(x))
    }

    /// Input matrix at `x`, shape `k × l`.
    pub fn input_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(x, None, None)?;
        Ok(self.input.matrix(x))
    }
}

/// `λ = [J D Jᵀ]⁻¹ (J D f + c)` with `D = diag(minv)`.
pub(crate) fn multipliers(jac: &DMatrix<f64>, minv: &[f64], f: &[f64], curv: &DVector<f64>) -> (DVector<f64>, bool) {
    let n = jac.nrows();
    if n == 0 {
        return (DVector::zeros(0), false);
    }
    let mut jd = jac.clone();
    for (j, mut col) in jd.column_iter_mut().enumerate() {
        col *= minv[j];
    }
    let normal = &jd * jac.transpose();
    let rhs = &jd * DVector::from_column_slice(f) + curv;
    solve_spd(&normal, &rhs)
}

impl<'a> LearnedSystem<'a> {
    /// Binds learned parameters to a constraint set.
    pub fn learned(constraints: ConstraintSet, params: &'a DynamicsParams) -> Result<Self> {
        check_dim("learned potential input", constraints.k(), params.k())?;
        let input = MlpInputMatrix {
            net: params.input_model.as_ref(),
            k: params.k(),
            l: params.l(),
        };
        LagrangianSystem::new(constraints, MassMatrix::new(params.sqrt_masses.clone()), &params.potential, input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    use crate::systems::{Benchmark, GravityPotential, LinearPotential, NoInput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: f64 = 9.81;

    fn pendulum() -> LagrangianSystem<GravityPotential, NoInput> {
        LagrangianSystem::new(
            ConstraintSet::pendulum(1.0),
            MassMatrix::from_masses(&[1.0]),
            GravityPotential::new(vec![1.0], G).with_offset(G),
            NoInput,
        )
        .unwrap()
    }

    #[test]
    fn kinetic_energy_cases() {
        let m = MassMatrix::new(vec![2.0]);
        assert_eq!(kinetic_energy(&m, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(kinetic_energy(&m, &[3.0, 4.0]).unwrap(), 50.0);
        assert!(kinetic_energy(&m, &[1.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = MassMatrix::new(s.clone());
            let mut oracle = 0.0;
            for kp in 0..3 {
                oracle += 0.5 * s[kp] * s[kp] * (v[2 * kp].powi(2) + v[2 * kp + 1].powi(2));
            }
            let vv = DVector::from_column_slice(&v);
            let quad = 0.5 * vv.dot(&(m.matrix() * &vv));
            assert!((kinetic_energy(&m, &v).unwrap() - oracle).abs() <= 1e-12);
            assert!((quad - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn force_of_linear_potential_is_constant() {
        let sys = LagrangianSystem::new(
            ConstraintSet::pendulum(1.0),
            MassMatrix::from_masses(&[1.0]),
            LinearPotential::new(vec![0.5, -2.0]),
            NoInput,
        )
        .unwrap();
        for x in [[0.0, 1.0], [0.3, -0.2]] {
            let f = sys.generalized_force(&x, &[]).unwrap();
            assert_eq!(f.as_slice(), &[-0.5, 2.0]);
        }
    }

    #[test]
    fn force_is_control_affine() {
        let b = Benchmark::cartpole();
        let sys = b.analytic_system(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (x, _) = b.sample_state(&mut rng);
            let u: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let uw: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + b).collect();
            let f0 = sys.generalized_force(&x, &[0.0, 0.0]).unwrap();
            let fu = sys.generalized_force(&x, &u).unwrap() - &f0;
            let fw = sys.generalized_force(&x, &w).unwrap() - &f0;
            let fuw = sys.generalized_force(&x, &uw).unwrap() - &f0;
            assert!((fuw - fu - fw).amax() <= 1e-10);
        }
    }

    #[test]
    fn hanging_pendulum_force_balance() {
        let sys = pendulum();
        let x = [0.0, -1.0];
        let f = sys.generalized_force(&x, &[]).unwrap();
        let mult = sys.solve_multipliers(&x, &[0.0, 0.0], f.as_slice()).unwrap();
        assert!(!mult.pinv_fallback);
        // Constraint force −DΦᵀλ must cancel gravity.
        let cf = -(sys.constraints.jacobian_phi(&x).unwrap().transpose() * &mult.lambda);
        assert!((cf[0]).abs() < 1e-12 && (cf[1] - G).abs() < 1e-12);
        let a = sys.constrained_accel(&x, &[0.0, 0.0], &[]).unwrap();
        assert!(a.amax() < 1e-12);
    }

    #[test]
    fn multipliers_vanish_without_forces() {
        let sys = LagrangianSystem::new(
            ConstraintSet::acrobot(0.5, 0.5),
            MassMatrix::from_masses(&[1.0, 2.0]),
            LinearPotential::new(vec![0.0; 4]),
            NoInput,
        )
        .unwrap();
        let x = [0.3, -0.4, 0.6, -0.8];
        let m = sys.solve_multipliers(&x, &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(m.lambda.amax() == 0.0);
    }

    #[test]
    fn circular_motion_centripetal_acceleration() {
        // Zero gravity, tangential speed s on a circle of radius r.
        for (s, r) in [(1.0, 1.0), (2.5, 1.0), (3.0, 2.0)] {
            let sys = LagrangianSystem::new(
                ConstraintSet::pendulum(r),
                MassMatrix::from_masses(&[1.3]),
                LinearPotential::new(vec![0.0, 0.0]),
                NoInput,
            )
            .unwrap();
            let x = [r, 0.0];
            let v = [0.0, s];
            let a = sys.constrained_accel(&x, &v, &[]).unwrap();
            assert!((a[0] + s * s / r).abs() < 1e-12, "{a}");
            assert!(a[1].abs() < 1e-12);
        }
    }

    #[test]
    fn horizontal_pendulum_falls_tangentially() {
        let a = pendulum().constrained_accel(&[1.0, 0.0], &[0.0, 0.0], &[]).unwrap();
        assert!(a[0].abs() < 1e-12 && (a[1] + G).abs() < 1e-12);
    }

    #[test]
    fn cartpole_matches_cart_angle_equations() {
        // Cart mass 1 on the rail, pole tip mass 0.5 at length 1.
        let (m1, m2) = (1.0, 0.5);
        let sys = Benchmark::cartpole().analytic_system(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (p, th): (f64, f64) = (rng.random_range(-0.5..0.5), rng.random_range(-PI..PI));
            let (pd, thd): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0));
            let (f, tau): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (s, c) = th.sin_cos();
            let a = [[m1 + m2, m2 * c], [m2 * c, m2]];
            let rhs = [f + m2 * s * thd * thd, tau - m2 * G * s];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let pdd = (rhs[0] * a[1][1] - a[0][1] * rhs[1]) / det;
            let thdd = (a[0][0] * rhs[1] - a[1][0] * rhs[0]) / det;
            let expect = [pdd, 0.0, pdd + c * thdd - s * thd * thd, s * thdd + c * thd * thd];

            let x = [p, 0.0, p + s, -c];
            let v = [pd, 0.0, pd + c * thd, s * thd];
            let got = sys.constrained_accel(&x, &v, &[f, tau]).unwrap();
            for (g, e) in got.iter().zip(expect) {
                assert!((g - e).abs() <= 1e-6, "{got} vs {expect:?}");
            }
        }
    }

    #[test]
    fn acceleration_respects_constraints_and_constraint_forces_do_no_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for b in [Benchmark::pendulum(), Benchmark::cartpole(), Benchmark::acrobot()] {
            let l = b.actuators.len();
            let sys = b.analytic_system(l);
            for _ in 0..50 {
                let (x, v) = b.sample_state(&mut rng);
                let v: Vec<f64> = v.iter().map(|vi| vi * 20.0).collect();
                let v = sys.constraints.project_tangent(&x, &v).unwrap();
                let u: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = sys.constrained_accel(&x, v.as_slice(), &u).unwrap();
                let jac = sys.constraints.jacobian_phi(&x).unwrap();
                let resid = &jac * &a + sys.constraints.hessian_contract(&x, v.as_slice()).unwrap();
                assert!(resid.amax() <= 1e-9, "{resid}");
                let f = sys.generalized_force(&x, &u).unwrap();
                let mult = sys.solve_multipliers(&x, v.as_slice(), f.as_slice()).unwrap();
                let power = (jac.transpose() * mult.lambda).dot(&v);
                assert!(power.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn all_zero_masses_are_rejected() {
        let sys = LagrangianSystem::new(
            ConstraintSet::pendulum(1.0),
            MassMatrix::new(vec![0.0]),
            GravityPotential::new(vec![1.0], G),
            NoInput,
        )
        .unwrap();
        assert!(matches!(sys.constrained_accel(&[1.0, 0.0], &[0.0, 0.0], &[]), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn tiny_mass_is_floored() {
        let sys = LagrangianSystem::new(
            ConstraintSet::acrobot(0.5, 0.5),
            MassMatrix::new(vec![1.0, 1e-9]),
            GravityPotential::new(vec![1.0, 1.0], G),
            NoInput,
        )
        .unwrap();
        let a = sys.constrained_accel(&[0.5, 0.0, 1.0, 0.0], &[0.0; 4], &[]).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn energy_of_resting_state_is_potential() {
        let sys = pendulum();
        let x = [0.6, -0.8];
        assert_eq!(sys.total_energy(&x, &[0.0, 0.0]).unwrap(), sys.potential_energy(&x).unwrap());
    }

    #[test]
    fn energy_matches_angle_form() {
        // V referenced to the lowest point: V = m g l (1 − cos θ), T = ½ m l² θ̇².
        let sys = pendulum();
        for (theta, omega) in [(0.3_f64, 1.2_f64), (2.0, -0.5), (-1.0, 3.0)] {
            let x = [theta.sin(), -theta.cos()];
            let v = [omega * theta.cos(), omega * theta.sin()];
            let e = sys.total_energy(&x, &v).unwrap();
            let oracle = 0.5 * omega * omega + G * (1.0 - theta.cos());
            assert!((e - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn nominal_lengths_do_not_change_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for b in [Benchmark::pendulum(), Benchmark::cartpole(), Benchmark::acrobot()] {
            let sys = b.analytic_system(0);
            let scaled: Vec<f64> = sys.constraints.nominal_lengths().iter().map(|d| d * 3.7 + 0.1).collect();
            let other = LagrangianSystem {
                constraints: sys.constraints.with_nominal_lengths(scaled).unwrap(),
                ..sys.clone()
            };
            for _ in 0..100 {
                let (x, v) = b.sample_state(&mut rng);
                let a = sys.constrained_accel(&x, &v, &[]).unwrap();
                let c = other.constrained_accel(&x, &v, &[]).unwrap();
                assert!((a - c).amax() <= 1e-15);
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let sys = pendulum();
        assert!(sys.constrained_accel(&[1.0], &[0.0, 0.0], &[]).is_err());
        assert!(sys.constrained_accel(&[1.0, 0.0], &[0.0, 0.0], &[1.0]).is_err());
        assert!(sys.total_energy(&[1.0, 0.0], &[0.0]).is_err());
    }
}
