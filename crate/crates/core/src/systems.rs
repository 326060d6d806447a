//! Analytic ground-truth systems: the pendulum, cartpole and acrobot
//! benchmarks plus user-described rigid sets.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintKind, ConstraintRow, ConstraintSet};
use crate::dynamics::{InputMatrix, LagrangianSystem, MassMatrix, Potential};
use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::nnmodels::{DynamicsParams, MlpParams, HIDDEN};

pub const GRAVITY: f64 = 9.81;

/// Standard deviation of the Cartesian initial-velocity components.
pub const INIT_VELOCITY_STD: f64 = 0.1;

/// Uniform gravity acting on every keypoint, `V = Σ mᵢ g yᵢ + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityPotential {
    pub masses: Vec<f64>,
    pub g: f64,
    pub offset: f64,
}

impl GravityPotential {
    pub fn new(masses: Vec<f64>, g: f64) -> Self {
        Self { masses, g, offset: 0.0 }
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    /// The constant gradient.
    pub fn coefficients(&self) -> Vec<f64> {
        self.masses.iter().flat_map(|m| [0.0, m * self.g]).collect()
    }
}

impl Potential for GravityPotential {
    fn energy(&self, x: &[f64]) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .map(|(i, m)| m * self.g * x[2 * i + 1])
            .sum::<f64>()
            + self.offset
    }

    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.coefficients()
    }
}

/// `V = cᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPotential {
    pub coefficients: Vec<f64>,
}

impl LinearPotential {
    pub fn new(coefficients: Vec<f64>) -> Self {
        Self { coefficients }
    }
}

impl Potential for LinearPotential {
    fn energy(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.coefficients.clone()
    }
}

/// Unactuated systems.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoInput;

impl InputMatrix for NoInput {
    fn actuators(&self) -> usize {
        0
    }

    fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), 0)
    }

    fn force(&self, x: &[f64], _u: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }
}

/// A fixed point in the plane or a keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Fixed([f64; 2]),
    Keypoint(usize),
}

impl Anchor {
    fn position(&self, x: &[f64]) -> [f64; 2] {
        match *self {
            Anchor::Fixed(p) => p,
            Anchor::Keypoint(j) => [x[2 * j], x[2 * j + 1]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ActuatorTerm {
    /// Force along a fixed world direction on one keypoint.
    Force { keypoint: usize, direction: [f64; 2] },
    /// Torque `scale · u` on the link from `anchor` to `keypoint`. A
    /// keypoint anchor receives the reaction force.
    Torque { anchor: Anchor, keypoint: usize, scale: f64 },
}

/// One actuator: the Cartesian forces produced by a unit input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actuator {
    pub name: String,
    pub terms: Vec<ActuatorTerm>,
}

impl Actuator {
    fn unit_force(&self, x: &[f64], out: &mut [f64]) {
        for term in &self.terms {
            match *term {
                ActuatorTerm::Force { keypoint, direction } => {
                    out[2 * keypoint] += direction[0];
                    out[2 * keypoint + 1] += direction[1];
                }
                ActuatorTerm::Torque { anchor, keypoint, scale } => {
                    let a = anchor.position(x);
                    let d = [x[2 * keypoint] - a[0], x[2 * keypoint + 1] - a[1]];
                    let r2 = d[0] * d[0] + d[1] * d[1];
                    if r2 == 0.0 {
                        continue;
                    }
                    let f = [-d[1] * scale / r2, d[0] * scale / r2];
                    out[2 * keypoint] += f[0];
                    out[2 * keypoint + 1] += f[1];
                    if let Anchor::Keypoint(j) = anchor {
                        out[2 * j] -= f[0];
                        out[2 * j + 1] -= f[1];
                    }
                }
            }
        }
    }
}

/// Analytic input matrix. Each column is the actuator's Cartesian force
/// projected onto the tangent space of the constraints, which leaves the
/// dynamics unchanged and makes the columns span the actuated directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorInput {
    pub constraints: ConstraintSet,
    pub actuators: Vec<Actuator>,
}

impl InputMatrix for ActuatorInput {
    fn actuators(&self) -> usize {
        self.actuators.len()
    }

    fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let k = x.len();
        let mut raw = DMatrix::zeros(k, self.actuators.len());
        for (c, act) in self.actuators.iter().enumerate() {
            let mut col = vec![0.0; k];
            act.unit_force(x, &mut col);
            raw.set_column(c, &DVector::from_vec(col));
        }
        if raw.ncols() == 0 {
            return raw;
        }
        let jac = self.constraints.jacobian_unchecked(x);
        let normal = pinv(&jac) * (&jac * &raw);
        raw - normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    Cartpole,
    Acrobot,
    Custom,
}

impl SystemKind {
    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::Pendulum => "pendulum",
            SystemKind::Cartpole => "cartpole",
            SystemKind::Acrobot => "acrobot",
            SystemKind::Custom => "custom",
        }
    }
}

/// Geometry and physics of a planar point-mass system.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub kind: SystemKind,
    pub constraints: ConstraintSet,
    /// Point masses, one per keypoint.
    pub masses: Vec<f64>,
    pub gravity: f64,
    /// Potential offset placing the lowest configuration at zero.
    pub potential_offset: f64,
    /// All available actuators; a system with `l` inputs uses the first `l`.
    pub actuators: Vec<Actuator>,
    /// Drawn segments, from anchor to keypoint.
    pub links: Vec<(Anchor, usize)>,
    /// Configuration that custom-system sampling perturbs.
    pub reference_state: Vec<f64>,
}

const ORIGIN: Anchor = Anchor::Fixed([0.0, 0.0]);

fn torque(anchor: Anchor, keypoint: usize, scale: f64) -> ActuatorTerm {
    ActuatorTerm::Torque { anchor, keypoint, scale }
}

impl Benchmark {
    /// Unit mass on a unit-length massless rod.
    pub fn pendulum() -> Self {
        let (m, l) = (1.0, 1.0);
        Self {
            kind: SystemKind::Pendulum,
            constraints: ConstraintSet::pendulum(l),
            masses: vec![m],
            gravity: GRAVITY,
            potential_offset: m * GRAVITY * l,
            actuators: vec![Actuator {
                name: "torque".into(),
                terms: vec![torque(ORIGIN, 0, 1.0)],
            }],
            links: vec![(ORIGIN, 0)],
            reference_state: vec![0.0, -l],
        }
    }

    /// Cart of mass 1 on the rail `y = 0`, pole tip of mass 0.5 at length 1.
    pub fn cartpole() -> Self {
        let (mc, mp, l) = (1.0, 0.5, 1.0);
        Self {
            kind: SystemKind::Cartpole,
            constraints: ConstraintSet::cartpole(0.0, l),
            masses: vec![mc, mp],
            gravity: GRAVITY,
            potential_offset: mp * GRAVITY * l,
            actuators: vec![
                Actuator {
                    name: "cart_force".into(),
                    terms: vec![ActuatorTerm::Force {
                        keypoint: 0,
                        direction: [1.0, 0.0],
                    }],
                },
                Actuator {
                    name: "pole_torque".into(),
                    terms: vec![torque(Anchor::Keypoint(0), 1, 1.0)],
                },
            ],
            links: vec![(Anchor::Keypoint(0), 1)],
            reference_state: vec![0.0, 0.0, 0.0, -l],
        }
    }

    /// Two unit masses on links of length 0.5.
    pub fn acrobot() -> Self {
        let (m1, m2, l1, l2) = (1.0, 1.0, 0.5, 0.5);
        Self {
            kind: SystemKind::Acrobot,
            constraints: ConstraintSet::acrobot(l1, l2),
            masses: vec![m1, m2],
            gravity: GRAVITY,
            potential_offset: m1 * GRAVITY * l1 + m2 * GRAVITY * (l1 + l2),
            actuators: vec![
                Actuator {
                    name: "elbow".into(),
                    terms: vec![torque(Anchor::Keypoint(0), 1, 1.0), torque(ORIGIN, 0, -1.0)],
                },
                Actuator {
                    name: "shoulder".into(),
                    terms: vec![torque(ORIGIN, 0, 1.0)],
                },
            ],
            links: vec![(ORIGIN, 0), (Anchor::Keypoint(0), 1)],
            reference_state: vec![0.0, -l1, 0.0, -l1 - l2],
        }
    }

    pub fn from_kind(kind: SystemKind) -> Result<Self> {
        match kind {
            SystemKind::Pendulum => Ok(Self::pendulum()),
            SystemKind::Cartpole => Ok(Self::cartpole()),
            SystemKind::Acrobot => Ok(Self::acrobot()),
            SystemKind::Custom => Err(Error::InvalidInput(
                "custom systems are built from a description".into(),
            )),
        }
    }

    /// A user-described system. The reference state must lie on the
    /// constraint manifold.
    pub fn custom(
        constraints: ConstraintSet,
        masses: Vec<f64>,
        gravity: f64,
        actuators: Vec<Actuator>,
        reference_state: Vec<f64>,
    ) -> Result<Self> {
        if masses.len() != constraints.num_keypoints() || masses.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidInput("one positive mass per keypoint required".into()));
        }
        let phi = constraints.eval_phi(&reference_state)?;
        if phi.amax() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "reference state is off the manifold (|Φ| = {:.3e})",
                phi.amax()
            )));
        }
        let links = constraints
            .rows()
            .iter()
            .filter_map(|row| match *row {
                ConstraintRow::Distance { i, j } => Some((Anchor::Keypoint(i), j)),
                ConstraintRow::Anchor { i, anchor } => Some((Anchor::Fixed(anchor), i)),
                ConstraintRow::Coordinate { .. } => None,
            })
            .collect();
        let offset = -masses
            .iter()
            .enumerate()
            .map(|(i, m)| m * gravity * reference_state[2 * i + 1])
            .sum::<f64>();
        Ok(Self {
            kind: SystemKind::Custom,
            constraints,
            masses,
            gravity,
            potential_offset: offset,
            actuators,
            links,
            reference_state,
        })
    }

    pub fn k(&self) -> usize {
        self.constraints.k()
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn potential(&self) -> GravityPotential {
        GravityPotential::new(self.masses.clone(), self.gravity).with_offset(self.potential_offset)
    }

    pub fn input_model(&self, l: usize) -> ActuatorInput {
        assert!(l <= self.actuators.len(), "{} has only {} actuators", self.name(), self.actuators.len());
        ActuatorInput {
            constraints: self.constraints.clone(),
            actuators: self.actuators[..l].to_vec(),
        }
    }

    /// Ground-truth system with the first `l` actuators.
    pub fn analytic_system(&self, l: usize) -> LagrangianSystem<GravityPotential, ActuatorInput> {
        LagrangianSystem::new(
            self.constraints.clone(),
            MassMatrix::from_masses(&self.masses),
            self.potential(),
            self.input_model(l),
        )
        .expect("benchmark dimensions agree")
    }

    /// Cartesian state for generalized coordinates: pendulum `[θ]`,
    /// cartpole `[x_cart, θ]`, acrobot `[θ₁, θ₂]` (absolute angles from the
    /// downward vertical).
    pub fn from_generalized(&self, q: &[f64]) -> Result<Vec<f64>> {
        let lengths = self.constraints.nominal_lengths();
        match self.kind {
            SystemKind::Pendulum => {
                let l = lengths[0];
                Ok(vec![l * q[0].sin(), -l * q[0].cos()])
            }
            SystemKind::Cartpole => {
                let (rail, l) = (lengths[0], lengths[1]);
                Ok(vec![q[0], rail, q[0] + l * q[1].sin(), rail - l * q[1].cos()])
            }
            SystemKind::Acrobot => {
                let (l1, l2) = (lengths[0], lengths[1]);
                let p1 = [l1 * q[0].sin(), -l1 * q[0].cos()];
                Ok(vec![p1[0], p1[1], p1[0] + l2 * q[1].sin(), p1[1] - l2 * q[1].cos()])
            }
            SystemKind::Custom => Err(Error::InvalidInput("custom systems have no generalized map".into())),
        }
    }

    /// The upright configuration (cart centered).
    pub fn upright(&self) -> Vec<f64> {
        match self.kind {
            SystemKind::Pendulum => self.from_generalized(&[PI]),
            SystemKind::Cartpole => self.from_generalized(&[0.0, PI]),
            SystemKind::Acrobot => self.from_generalized(&[PI, PI]),
            SystemKind::Custom => Ok(self.reference_state.clone()),
        }
        .expect("built-in map")
    }

    /// Random on-manifold state with small tangent velocity.
    pub fn sample_state(&self, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let x = match self.kind {
            SystemKind::Pendulum => self.from_generalized(&[rng.random_range(-PI..PI)]),
            SystemKind::Cartpole => {
                self.from_generalized(&[rng.random_range(-0.5..0.5), rng.random_range(-PI..PI)])
            }
            SystemKind::Acrobot => {
                self.from_generalized(&[rng.random_range(-PI..PI), rng.random_range(-PI..PI)])
            }
            SystemKind::Custom => {
                let normal = Normal::new(0.0, 0.3).expect("valid std");
                let guess: Vec<f64> = self.reference_state.iter().map(|r| r + normal.sample(rng)).collect();
                Ok(project_to_manifold(&self.constraints, &guess))
            }
        }
        .expect("built-in map");
        let normal = Normal::new(0.0, INIT_VELOCITY_STD).expect("valid std");
        let v: Vec<f64> = (0..self.k()).map(|_| normal.sample(rng)).collect();
        let v = self
            .constraints
            .project_tangent(&x, &v)
            .expect("dimensions agree")
            .as_slice()
            .to_vec();
        (x, v)
    }

    /// Learnable parameters reproducing the unactuated ground truth exactly:
    /// true square-root masses and a network that is affine (hence equal
    /// to the gravity potential) on `|V| < 1000`.
    pub fn exact_params(&self) -> DynamicsParams {
        let k = self.k();
        let big = 1000.0;
        let coeffs = self.potential().coefficients();
        let mut net = MlpParams::zeros(&[k, HIDDEN[0], HIDDEN[1], 1]);
        {
            let flat = net.as_mut_slice();
            // Layer 0, unit 0: z = cᵀx + big, always positive.
            flat[..k].copy_from_slice(&coeffs);
            let b0 = k * HIDDEN[0];
            flat[b0] = big;
            // Layer 1, unit 0 copies it.
            let l1 = b0 + HIDDEN[0];
            flat[l1] = 1.0;
            // Output removes the shift.
            let l2 = l1 + HIDDEN[0] * HIDDEN[1] + HIDDEN[1];
            flat[l2] = 1.0;
            flat[l2 + HIDDEN[1]] = self.potential_offset - big;
        }
        DynamicsParams {
            sqrt_masses: self.masses.iter().map(|m| m.sqrt()).collect(),
            potential: net,
            input_model: None,
            seed: 0,
        }
    }

    pub fn constraint_kind(&self) -> ConstraintKind {
        self.constraints.kind()
    }
}

/// Gauss-Newton projection of `x` onto `Φ(x) = 0`.
pub fn project_to_manifold(c: &ConstraintSet, x: &[f64]) -> Vec<f64> {
    let mut x = DVector::from_column_slice(x);
    for _ in 0..100 {
        let phi = c.eval_phi(x.as_slice()).expect("dimensions agree");
        if phi.amax() < 1e-13 {
            break;
        }
        let jac = c.jacobian_phi(x.as_slice()).expect("dimensions agree");
        x -= pinv(&jac) * phi;
    }
    x.as_slice().to_vec()
}
