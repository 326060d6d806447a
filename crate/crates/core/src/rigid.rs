//! Planar rigid bodies as two collinear point masses.
//!
//! Two masses `m₁, m₂` at signed distances `r₁, −r₂` from the center of mass
//! along a body axis reproduce mass `m`, center of mass and rotational
//! inertia `I` when
//!
//! ```text
//! m₁ + m₂ = m,   m₁ r₁ = m₂ r₂,   m₁ r₁² + m₂ r₂² = I
//! ```
//!
//! so `r₁ r₂ = I / m` and the placement of one point fixes the other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub m1: f64,
    pub m2: f64,
    /// Distance of point 1 from the center of mass.
    pub r1: f64,
    /// Distance of point 2 from the center of mass, on the opposite side.
    pub r2: f64,
}

impl PointPair {
    /// Pair equivalent to mass `m` and inertia `inertia` with point 1 at
    /// distance `r1` from the center of mass.
    pub fn equivalent(m: f64, inertia: f64, r1: f64) -> Result<Self> {
        if !(m > 0.0 && inertia > 0.0 && r1 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "mass, inertia and placement must be positive, got {m}, {inertia}, {r1}"
            )));
        }
        let r2 = inertia / (m * r1);
        Ok(Self {
            m1: m * r2 / (r1 + r2),
            m2: m * r1 / (r1 + r2),
            r1,
            r2,
        })
    }

    /// Equal masses, each at `√(I/m)` from the center.
    pub fn symmetric(m: f64, inertia: f64) -> Result<Self> {
        if !(m > 0.0) {
            return Err(Error::InvalidInput(format!("mass must be positive, got {m}")));
        }
        Self::equivalent(m, inertia, (inertia / m).sqrt())
    }

    /// Uniform rod of length `length`: points at `L/√12` from the center.
    pub fn uniform_rod(m: f64, length: f64) -> Result<Self> {
        Self::symmetric(m, m * length * length / 12.0)
    }

    pub fn mass(&self) -> f64 {
        self.m1 + self.m2
    }

    pub fn inertia(&self) -> f64 {
        self.m1 * self.r1 * self.r1 + self.m2 * self.r2 * self.r2
    }

    /// Point positions for a body at `com` with axis angle `angle`.
    pub fn positions(&self, com: [f64; 2], angle: f64) -> [[f64; 2]; 2] {
        let (s, c) = angle.sin_cos();
        [
            [com[0] + self.r1 * c, com[1] + self.r1 * s],
            [com[0] - self.r2 * c, com[1] - self.r2 * s],
        ]
    }

    /// Point velocities for center velocity `vc` and angular rate `omega`.
    pub fn velocities(&self, vc: [f64; 2], angle: f64, omega: f64) -> [[f64; 2]; 2] {
        let (s, c) = angle.sin_cos();
        [
            [vc[0] - self.r1 * s * omega, vc[1] + self.r1 * c * omega],
            [vc[0] + self.r2 * s * omega, vc[1] - self.r2 * c * omega],
        ]
    }

    pub fn kinetic_energy(&self, vc: [f64; 2], angle: f64, omega: f64) -> f64 {
        let [v1, v2] = self.velocities(vc, angle, omega);
        0.5 * self.m1 * (v1[0] * v1[0] + v1[1] * v1[1]) + 0.5 * self.m2 * (v2[0] * v2[0] + v2[1] * v2[1])
    }
}

/// `½ m ‖v_c‖² + ½ I ω²`.
pub fn rigid_kinetic_energy(m: f64, inertia: f64, vc: [f64; 2], omega: f64) -> f64 {
    0.5 * m * (vc[0] * vc[0] + vc[1] * vc[1]) + 0.5 * inertia * omega * omega
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conditions_hold() {
        let p = PointPair::equivalent(3.0, 0.8, 0.4).unwrap();
        assert!((p.mass() - 3.0).abs() < 1e-15);
        assert!((p.m1 * p.r1 - p.m2 * p.r2).abs() < 1e-15);
        assert!((p.inertia() - 0.8).abs() < 1e-14);
        assert!(PointPair::equivalent(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn kinetic_energy_matches_rigid_body() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let m = rng.random_range(0.1..5.0);
            let inertia = rng.random_range(0.01..2.0);
            let p = PointPair::equivalent(m, inertia, rng.random_range(0.05..2.0)).unwrap();
            let vc = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (angle, omega) = (rng.random_range(-3.2..3.2), rng.random_range(-5.0..5.0));
            let a = p.kinetic_energy(vc, angle, omega);
            let b = rigid_kinetic_energy(m, inertia, vc, omega);
            assert!((a - b).abs() <= 1e-10 * b.max(1.0));
            let [x1, x2] = p.positions([0.3, -0.2], angle);
            let com = [(p.m1 * x1[0] + p.m2 * x2[0]) / m, (p.m1 * x1[1] + p.m2 * x2[1]) / m];
            assert!((com[0] - 0.3).abs() < 1e-12 && (com[1] + 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_rod_placement() {
        let p = PointPair::uniform_rod(2.0, 1.5).unwrap();
        assert!((p.r1 - 1.5 / 12f64.sqrt()).abs() < 1e-15);
        assert!((p.r2 - p.r1).abs() < 1e-15);
        assert!((p.m1 - 1.0).abs() < 1e-15 && (p.m2 - 1.0).abs() < 1e-15);
    }
}
