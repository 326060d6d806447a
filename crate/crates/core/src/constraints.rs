//! Holonomic constraints for planar point-mass systems.
//!
//! Every built-in constraint row is either linear or quadratic in the
//! Cartesian state, so Jacobians and second-derivative contractions are
//! exact and cheap. The state is laid out as `[x_0, y_0, x_1, y_1, ...]`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::pinv;

/// The kind of system a constraint set was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Pendulum,
    Cartpole,
    Acrobot,
    RigidSet,
    Composite,
}

/// One scalar constraint. The nominal value lives in
/// [`ConstraintSet::nominal_lengths`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ConstraintRow {
    /// `½(‖x_i − x_j‖² − d²)`.
    Distance { i: usize, j: usize },
    /// `½(‖x_i − anchor‖² − d²)` for a fixed point in the plane.
    Anchor { i: usize, anchor: [f64; 2] },
    /// `x_i[axis] − c`: keeps one coordinate of a keypoint fixed.
    Coordinate { i: usize, axis: usize },
}

impl ConstraintRow {
    fn keypoints(&self) -> (usize, Option<usize>) {
        match *self {
            ConstraintRow::Distance { i, j } => (i, Some(j)),
            ConstraintRow::Anchor { i, .. } | ConstraintRow::Coordinate { i, .. } => (i, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    k: usize,
    rows: Vec<ConstraintRow>,
    nominal_lengths: Vec<f64>,
    kind: ConstraintKind,
}

#[inline]
fn pt(x: &[f64], i: usize) -> [f64; 2] {
    [x[2 * i], x[2 * i + 1]]
}

impl ConstraintSet {
    /// Builds a constraint set, checking indices and the degree-of-freedom
    /// count `n < k`.
    pub fn new(
        k: usize,
        rows: Vec<ConstraintRow>,
        nominal_lengths: Vec<f64>,
        kind: ConstraintKind,
    ) -> Result<Self> {
        if k == 0 || !k.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "state dimension must be a positive multiple of 2, got {k}"
            )));
        }
        check_dim("nominal lengths", rows.len(), nominal_lengths.len())?;
        if rows.len() >= k {
            return Err(Error::InvalidInput(format!(
                "{} constraints leave no degree of freedom in dimension {k}",
                rows.len()
            )));
        }
        let m = k / 2;
        for row in &rows {
            let (i, j) = row.keypoints();
            if i >= m || j.is_some_and(|j| j >= m) {
                return Err(Error::InvalidInput(format!(
                    "constraint {row:?} references a keypoint outside 0..{m}"
                )));
            }
            match *row {
                ConstraintRow::Distance { i, j } if i == j => {
                    return Err(Error::InvalidInput(format!(
                        "distance constraint between keypoint {i} and itself"
                    )));
                }
                ConstraintRow::Coordinate { axis, .. } if axis > 1 => {
                    return Err(Error::InvalidInput(format!("axis {axis} is not planar")));
                }
                _ => {}
            }
        }
        Ok(Self {
            k,
            rows,
            nominal_lengths,
            kind,
        })
    }

    /// Single keypoint at fixed distance from the origin.
    pub fn pendulum(length: f64) -> Self {
        Self::new(
            2,
            vec![ConstraintRow::Anchor {
                i: 0,
                anchor: [0.0, 0.0],
            }],
            vec![length],
            ConstraintKind::Pendulum,
        )
        .expect("pendulum constraints are well formed")
    }

    /// Cart on a horizontal rail at height `rail_y` carrying a pole of
    /// fixed length. Keypoint 0 is the cart, keypoint 1 the pole tip.
    pub fn cartpole(rail_y: f64, length: f64) -> Self {
        Self::new(
            4,
            vec![
                ConstraintRow::Coordinate { i: 0, axis: 1 },
                ConstraintRow::Distance { i: 0, j: 1 },
            ],
            vec![rail_y, length],
            ConstraintKind::Cartpole,
        )
        .expect("cartpole constraints are well formed")
    }

    /// Double pendulum hinged at the origin.
    pub fn acrobot(l1: f64, l2: f64) -> Self {
        Self::new(
            4,
            vec![
                ConstraintRow::Anchor {
                    i: 0,
                    anchor: [0.0, 0.0],
                },
                ConstraintRow::Distance { i: 0, j: 1 },
            ],
            vec![l1, l2],
            ConstraintKind::Acrobot,
        )
        .expect("acrobot constraints are well formed")
    }

    /// Pairwise distance constraints binding keypoints into rigid sets.
    pub fn rigid_set(num_keypoints: usize, pairs: &[(usize, usize, f64)]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut rows = Vec::with_capacity(pairs.len());
        let mut lengths = Vec::with_capacity(pairs.len());
        for &(i, j, d) in pairs {
            if !(d > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "pair ({i}, {j}) has non-positive length {d}"
                )));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::InvalidInput(format!("duplicate pair ({i}, {j})")));
            }
            rows.push(ConstraintRow::Distance { i, j });
            lengths.push(d);
        }
        Self::new(2 * num_keypoints, rows, lengths, ConstraintKind::RigidSet)
    }

    /// Concatenates the rows of two sets over the same state.
    pub fn compose(&self, other: &ConstraintSet) -> Result<Self> {
        check_dim("composite constraint state", self.k, other.k)?;
        let mut rows = self.rows.clone();
        rows.extend_from_slice(&other.rows);
        let mut lengths = self.nominal_lengths.clone();
        lengths.extend_from_slice(&other.nominal_lengths);
        Self::new(self.k, rows, lengths, ConstraintKind::Composite)
    }

    /// Same rows with different nominal values.
    pub fn with_nominal_lengths(&self, lengths: Vec<f64>) -> Result<Self> {
        check_dim("nominal lengths", self.rows.len(), lengths.len())?;
        Ok(Self {
            nominal_lengths: lengths,
            ..self.clone()
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.k / 2
    }

    /// Degrees of freedom `k − n`.
    pub fn dof(&self) -> usize {
        self.k - self.rows.len()
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn rows(&self) -> &[ConstraintRow] {
        &self.rows
    }

    pub fn nominal_lengths(&self) -> &[f64] {
        &self.nominal_lengths
    }

    /// Constraint residuals `Φ(x)`.
    pub fn eval_phi(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim("eval_phi state", self.k, x.len())?;
        Ok(DVector::from_iterator(
            self.n(),
            self.rows
                .iter()
                .zip(&self.nominal_lengths)
                .map(|(row, &d)| match *row {
                    ConstraintRow::Distance { i, j } => {
                        let (a, b) = (pt(x, i), pt(x, j));
                        let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
                        0.5 * (dx * dx + dy * dy - d * d)
                    }
                    ConstraintRow::Anchor { i, anchor } => {
                        let a = pt(x, i);
                        let (dx, dy) = (a[0] - anchor[0], a[1] - anchor[1]);
                        0.5 * (dx * dx + dy * dy - d * d)
                    }
                    ConstraintRow::Coordinate { i, axis } => x[2 * i + axis] - d,
                }),
        ))
    }

    /// Exact Jacobian `DΦ(x)`, shape `n × k`.
    pub fn jacobian_phi(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim("jacobian_phi state", self.k, x.len())?;
        Ok(self.jacobian_unchecked(x))
    }

    pub(crate) fn jacobian_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n(), self.k);
        for (r, row) in self.rows.iter().enumerate() {
            match *row {
                ConstraintRow::Distance { i, j } => {
                    for c in 0..2 {
                        let diff = x[2 * i + c] - x[2 * j + c];
                        jac[(r, 2 * i + c)] = diff;
                        jac[(r, 2 * j + c)] = -diff;
                    }
                }
                ConstraintRow::Anchor { i, anchor } => {
                    for c in 0..2 {
                        jac[(r, 2 * i + c)] = x[2 * i + c] - anchor[c];
                    }
                }
                ConstraintRow::Coordinate { i, axis } => {
                    jac[(r, 2 * i + axis)] = 1.0;
                }
            }
        }
        jac
    }

    /// The contraction `⟨D²Φ, v⟩v`, one entry per constraint.
    pub fn hessian_contract(&self, x: &[f64], v: &[f64]) -> Result<DVector<f64>> {
        check_dim("hessian_contract state", self.k, x.len())?;
        check_dim("hessian_contract velocity", self.k, v.len())?;
        Ok(self.hessian_contract_unchecked(v))
    }

    // The Hessians of all row kinds are constant, so x does not enter.
    pub(crate) fn hessian_contract_unchecked(&self, v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.rows.iter().map(|row| match *row {
                ConstraintRow::Distance { i, j } => {
                    let dx = v[2 * i] - v[2 * j];
                    let dy = v[2 * i + 1] - v[2 * j + 1];
                    dx * dx + dy * dy
                }
                ConstraintRow::Anchor { i, .. } => v[2 * i] * v[2 * i] + v[2 * i + 1] * v[2 * i + 1],
                ConstraintRow::Coordinate { .. } => 0.0,
            }),
        )
    }

    /// Accumulates into `x_bar` the pullback of an adjoint `jac_bar` of the
    /// Jacobian (same `n × k` shape).
    pub(crate) fn jacobian_vjp(&self, jac_bar: &DMatrix<f64>, x_bar: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            match *row {
                ConstraintRow::Distance { i, j } => {
                    for c in 0..2 {
                        let g = jac_bar[(r, 2 * i + c)] - jac_bar[(r, 2 * j + c)];
                        x_bar[2 * i + c] += g;
                        x_bar[2 * j + c] -= g;
                    }
                }
                ConstraintRow::Anchor { i, .. } => {
                    for c in 0..2 {
                        x_bar[2 * i + c] += jac_bar[(r, 2 * i + c)];
                    }
                }
                ConstraintRow::Coordinate { .. } => {}
            }
        }
    }

    /// Accumulates into `v_bar` the pullback of `c_bar` through
    /// [`Self::hessian_contract`].
    pub(crate) fn hessian_contract_vjp(&self, v: &[f64], c_bar: &[f64], v_bar: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            match *row {
                ConstraintRow::Distance { i, j } => {
                    for c in 0..2 {
                        let g = 2.0 * c_bar[r] * (v[2 * i + c] - v[2 * j + c]);
                        v_bar[2 * i + c] += g;
                        v_bar[2 * j + c] -= g;
                    }
                }
                ConstraintRow::Anchor { i, .. } => {
                    for c in 0..2 {
                        v_bar[2 * i + c] += 2.0 * c_bar[r] * v[2 * i + c];
                    }
                }
                ConstraintRow::Coordinate { .. } => {}
            }
        }
    }

    /// Projector `I − DΦ⁺DΦ` onto the tangent space at `x`.
    pub fn tangent_projector(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let jac = self.jacobian_phi(x)?;
        Ok(DMatrix::identity(self.k, self.k) - pinv(&jac) * jac)
    }

    /// Removes the component of `v` normal to the constraint manifold.
    pub fn project_tangent(&self, x: &[f64], v: &[f64]) -> Result<DVector<f64>> {
        check_dim("project_tangent velocity", self.k, v.len())?;
        let jac = self.jacobian_phi(x)?;
        let v = DVector::from_column_slice(v);
        let normal = pinv(&jac) * (&jac * &v);
        Ok(v - normal)
    }
}
