//! Reverse-mode gradients of the dynamics loss with respect to the learned
//! parameters, backpropagated through the unrolled RK4 steps.
//!
//! Gradients use the flat layout of [`DynamicsParams::flatten`].

use nalgebra::{DMatrix, DVector};

use crate::constraints::ConstraintSet;
use crate::dynamics::{LearnedSystem, MASS_FLOOR};
use crate::error::{check_dim, Error, Result};
use crate::integrate::{rk4_step, RolloutConfig};
use crate::linalg::solve_spd;
use crate::nnmodels::DynamicsParams;

/// A learned system prepared for repeated loss and gradient evaluation.
pub struct LearnedModel<'a> {
    params: &'a DynamicsParams,
    sys: LearnedSystem<'a>,
    minv: Vec<f64>,
    /// `∂D_j / ∂s_p` for the keypoint `p` owning coordinate `j`; zero inside
    /// the mass floor.
    dminv: Vec<f64>,
}

impl<'a> LearnedModel<'a> {
    pub fn new(constraints: &ConstraintSet, params: &'a DynamicsParams) -> Result<Self> {
        let sys = LearnedSystem::learned(constraints.clone(), params)?;
        let minv = sys.mass.inverse_diagonal()?;
        let dminv = params
            .sqrt_masses
            .iter()
            .flat_map(|&s| {
                let d = if s.abs() < MASS_FLOOR { 0.0 } else { -2.0 / (s * s * s) };
                [d, d]
            })
            .collect();
        Ok(Self {
            params,
            sys,
            minv,
            dminv,
        })
    }

    pub fn system(&self) -> &LearnedSystem<'a> {
        &self.sys
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn accel(&self, x: &[f64], v: &[f64], u: &[f64]) -> Vec<f64> {
        self.sys.accel_with(&self.minv, x, v, u)
    }

    /// Pulls `a_bar` back through one acceleration evaluation.
    fn accel_vjp(
        &self,
        x: &[f64],
        v: &[f64],
        u: &[f64],
        a_bar: &[f64],
        grad: &mut [f64],
        x_bar: &mut [f64],
        v_bar: &mut [f64],
    ) {
        let k = x.len();
        let d = &self.minv;
        let c = &self.sys.constraints;

        let f = self.sys.force_unchecked(x, u);
        let jac = c.jacobian_unchecked(x);
        let n = jac.nrows();
        let mut jd = jac.clone();
        for (j, mut col) in jd.column_iter_mut().enumerate() {
            col *= d[j];
        }
        let normal = &jd * jac.transpose();
        let rhs = &jd * DVector::from_column_slice(&f) + c.hessian_contract_unchecked(v);
        let (lambda, _) = solve_spd(&normal, &rhs);
        let jt_lambda = jac.tr_mul(&lambda);

        // a = D r, r = f − Jᵀλ
        let r_bar = DVector::from_iterator(k, (0..k).map(|j| d[j] * a_bar[j]));
        let mut d_bar: Vec<f64> = (0..k).map(|j| a_bar[j] * (f[j] - jt_lambda[j])).collect();
        let mut f_bar: Vec<f64> = r_bar.iter().copied().collect();
        let mut jac_bar = -(&lambda * r_bar.transpose());

        if n > 0 {
            // λ = A⁻¹ b with A symmetric
            let lambda_bar = -(&jac * &r_bar);
            let (b_bar, _) = solve_spd(&normal, &lambda_bar);
            let normal_bar = -(&b_bar * lambda.transpose());

            // b = J D f + c
            let df = DVector::from_iterator(k, (0..k).map(|j| d[j] * f[j]));
            jac_bar += &b_bar * df.transpose();
            let jtb = jac.tr_mul(&b_bar);
            for j in 0..k {
                f_bar[j] += d[j] * jtb[j];
                d_bar[j] += f[j] * jtb[j];
            }
            c.hessian_contract_vjp(v, b_bar.as_slice(), v_bar);

            // A = J D Jᵀ
            jac_bar += (&normal_bar + normal_bar.transpose()) * &jd;
            let t = &normal_bar * &jac;
            for j in 0..k {
                d_bar[j] += jac.column(j).dot(&t.column(j));
            }
            c.jacobian_vjp(&jac_bar, x_bar);
        }

        // f = −∇V + G u
        let (_, pot_off, inp_off) = self.params.offsets();
        let np = self.params.potential.param_count();
        let neg_f_bar: Vec<f64> = f_bar.iter().map(|g| -g).collect();
        self.params
            .potential
            .grad_input_vjp(x, &[1.0], &neg_f_bar, &mut grad[pot_off..pot_off + np], x_bar);
        if let Some(net) = &self.params.input_model {
            if u.iter().any(|&ui| ui != 0.0) {
                let l = u.len();
                let mut o_bar = vec![0.0; k * l];
                for i in 0..k {
                    for j in 0..l {
                        o_bar[i * l + j] = f_bar[i] * u[j];
                    }
                }
                net.vjp_into(x, &o_bar, &mut grad[inp_off..], Some(x_bar));
            }
        }

        for (p, g) in grad[..self.params.sqrt_masses.len()].iter_mut().enumerate() {
            *g += (d_bar[2 * p] + d_bar[2 * p + 1]) * self.dminv[2 * p];
        }
    }

    /// Loss `Σⱼ ‖x̂ⱼ − targetⱼ‖²` of a rollout from `(x0, v0)` with one
    /// predicted frame per target; accumulates its parameter gradient.
    pub fn rollout_loss_grad(
        &self,
        x0: &[f64],
        v0: &[f64],
        u: &[f64],
        targets: &[Vec<f64>],
        h: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let k = x0.len();
        check_dim("gradient buffer", self.param_count(), grad.len())?;

        // Forward, recording the four stage inputs of every step.
        let steps = targets.len();
        let mut xs = vec![x0.to_vec()];
        let mut vs = vec![v0.to_vec()];
        let mut stages: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut rec = Vec::with_capacity(4);
            let (xn, vn) = rk4_step(
                |x, v| {
                    rec.push((x.to_vec(), v.to_vec()));
                    Ok(self.accel(x, v, u))
                },
                xs.last().expect("non-empty"),
                vs.last().expect("non-empty"),
                h,
            )?;
            stages.push(rec);
            xs.push(xn);
            vs.push(vn);
        }

        let mut loss = 0.0;
        for (x, t) in xs[1..].iter().zip(targets) {
            check_dim("rollout target", k, t.len())?;
            loss += x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }

        // Reverse through the steps.
        let mut x_bar = vec![0.0; k];
        let mut v_bar = vec![0.0; k];
        for s in (0..steps).rev() {
            for i in 0..k {
                x_bar[i] += 2.0 * (xs[s + 1][i] - targets[s][i]);
            }
            let (xb, vb) = self.rk4_step_vjp(&stages[s], u, h, &x_bar, &v_bar, grad);
            x_bar = xb;
            v_bar = vb;
        }
        Ok(loss)
    }

    /// Adjoint of one RK4 step given its recorded stage inputs and the
    /// cotangents of the step outputs. Returns the cotangents of the inputs.
    fn rk4_step_vjp(
        &self,
        stages: &[(Vec<f64>, Vec<f64>)],
        u: &[f64],
        h: f64,
        xn_bar: &[f64],
        vn_bar: &[f64],
        grad: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let k = xn_bar.len();
        let mut x_bar = xn_bar.to_vec();
        let mut v_bar: Vec<f64> = (0..k).map(|i| vn_bar[i] + h / 6.0 * xn_bar[i]).collect();
        // Cotangents of the stage velocities v2, v3, v4 and accelerations a1..a4.
        let mut sv_bar: [Vec<f64>; 3] = [
            xn_bar.iter().map(|g| h / 3.0 * g).collect(),
            xn_bar.iter().map(|g| h / 3.0 * g).collect(),
            xn_bar.iter().map(|g| h / 6.0 * g).collect(),
        ];
        let mut sa_bar: [Vec<f64>; 4] = [
            vn_bar.iter().map(|g| h / 6.0 * g).collect(),
            vn_bar.iter().map(|g| h / 3.0 * g).collect(),
            vn_bar.iter().map(|g| h / 3.0 * g).collect(),
            vn_bar.iter().map(|g| h / 6.0 * g).collect(),
        ];
        // Stage s + 1 reads (x + c h v_s, v + c h a_s) with c = ½, ½, 1.
        let coef = [0.5 * h, 0.5 * h, h];
        for s in (1..4).rev() {
            let (xs, vs) = &stages[s];
            let mut xs_bar = vec![0.0; k];
            let mut vs_bar = std::mem::take(&mut sv_bar[s - 1]);
            self.accel_vjp(xs, vs, u, &sa_bar[s], grad, &mut xs_bar, &mut vs_bar);
            let c = coef[s - 1];
            for i in 0..k {
                x_bar[i] += xs_bar[i];
                v_bar[i] += vs_bar[i];
                sa_bar[s - 1][i] += c * vs_bar[i];
            }
            if s >= 2 {
                for i in 0..k {
                    sv_bar[s - 2][i] += c * xs_bar[i];
                }
            } else {
                for i in 0..k {
                    v_bar[i] += c * xs_bar[i];
                }
            }
        }
        let (x1, v1) = &stages[0];
        self.accel_vjp(x1, v1, u, &sa_bar[0], grad, &mut x_bar, &mut v_bar);
        (x_bar, v_bar)
    }

    /// Multi-start dynamics loss of one sequence with its gradient
    /// accumulated into `grad`. `velocities` follow the layout of
    /// [`crate::integrate::multi_start_rollouts`].
    pub fn dynamics_loss_grad(
        &self,
        states: &[Vec<f64>],
        velocities: &[Vec<f64>],
        u: &[f64],
        cfg: &RolloutConfig,
        grad: &mut [f64],
    ) -> Result<f64> {
        let n = states.len();
        if n < cfg.nu + 2 {
            return Err(Error::InvalidInput(format!(
                "{n} frames cannot hold a {}-step rollout with velocity estimation",
                cfg.nu
            )));
        }
        check_dim("velocity estimates", n - 2, velocities.len())?;
        let mut loss = 0.0;
        for start in 1..=n - cfg.nu - 1 {
            loss += self.rollout_loss_grad(
                &states[start],
                &velocities[start - 1],
                u,
                &states[start + 1..=start + cfg.nu],
                cfg.h,
                grad,
            )?;
        }
        Ok(loss)
    }
}

/// Dense `k × k` Jacobian of the acceleration with respect to `x` and `v`,
/// by columns of the reverse pass. Test and diagnostics helper.
pub fn accel_jacobians(model: &LearnedModel, x: &[f64], v: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = x.len();
    let mut jx = DMatrix::zeros(k, k);
    let mut jv = DMatrix::zeros(k, k);
    let mut scratch = vec![0.0; model.param_count()];
    for row in 0..k {
        let mut a_bar = vec![0.0; k];
        a_bar[row] = 1.0;
        let mut xb = vec![0.0; k];
        let mut vb = vec![0.0; k];
        model.accel_vjp(x, v, u, &a_bar, &mut scratch, &mut xb, &mut vb);
        for j in 0..k {
            jx[(row, j)] = xb[j];
            jv[(row, j)] = vb[j];
        }
    }
    (jx, jv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::rollout;
    use crate::systems::Benchmark;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Parameters with weights large enough that every term matters.
    fn lively_params(k: usize, l: usize, seed: u64) -> DynamicsParams {
        let mut p = DynamicsParams::init(k, l, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut flat = p.flatten();
        for (i, v) in flat.iter_mut().enumerate() {
            if i < k / 2 {
                *v = rng.random_range(0.7..1.4);
            } else {
                *v = rng.random_range(-0.4..0.4);
            }
        }
        p = p.from_flat(&flat).unwrap();
        p
    }

    fn state(b: &Benchmark, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, mut v) = b.sample_state(&mut rng);
        for vi in &mut v {
            *vi *= 10.0;
        }
        (x, v)
    }

    #[test]
    fn accel_jacobians_match_finite_differences() {
        for (b, l) in [(Benchmark::pendulum(), 1), (Benchmark::cartpole(), 2), (Benchmark::acrobot(), 1)] {
            let k = b.k();
            let p = lively_params(k, l, 4);
            let model = LearnedModel::new(&b.constraints, &p).unwrap();
            let (x, v) = state(&b, 2);
            let u: Vec<f64> = (0..l).map(|j| 0.3 + 0.2 * j as f64).collect();
            let (jx, jv) = accel_jacobians(&model, &x, &v, &u);
            let h = 1e-6;
            for j in 0..k {
                for (jac, on_x) in [(&jx, true), (&jv, false)] {
                    let (mut xp, mut xm, mut vp, mut vm) = (x.clone(), x.clone(), v.clone(), v.clone());
                    if on_x {
                        xp[j] += h;
                        xm[j] -= h;
                    } else {
                        vp[j] += h;
                        vm[j] -= h;
                    }
                    let ap = model.accel(&xp, &vp, &u);
                    let am = model.accel(&xm, &vm, &u);
                    for i in 0..k {
                        let fd = (ap[i] - am[i]) / (2.0 * h);
                        let err = (fd - jac[(i, j)]).abs();
                        assert!(err <= 1e-6 * (1.0 + fd.abs()), "{} d a{i}/d{}{j}: {fd} vs {}", b.name(), if on_x { "x" } else { "v" }, jac[(i, j)]);
                    }
                }
            }
        }
    }

    fn check_param_gradient(b: &Benchmark, l: usize, steps: usize) {
        let k = b.k();
        let p = lively_params(k, l, 11);
        let (x0, v0) = state(b, 5);
        let u: Vec<f64> = (0..l).map(|j| 0.5 - 0.4 * j as f64).collect();
        // Targets: a perturbed rollout so residuals are nonzero.
        let truth = rollout(&b.analytic_system(l), &x0, &v0, &u, steps, 0.02).unwrap();
        let targets: Vec<Vec<f64>> = truth.states[1..].iter().map(|x| x.iter().map(|xi| xi + 0.01).collect()).collect();

        let model = LearnedModel::new(&b.constraints, &p).unwrap();
        let mut grad = vec![0.0; p.param_count()];
        let loss = model.rollout_loss_grad(&x0, &v0, &u, &targets, 0.02, &mut grad).unwrap();
        assert!(loss > 0.0);

        let flat = p.flatten();
        let loss_at = |flat: &[f64]| {
            let q = p.from_flat(flat).unwrap();
            let m = LearnedModel::new(&b.constraints, &q).unwrap();
            let mut scratch = vec![0.0; flat.len()];
            m.rollout_loss_grad(&x0, &v0, &u, &targets, 0.02, &mut scratch).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut idx: Vec<usize> = (0..k / 2).collect();
        idx.extend((0..25).map(|_| rng.random_range(k / 2..flat.len())));
        let eps = 1e-6;
        for i in idx {
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[i] += eps;
            fm[i] -= eps;
            let fd = (loss_at(&fp) - loss_at(&fm)) / (2.0 * eps);
            let err = (fd - grad[i]).abs();
            assert!(err <= 1e-5 * (fd.abs().max(grad[i].abs()) + 1e-3), "{} param {i}: fd {fd} vs {}", b.name(), grad[i]);
        }
    }

    #[test]
    fn pendulum_parameter_gradient_matches_finite_differences() {
        check_param_gradient(&Benchmark::pendulum(), 1, 5);
    }

    #[test]
    fn cartpole_parameter_gradient_matches_finite_differences() {
        check_param_gradient(&Benchmark::cartpole(), 2, 4);
    }

    #[test]
    fn acrobot_parameter_gradient_matches_finite_differences() {
        check_param_gradient(&Benchmark::acrobot(), 1, 3);
    }

    #[test]
    fn unactuated_gradient_matches_finite_differences() {
        check_param_gradient(&Benchmark::pendulum(), 0, 5);
    }

    #[test]
    fn floored_masses_get_no_gradient() {
        let b = Benchmark::acrobot();
        let mut p = lively_params(4, 0, 1);
        p.sqrt_masses[0] = 1e-8;
        let model = LearnedModel::new(&b.constraints, &p).unwrap();
        let (x0, v0) = state(&b, 1);
        let targets = vec![x0.iter().map(|x| x + 0.1).collect::<Vec<_>>()];
        let mut grad = vec![0.0; p.param_count()];
        model.rollout_loss_grad(&x0, &v0, &[], &targets, 0.02, &mut grad).unwrap();
        assert_eq!(grad[0], 0.0);
        assert!(grad[1] != 0.0);
    }

    #[test]
    fn loss_matches_multi_start_rollouts() {
        let b = Benchmark::pendulum();
        let p = lively_params(2, 1, 2);
        let model = LearnedModel::new(&b.constraints, &p).unwrap();
        let (x0, v0) = state(&b, 9);
        let truth = rollout(&b.analytic_system(1), &x0, &v0, &[0.2], 12, 0.02).unwrap();
        let vel = truth.velocities.as_ref().unwrap()[1..12].to_vec();
        let cfg = RolloutConfig::default();
        let mut grad = vec![0.0; p.param_count()];
        let loss = model.dynamics_loss_grad(&truth.states, &vel, &[0.2], &cfg, &mut grad).unwrap();
        let preds = crate::integrate::multi_start_rollouts(model.system(), &truth.states, &vel, &[0.2], &cfg).unwrap();
        let mut oracle = 0.0;
        for s in &preds {
            for (j, x) in s.predictions.iter().enumerate() {
                let t = &truth.states[s.start + 1 + j];
                oracle += x.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        assert!((loss - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }
}
