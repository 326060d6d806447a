//! Fixed-step RK4 integration, rollouts and trajectory files.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{InputMatrix, LagrangianSystem, Potential};
use crate::error::{check_dim, Error, Result};
use crate::json::{self, format_f64};

/// Default timestep in seconds.
pub const DEFAULT_H: f64 = 0.02;
/// Default rollout horizon ν.
pub const DEFAULT_NU: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub h: f64,
    pub nu: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            nu: DEFAULT_NU,
        }
    }
}

impl RolloutConfig {
    pub fn new(h: f64, nu: usize) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidInput(format!("timestep must be positive, got {h}")));
        }
        if nu == 0 {
            return Err(Error::InvalidInput("rollout horizon must be at least 1".into()));
        }
        Ok(Self { h, nu })
    }
}

/// A sampled motion with constant input.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub velocities: Option<Vec<Vec<f64>>>,
    pub u: Vec<f64>,
    pub h: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn k(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Drops velocities, as when only positions are observed.
    pub fn positions_only(&self) -> Self {
        Self {
            velocities: None,
            ..self.clone()
        }
    }
}

/// One classical Runge-Kutta step of `(x, v) ↦ (v, a(x, v))`.
pub fn rk4_step<F>(mut accel: F, x: &[f64], v: &[f64], h: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let mut eval = |x: &[f64], v: &[f64]| -> Result<Vec<f64>> {
        let a = accel(x, v)?;
        if a.iter().all(|ai| ai.is_finite()) {
            Ok(a)
        } else {
            Err(Error::Integration {
                x: x.to_vec(),
                v: v.to_vec(),
            })
        }
    };
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + s * q).collect() };

    let a1 = eval(x, v)?;
    let x2 = axpy(x, 0.5 * h, v);
    let v2 = axpy(v, 0.5 * h, &a1);
    let a2 = eval(&x2, &v2)?;
    let x3 = axpy(x, 0.5 * h, &v2);
    let v3 = axpy(v, 0.5 * h, &a2);
    let a3 = eval(&x3, &v3)?;
    let x4 = axpy(x, h, &v3);
    let v4 = axpy(v, h, &a3);
    let a4 = eval(&x4, &v4)?;

    let s = h / 6.0;
    let x_next = (0..x.len())
        .map(|i| x[i] + s * (v[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i]))
        .collect();
    let v_next = (0..v.len())
        .map(|i| v[i] + s * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]))
        .collect();
    Ok((x_next, v_next))
}

/// Integrates `steps` steps from `(x0, v0)` under constant input `u`.
pub fn rollout<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    x0: &[f64],
    v0: &[f64],
    u: &[f64],
    steps: usize,
    h: f64,
) -> Result<Trajectory> {
    // Shape checks happen once here.
    sys.constrained_accel(x0, v0, u)?;
    let minv = sys.mass.inverse_diagonal()?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    velocities.push(v0.to_vec());
    for _ in 0..steps {
        let (x, v) = (states.last().expect("non-empty"), velocities.last().expect("non-empty"));
        let (xn, vn) = rk4_step(|x, v| Ok(sys.accel_with(&minv, x, v, u)), x, v, h)?;
        states.push(xn);
        velocities.push(vn);
    }
    Ok(Trajectory {
        states,
        velocities: Some(velocities),
        u: u.to_vec(),
        h,
    })
}

/// Predictions from one start frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StartRollout {
    /// Zero-based index of the start frame.
    pub start: usize,
    /// Predicted states for frames `start + 1 ..= start + ν`.
    pub predictions: Vec<Vec<f64>>,
}

/// Overlapping ν-step predictions from every frame that has an estimated
/// velocity and ν frames after it.
///
/// `velocities[j]` belongs to frame `j + 1` (the layout returned by
/// [`crate::learn::estimate_velocity`]). With `n` frames there are
/// `n − ν − 1` starts, frames `1 ..= n − ν − 1`.
pub fn multi_start_rollouts<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    states: &[Vec<f64>],
    velocities: &[Vec<f64>],
    u: &[f64],
    cfg: &RolloutConfig,
) -> Result<Vec<StartRollout>> {
    let n = states.len();
    if n < cfg.nu + 2 {
        return Err(Error::InvalidInput(format!(
            "{n} frames cannot hold a {}-step rollout with velocity estimation",
            cfg.nu
        )));
    }
    check_dim("velocity estimates", n - 2, velocities.len())?;
    (1..=n - cfg.nu - 1)
        .into_par_iter()
        .map(|start| {
            let traj = rollout(sys, &states[start], &velocities[start - 1], u, cfg.nu, cfg.h)?;
            Ok(StartRollout {
                start,
                predictions: traj.states[1..].to_vec(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Files

/// Sidecar metadata written beside every trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMeta {
    pub system: String,
    pub h: f64,
    pub seed: u64,
    pub on_manifold: bool,
}

/// Extra per-row columns appended after the trajectory columns.
pub struct ExtraColumns<'a> {
    pub names: Vec<String>,
    pub rows: &'a [Vec<f64>],
}

fn header(k: usize, with_v: bool, l: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..k).map(|i| format!("x{i}")));
    if with_v {
        h.extend((0..k).map(|i| format!("v{i}")));
    }
    h.extend((0..l).map(|i| format!("u{i}")));
    h
}

/// CSV text: `t, x0.., v0.., u0..` and any extra columns, 17 significant
/// digits per value.
pub fn trajectory_csv(traj: &Trajectory, extra: Option<&ExtraColumns>) -> Result<String> {
    let k = traj.k();
    let mut cols = header(k, traj.velocities.is_some(), traj.u.len());
    if let Some(e) = extra {
        check_dim("extra csv rows", traj.len(), e.rows.len())?;
        cols.extend(e.names.iter().cloned());
    }
    let mut out = cols.join(",");
    out.push('\n');
    for (i, x) in traj.states.iter().enumerate() {
        let mut row = vec![format_f64(i as f64 * traj.h)];
        row.extend(x.iter().map(|&v| format_f64(v)));
        if let Some(vs) = &traj.velocities {
            row.extend(vs[i].iter().map(|&v| format_f64(v)));
        }
        row.extend(traj.u.iter().map(|&v| format_f64(v)));
        if let Some(e) = extra {
            row.extend(e.rows[i].iter().map(|&v| format_f64(v)));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, meta: &TrajectoryMeta) -> Result<()> {
    fs::write(path, trajectory_csv(traj, None)?).map_err(|e| Error::io(path, e))?;
    let side = path.with_extension("json");
    fs::write(&side, json::to_string_pretty(meta)?).map_err(|e| Error::io(side, e))
}

/// Reads a trajectory CSV. The timestep comes from the sidecar when present,
/// else from the time column.
pub fn read_trajectory(path: &Path) -> Result<(Trajectory, Option<TrajectoryMeta>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let count = |p: char| {
        names
            .iter()
            .filter(|n| n.starts_with(p) && n[1..].parse::<usize>().is_ok())
            .count()
    };
    let (k, nv, l) = (count('x'), count('v'), count('u'));
    if names.first().map(String::as_str) != Some("t") || k == 0 || (nv != 0 && nv != k) {
        return Err(Error::Format(format!("{}: unexpected header {names:?}", path.display())));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut velocities = Vec::new();
    let mut u = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<f64>>>()?;
        times.push(vals[0]);
        states.push(vals[1..1 + k].to_vec());
        if nv > 0 {
            velocities.push(vals[1 + k..1 + 2 * k].to_vec());
        }
        if u.is_empty() {
            u = vals[1 + k + nv..1 + k + nv + l].to_vec();
        }
    }
    let side = path.with_extension("json");
    let meta: Option<TrajectoryMeta> = match fs::read_to_string(&side) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(_) => None,
    };
    let h = match (&meta, times.len()) {
        (Some(m), _) => m.h,
        (None, n) if n >= 2 => times[1] - times[0],
        (None, _) => DEFAULT_H,
    };
    Ok((
        Trajectory {
            states,
            velocities: (nv > 0).then_some(velocities),
            u,
            h,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::Benchmark;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn free_motion_step() {
        let (x, v) = rk4_step(|x, _| Ok(vec![0.0; x.len()]), &[1.0, 2.0], &[0.5, -1.0], 0.1).unwrap();
        assert_eq!(x, vec![1.05, 1.9]);
        assert_eq!(v, vec![0.5, -1.0]);
    }

    fn oscillator_error(h: f64, t_end: f64) -> f64 {
        let steps = (t_end / h).round() as usize;
        let (mut x, mut v) = (vec![1.0], vec![0.0]);
        for _ in 0..steps {
            let (xn, vn) = rk4_step(|x, _| Ok(vec![-x[0]]), &x, &v, h).unwrap();
            x = xn;
            v = vn;
        }
        let t = steps as f64 * h;
        (x[0] - t.cos()).abs().max((v[0] + t.sin()).abs())
    }

    #[test]
    fn harmonic_oscillator_returns_after_a_period() {
        let (mut x, mut v) = (vec![1.0], vec![0.0]);
        for _ in 0..628 {
            let (xn, vn) = rk4_step(|x, _| Ok(vec![-x[0]]), &x, &v, 0.01).unwrap();
            x = xn;
            v = vn;
        }
        let t = 628.0_f64 * 0.01;
        assert!((x[0] - t.cos()).abs() <= 1e-6);
        assert!((v[0] + t.sin()).abs() <= 1e-6);
    }

    #[test]
    fn global_error_is_fourth_order() {
        let e1 = oscillator_error(0.1, 5.0);
        let e2 = oscillator_error(0.05, 5.0);
        let ratio = e1 / e2;
        assert!((13.0..19.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn non_finite_acceleration_is_reported() {
        let r = rk4_step(|_, _| Ok(vec![f64::NAN]), &[0.0], &[0.0], 0.1);
        assert!(matches!(r, Err(Error::Integration { .. })));
    }

    #[test]
    fn pendulum_at_rest_stays() {
        let b = Benchmark::pendulum();
        let sys = b.analytic_system(0);
        let traj = rollout(&sys, &[0.0, -1.0], &[0.0, 0.0], &[], 50, 0.02).unwrap();
        assert_eq!(traj.len(), 51);
        for x in &traj.states {
            assert!((x[0]).abs() < 1e-12 && (x[1] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_oscillation_period() {
        let b = Benchmark::pendulum();
        let sys = b.analytic_system(0);
        let h = 0.001;
        let x0 = b.from_generalized(&[0.1]).unwrap();
        let traj = rollout(&sys, &x0, &[0.0, 0.0], &[], 5000, h).unwrap();
        // Zero crossings of the horizontal coordinate, linearly interpolated.
        let mut crossings = Vec::new();
        for i in 1..traj.len() {
            let (a, b) = (traj.states[i - 1][0], traj.states[i][0]);
            if a.signum() != b.signum() && a != 0.0 {
                crossings.push((i as f64 - 1.0 + a / (a - b)) * h);
            }
        }
        let period = 2.0 * (crossings[2] - crossings[0]) / 2.0;
        let linear = 2.0 * std::f64::consts::PI * (1.0 / 9.81_f64).sqrt();
        assert!((period / linear - 1.0).abs() < 0.01, "{period} vs {linear}");
    }

    fn worst_drift(b: &Benchmark, h: f64, steps: usize, seed: u64) -> (f64, f64) {
        let sys = b.analytic_system(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut phi, mut energy) = (0.0f64, 0.0f64);
        for _ in 0..10 {
            let (x0, v0) = b.sample_state(&mut rng);
            let e0 = sys.total_energy(&x0, &v0).unwrap();
            let traj = rollout(&sys, &x0, &v0, &[], steps, h).unwrap();
            let vs = traj.velocities.as_ref().unwrap();
            for (x, v) in traj.states.iter().zip(vs) {
                phi = phi.max(b.constraints.eval_phi(x).unwrap().amax());
                energy = energy.max((sys.total_energy(x, v).unwrap() - e0).abs() / e0);
            }
        }
        (phi, energy)
    }

    #[test]
    fn drift_is_small_at_fine_steps() {
        for b in [Benchmark::pendulum(), Benchmark::cartpole(), Benchmark::acrobot()] {
            let (phi, energy) = worst_drift(&b, 0.005, 200, 8);
            assert!(phi <= 1e-5 && energy <= 1e-4, "{}: {phi:e} {energy:e}", b.name());
        }
    }

    #[test]
    fn per_step_energy_error_is_fifth_order() {
        for b in [Benchmark::pendulum(), Benchmark::cartpole(), Benchmark::acrobot()] {
            let (_, coarse) = worst_drift(&b, 0.02, 1, 3);
            let (_, fine) = worst_drift(&b, 0.01, 1, 3);
            assert!(coarse / fine >= 16.0, "{}: ratio {}", b.name(), coarse / fine);
        }
    }

    #[test]
    fn multi_start_counts_and_redundancy() {
        let b = Benchmark::acrobot();
        let sys = b.analytic_system(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x0, v0) = b.sample_state(&mut rng);
        let traj = rollout(&sys, &x0, &v0, &[], 9, 0.02).unwrap();
        let vel: Vec<Vec<f64>> = traj.velocities.as_ref().unwrap()[1..9].to_vec();
        let cfg = RolloutConfig::new(0.02, 5).unwrap();
        let seqs = multi_start_rollouts(&sys, &traj.states, &vel, &[], &cfg).unwrap();
        assert_eq!(seqs.len(), 4);
        assert_eq!(seqs.iter().map(|s| s.start).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        for s in &seqs {
            let single = rollout(&sys, &traj.states[s.start], &vel[s.start - 1], &[], 5, 0.02).unwrap();
            for j in 0..5 {
                // Bit-identical to the standalone rollout truncated at step j.
                assert_eq!(s.predictions[j], single.states[j + 1]);
            }
        }
        let one = multi_start_rollouts(&sys, &traj.states, &vel, &[], &RolloutConfig::new(0.02, 1).unwrap()).unwrap();
        assert_eq!(one.len(), 10 - 2);
        let short = RolloutConfig::new(0.02, 9).unwrap();
        assert!(multi_start_rollouts(&sys, &traj.states, &vel, &[], &short).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RolloutConfig::new(0.0, 5).is_err());
        assert!(RolloutConfig::new(0.02, 0).is_err());
        assert_eq!(RolloutConfig::default(), RolloutConfig::new(0.02, 5).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let b = Benchmark::cartpole();
        let sys = b.analytic_system(2);
        let traj = rollout(&sys, &b.reference_state, &[0.1, 0.0, 0.1, 0.0], &[0.3, -0.2], 4, 0.02).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq_0000.csv");
        let meta = TrajectoryMeta {
            system: "cartpole".into(),
            h: 0.02,
            seed: 9,
            on_manifold: true,
        };
        write_trajectory(&path, &traj, &meta).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x0,x1,x2,x3,v0,v1,v2,v3,u0,u1\n"));
        let (back, m) = read_trajectory(&path).unwrap();
        assert_eq!(back, traj);
        assert_eq!(m.unwrap(), meta);
    }
}
