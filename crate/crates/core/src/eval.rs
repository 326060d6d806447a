//! Valid prediction time, energy traces and input-matrix fields.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{kinetic_energy, InputMatrix, LagrangianSystem, Potential};
use crate::error::{check_dim, Error, Result};
use crate::integrate::{rollout, Trajectory};
use crate::keypoints::{render_sequence, Image, WorldFrame};
use crate::learn::estimate_velocity;
use crate::systems::Anchor;

/// Mean over frames of the pixel MSE against the pixel-wise average frame.
pub fn epsilon_threshold(frames: &[Image]) -> Result<f64> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("threshold needs at least one frame".into()))?;
    let mut avg = vec![0.0; first.data.len()];
    for f in frames {
        check_dim("frame pixels", avg.len(), f.data.len())?;
        for (a, v) in avg.iter_mut().zip(&f.data) {
            *a += v;
        }
    }
    let n = frames.len() as f64;
    let avg = Image {
        height: first.height,
        width: first.width,
        data: avg.into_iter().map(|a| a / n).collect(),
    };
    let total: f64 = frames.iter().map(|f| f.mse(&avg)).sum::<Result<f64>>()?;
    Ok(total / n)
}

/// Index of the first frame whose error exceeds `epsilon`, or the sequence
/// length when none does.
pub fn vpt_from_errors(errors: &[f64], epsilon: f64) -> usize {
    errors.iter().position(|&e| e > epsilon).unwrap_or(errors.len())
}

pub fn vpt(pred: &[Image], truth: &[Image], epsilon: f64) -> Result<usize> {
    check_dim("vpt frames", truth.len(), pred.len())?;
    let errors = pred.iter().zip(truth).map(|(p, t)| p.mse(t)).collect::<Result<Vec<_>>>()?;
    Ok(vpt_from_errors(&errors, epsilon))
}

/// Mean squared difference per state entry.
pub fn state_mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("state entries", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len().max(1) as f64)
}

/// State-space analogue of [`epsilon_threshold`]: mean state MSE against
/// the average state.
pub fn state_epsilon(states: &[Vec<f64>]) -> Result<f64> {
    let k = states
        .first()
        .ok_or_else(|| Error::InvalidInput("threshold needs at least one state".into()))?
        .len();
    let mut avg = vec![0.0; k];
    for s in states {
        check_dim("state entries", k, s.len())?;
        for (a, v) in avg.iter_mut().zip(s) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= states.len() as f64);
    Ok(states.iter().map(|s| state_mse(s, &avg)).sum::<Result<f64>>()? / states.len() as f64)
}

/// State-space VPT. An artifact extension for the state-only pipeline,
/// not an image metric.
pub fn state_vpt(pred: &[Vec<f64>], truth: &[Vec<f64>], epsilon: f64) -> Result<usize> {
    check_dim("vpt frames", truth.len(), pred.len())?;
    let errors = pred.iter().zip(truth).map(|(p, t)| state_mse(p, t)).collect::<Result<Vec<_>>>()?;
    Ok(vpt_from_errors(&errors, epsilon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VptResult {
    pub per_seq: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub epsilon: f64,
}

impl VptResult {
    pub fn from_counts(per_seq: Vec<usize>, epsilon: f64) -> Self {
        let n = per_seq.len().max(1) as f64;
        let mean = per_seq.iter().sum::<usize>() as f64 / n;
        let var = per_seq.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        Self {
            per_seq,
            mean,
            std: var.sqrt(),
            epsilon,
        }
    }
}

/// Metrics report written by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub system: String,
    pub epsilon: f64,
    pub vpt_mean: f64,
    pub vpt_std: f64,
    pub per_seq: Vec<usize>,
}

impl MetricsReport {
    pub fn new(system: &str, r: &VptResult) -> Self {
        Self {
            system: system.to_string(),
            epsilon: r.epsilon,
            vpt_mean: r.mean,
            vpt_std: r.std,
            per_seq: r.per_seq.clone(),
        }
    }
}

/// Rollout of `horizon` steps from frame 1 of `states`, with the velocity
/// estimated from frames 0..=2. Index `j` of the result predicts frame
/// `1 + j`.
pub fn predict<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    states: &[Vec<f64>],
    u: &[f64],
    horizon: usize,
    h: f64,
) -> Result<Trajectory> {
    if states.len() < 3 {
        return Err(Error::InvalidInput(format!("prediction needs 3 frames, got {}", states.len())));
    }
    let v = estimate_velocity(&sys.constraints, &states[..3], h)?;
    rollout(sys, &states[1], &v[0], u, horizon, h)
}

/// A full-length predicted sequence aligned with `states`: frames 0 and 1
/// are the observations the prediction starts from.
pub fn predicted_sequence<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    states: &[Vec<f64>],
    u: &[f64],
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let pred = predict(sys, states, u, states.len() - 2, h)?;
    let mut out = vec![states[0].clone()];
    out.extend(pred.states);
    Ok(out)
}

/// Image VPT over sequences: `ε` from all frames of `sequences`, then each
/// prediction is rendered and compared with the rendered observation.
pub fn image_vpt<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    links: &[(Anchor, usize)],
    frame: &WorldFrame,
    sequences: &[&Trajectory],
    h: f64,
) -> Result<VptResult> {
    let truth: Vec<Vec<Image>> = sequences
        .iter()
        .map(|s| render_sequence(links, &s.states, frame))
        .collect();
    let all: Vec<Image> = truth.iter().flatten().cloned().collect();
    let epsilon = epsilon_threshold(&all)?;
    let counts = sequences
        .par_iter()
        .zip(&truth)
        .map(|(s, t)| {
            let pred = predicted_sequence(sys, &s.states, &s.u, h)?;
            vpt(&render_sequence(links, &pred, frame), t, epsilon)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VptResult::from_counts(counts, epsilon))
}

/// State-space counterpart of [`image_vpt`].
pub fn state_space_vpt<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    sequences: &[&Trajectory],
    h: f64,
) -> Result<VptResult> {
    let all: Vec<Vec<f64>> = sequences.iter().flat_map(|s| s.states.iter().cloned()).collect();
    let epsilon = state_epsilon(&all)?;
    let counts = sequences
        .par_iter()
        .map(|s| state_vpt(&predicted_sequence(sys, &s.states, &s.u, h)?, &s.states, epsilon))
        .collect::<Result<Vec<_>>>()?;
    Ok(VptResult::from_counts(counts, epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub t: f64,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "T")]
    pub t_kin: f64,
    #[serde(rename = "E")]
    pub e: f64,
}

pub fn energy_trace<P: Potential, G: InputMatrix>(sys: &LagrangianSystem<P, G>, traj: &Trajectory) -> Result<Vec<EnergyRow>> {
    let vs = traj
        .velocities
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("energy trace needs velocities".into()))?;
    traj.states
        .iter()
        .zip(vs)
        .enumerate()
        .map(|(i, (x, v))| {
            let pot = sys.potential_energy(x)?;
            let kin = kinetic_energy(&sys.mass, v)?;
            Ok(EnergyRow {
                t: i as f64 * traj.h,
                v: pot,
                t_kin: kin,
                e: pot + kin,
            })
        })
        .collect()
}

/// The columns of `g(x)` at one keypoint: one force 2-vector per actuator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointForces {
    pub keypoint: usize,
    pub position: [f64; 2],
    pub forces: Vec<[f64; 2]>,
}

pub fn input_field<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    traj: &Trajectory,
) -> Result<Vec<Vec<KeypointForces>>> {
    traj.states
        .iter()
        .map(|x| {
            let g = sys.input_matrix(x)?;
            Ok((0..x.len() / 2)
                .map(|p| KeypointForces {
                    keypoint: p,
                    position: [x[2 * p], x[2 * p + 1]],
                    forces: (0..g.ncols()).map(|a| [g[(2 * p, a)], g[(2 * p + 1, a)]]).collect(),
                })
                .collect())
        })
        .collect()
}

/// CSV rows `frame,keypoint,x,y,actuator,fx,fy`.
pub fn input_field_csv(field: &[Vec<KeypointForces>]) -> String {
    let mut out = String::from("frame,keypoint,x,y,actuator,fx,fy\n");
    for (i, frame) in field.iter().enumerate() {
        for kp in frame {
            for (a, f) in kp.forces.iter().enumerate() {
                out.push_str(&format!(
                    "{i},{},{},{},{a},{},{}\n",
                    kp.keypoint,
                    crate::json::format_f64(kp.position[0]),
                    crate::json::format_f64(kp.position[1]),
                    crate::json::format_f64(f[0]),
                    crate::json::format_f64(f[1])
                ));
            }
        }
    }
    out
}

/// CSV rows `t,V,T,E`.
pub fn energy_trace_csv(rows: &[EnergyRow]) -> String {
    let mut out = String::from("t,V,T,E\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            crate::json::format_f64(r.t),
            crate::json::format_f64(r.v),
            crate::json::format_f64(r.t_kin),
            crate::json::format_f64(r.e)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::synth_render;
    use crate::nnmodels::DynamicsParams;
    use crate::systems::Benchmark;
    use crate::dynamics::LearnedSystem;
    use proptest::prelude::*;

    fn flat(v: f64, n: usize) -> Image {
        Image::filled(2, n / 2, v)
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon_threshold(&[flat(0.3, 8), flat(0.3, 8)]).unwrap(), 0.0);
        assert_eq!(epsilon_threshold(&[flat(0.0, 8), flat(1.0, 8)]).unwrap(), 0.25);
        assert!(epsilon_threshold(&[]).is_err());
    }

    #[test]
    fn vpt_examples() {
        let seq: Vec<Image> = (0..50).map(|i| flat(i as f64 / 50.0, 4)).collect();
        assert_eq!(vpt(&seq, &seq, 0.0).unwrap(), 50);
        let off: Vec<Image> = seq.iter().map(|f| flat(f.data[0] + 0.5, 4)).collect();
        assert_eq!(vpt(&off, &seq, 0.1).unwrap(), 0);
        // Errors of 0.01 before frame 7, 0.09 from frame 7 on.
        let late: Vec<Image> = seq
            .iter()
            .enumerate()
            .map(|(i, f)| flat(f.data[0] + if i < 7 { 0.1 } else { 0.3 }, 4))
            .collect();
        assert_eq!(vpt(&late, &seq, 0.05).unwrap(), 7);
        assert!(vpt(&late[..3], &seq, 0.05).is_err());
    }

    proptest! {
        #[test]
        fn vpt_is_monotone_in_epsilon(errs in proptest::collection::vec(0.0f64..1.0, 1..60), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(vpt_from_errors(&errs, lo) <= vpt_from_errors(&errs, hi));
        }

        #[test]
        fn epsilon_ignores_frame_order(vals in proptest::collection::vec(0.0f64..1.0, 2..12), rot in 0usize..12) {
            let frames: Vec<Image> = vals.iter().map(|&v| Image { height: 1, width: 2, data: vec![v, 1.0 - v * v] }).collect();
            let mut rotated = frames.clone();
            rotated.rotate_left(rot % frames.len());
            let a = epsilon_threshold(&frames).unwrap();
            let b = epsilon_threshold(&rotated).unwrap();
            prop_assert!((a - b).abs() <= 1e-15 * a.max(1.0));
        }
    }

    #[test]
    fn vpt_result_statistics() {
        let r = VptResult::from_counts(vec![50, 40, 30], 0.1);
        assert_eq!(r.mean, 40.0);
        assert!((r.std - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pendulum_rotation_energy_shape() {
        // Full rotation at high speed: V peaks upright and bottoms out below.
        let b = Benchmark::pendulum();
        let sys = b.analytic_system(0);
        let x0 = b.from_generalized(&[0.0]).unwrap();
        let traj = rollout(&sys, &x0, &[8.0, 0.0], &[], 60, 0.02).unwrap();
        let rows = energy_trace(&sys, &traj).unwrap();
        let (imax, _) = rows.iter().enumerate().max_by(|a, b| a.1.v.total_cmp(&b.1.v)).unwrap();
        assert!(traj.states[imax][1] > 0.99);
        assert!(rows[0].v.abs() < 1e-12);
        let e0 = rows[0].e;
        let dev = rows.iter().map(|r| (r.e - e0).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-4 * e0, "{dev} vs {e0}");
        assert!(energy_trace(&sys, &traj.positions_only()).is_err());
    }

    #[test]
    fn cart_translation_barely_changes_potential() {
        let b = Benchmark::cartpole();
        let sys = b.analytic_system(2);
        let traj = Trajectory {
            states: (0..20).map(|i| b.from_generalized(&[-0.5 + 0.05 * i as f64, 0.0]).unwrap()).collect(),
            velocities: Some(vec![vec![0.05 / 0.02, 0.0, 0.05 / 0.02, 0.0]; 20]),
            u: vec![0.0, 0.0],
            h: 0.02,
        };
        let rows = energy_trace(&sys, &traj).unwrap();
        let spread = rows.iter().map(|r| r.v).fold(f64::NEG_INFINITY, f64::max) - rows.iter().map(|r| r.v).fold(f64::INFINITY, f64::min);
        let pole_range = sys.potential_energy(&b.upright()).unwrap() - sys.potential_energy(&b.reference_state).unwrap();
        assert!(spread <= 0.01 * pole_range);
    }

    #[test]
    fn input_field_examples() {
        let b = Benchmark::pendulum();
        let sys = b.analytic_system(1);
        let traj = rollout(&sys, &b.from_generalized(&[1.0]).unwrap(), &[0.0, 0.0], &[0.5], 30, 0.02).unwrap();
        let field = input_field(&sys, &traj).unwrap();
        for frame in &field {
            assert_eq!(frame.len(), 1);
            let kp = &frame[0];
            let f = kp.forces[0];
            let cos = (f[0] * kp.position[0] + f[1] * kp.position[1])
                / ((f[0].hypot(f[1])) * kp.position[0].hypot(kp.position[1]));
            assert!(cos.abs() <= 1e-8);
        }
        let cp = Benchmark::cartpole();
        let csys = cp.analytic_system(2);
        let field = input_field(&csys, &Trajectory { states: vec![cp.reference_state.clone()], velocities: None, u: vec![], h: 0.02 }).unwrap();
        assert_eq!((field[0].len(), field[0][0].forces.len()), (2, 2));

        let params = DynamicsParams::init(2, 1, 0);
        let mut zeroed = params.clone();
        zeroed.input_model.as_mut().unwrap().as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        let learned = LearnedSystem::learned(b.constraints.clone(), &zeroed).unwrap();
        let field = input_field(&learned, &traj).unwrap();
        assert!(field.iter().flatten().all(|k| k.forces.iter().all(|f| f == &[0.0, 0.0])));
        assert!(input_field_csv(&field).starts_with("frame,keypoint,x,y,actuator,fx,fy\n0,0,"));
    }

    #[test]
    fn ground_truth_predictions_stay_valid() {
        let b = Benchmark::pendulum();
        let sys = b.analytic_system(0);
        let data = crate::learn::generate_dataset(
            &b,
            &crate::learn::DataConfig {
                num_sequences: 10,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let seqs: Vec<&Trajectory> = data.sequences.iter().collect();
        let r = image_vpt(&sys, &b.links, &WorldFrame::default(), &seqs, 0.02).unwrap();
        assert!(r.epsilon > 0.0);
        assert!(r.per_seq.iter().filter(|&&v| v == 50).count() >= 9, "{:?}", r.per_seq);
        let s = state_space_vpt(&sys, &seqs, 0.02).unwrap();
        assert!(s.per_seq.iter().all(|&v| v == 50));
        // Identical rendering of identical predictions.
        let img = synth_render(&b.links, &seqs[0].states[0], &WorldFrame::default());
        assert_eq!(img.mse(&img).unwrap(), 0.0);
    }
}
