//! Datasets, velocity estimation, losses and the training loop.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::LearnedModel;
use crate::constraints::ConstraintSet;
use crate::dynamics::{InputMatrix, LagrangianSystem, Potential};
use crate::error::{check_dim, Error, Result};
use crate::integrate::{self, multi_start_rollouts, RolloutConfig, Trajectory, TrajectoryMeta};
use crate::json;
use crate::keypoints::{HeatmapStack, Image};
use crate::nnmodels::DynamicsParams;
use crate::rng::stream;
use crate::systems::Benchmark;

// ---------------------------------------------------------------------------
// Data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_sequences: usize,
    pub frames: usize,
    pub h: f64,
    pub val_fraction: f64,
    pub zero_u_fraction: f64,
    /// Inputs are drawn uniformly from `[−input_limit, input_limit]`.
    pub input_limit: f64,
    /// Number of actuators driven, a prefix of the system's actuator list.
    pub actuators: usize,
    /// Integrator substeps per stored frame.
    pub substeps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_sequences: 500,
            frames: 50,
            h: integrate::DEFAULT_H,
            val_fraction: 0.1,
            zero_u_fraction: 0.2,
            input_limit: 1.0,
            actuators: 0,
            substeps: 10,
        }
    }
}

impl DataConfig {
    pub fn num_validation(&self) -> usize {
        (self.val_fraction * self.num_sequences as f64).round() as usize
    }

    pub fn num_zero_u(&self) -> usize {
        (self.zero_u_fraction * self.num_sequences as f64).round() as usize
    }

    fn validate(&self, bench: &Benchmark) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.num_sequences == 0 || self.frames < 3 {
            return bad(format!("need sequences and at least 3 frames, got {} × {}", self.num_sequences, self.frames));
        }
        if !(self.h > 0.0) || self.substeps == 0 {
            return bad("timestep and substeps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.zero_u_fraction) {
            return bad("fractions must lie in [0, 1)".into());
        }
        if !(self.input_limit >= 0.0) {
            return bad(format!("input limit must be non-negative, got {}", self.input_limit));
        }
        if self.actuators > bench.actuators.len() {
            return bad(format!(
                "{} has {} actuators, {} requested",
                bench.name(),
                bench.actuators.len(),
                self.actuators
            ));
        }
        Ok(())
    }
}

/// Observed state sequences with a train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: String,
    pub seed: u64,
    pub sequences: Vec<Trajectory>,
    /// Sorted validation indices.
    pub validation: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    validation: Vec<usize>,
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.sequences.len())
            .filter(|i| self.validation.binary_search(i).is_err())
            .collect()
    }

    pub fn h(&self) -> f64 {
        self.sequences.first().map_or(integrate::DEFAULT_H, |s| s.h)
    }

    pub fn seq_file_name(idx: usize) -> String {
        format!("seq_{idx:04}.csv")
    }

    /// Writes `seq_<idx>.csv` (with sidecars) and `split.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, seq) in self.sequences.iter().enumerate() {
            let meta = TrajectoryMeta {
                system: self.system.clone(),
                h: seq.h,
                seed: self.seed,
                on_manifold: true,
            };
            integrate::write_trajectory(&dir.join(Self::seq_file_name(i)), seq, &meta)?;
        }
        let split = dir.join("split.json");
        let body = json::to_string_pretty(&SplitFile {
            validation: self.validation.clone(),
        })?;
        fs::write(&split, body).map_err(|e| Error::io(split, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let split = dir.join("split.json");
        let text = fs::read_to_string(&split).map_err(|e| Error::io(&split, e))?;
        let SplitFile { mut validation } = serde_json::from_str(&text)?;
        validation.sort_unstable();
        let mut sequences = Vec::new();
        let mut meta = None;
        loop {
            let path = dir.join(Self::seq_file_name(sequences.len()));
            if !path.exists() {
                break;
            }
            let (traj, m) = integrate::read_trajectory(&path)?;
            if meta.is_none() {
                meta = m;
            }
            sequences.push(traj);
        }
        if sequences.is_empty() {
            return Err(Error::InvalidInput(format!("no sequences in {}", dir.display())));
        }
        if let Some(&bad) = validation.iter().find(|&&i| i >= sequences.len()) {
            return Err(Error::Format(format!("split lists sequence {bad} beyond {}", sequences.len())));
        }
        let meta = meta.ok_or_else(|| Error::Format(format!("{}: missing sequence metadata", dir.display())))?;
        Ok(Self {
            system: meta.system,
            seed: meta.seed,
            sequences,
            validation,
        })
    }
}

/// First `count` entries of a seeded permutation of `0..n`, sorted.
fn seeded_subset(n: usize, count: usize, seed: u64, label: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, label, 0));
    let mut out = idx[..count].to_vec();
    out.sort_unstable();
    out
}

/// Simulates the ground-truth system from random initial states under
/// constant random inputs.
pub fn generate_dataset(bench: &Benchmark, cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate(bench)?;
    let n = cfg.num_sequences;
    let validation = seeded_subset(n, cfg.num_validation(), seed, "validation");
    let zero_u = seeded_subset(n, cfg.num_zero_u(), seed, "zero_u");
    let sys = bench.analytic_system(cfg.actuators);
    let fine = cfg.h / cfg.substeps as f64;
    let sequences = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "sequence", i as u64);
            let (x0, v0) = bench.sample_state(&mut rng);
            let u: Vec<f64> = if zero_u.binary_search(&i).is_ok() {
                vec![0.0; cfg.actuators]
            } else {
                (0..cfg.actuators)
                    .map(|_| rng.random_range(-cfg.input_limit..=cfg.input_limit))
                    .collect()
            };
            let dense = integrate::rollout(&sys, &x0, &v0, &u, (cfg.frames - 1) * cfg.substeps, fine)?;
            Ok(Trajectory {
                states: dense.states.into_iter().step_by(cfg.substeps).collect(),
                velocities: None,
                u,
                h: cfg.h,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        system: bench.name().to_string(),
        seed,
        sequences,
        validation,
    })
}

// ---------------------------------------------------------------------------
// Velocities and losses

/// Projected central differences for frames `1 ..= n − 2`.
pub fn estimate_velocity(c: &ConstraintSet, states: &[Vec<f64>], h: f64) -> Result<Vec<Vec<f64>>> {
    let n = states.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("velocity estimation needs 3 frames, got {n}")));
    }
    (1..n - 1)
        .map(|i| {
            check_dim("state", c.k(), states[i].len())?;
            let raw: Vec<f64> = states[i + 1]
                .iter()
                .zip(&states[i - 1])
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            Ok(c.project_tangent(&states[i], &raw)?.as_slice().to_vec())
        })
        .collect()
}

/// Sum of squared errors of every overlapping ν-step prediction.
pub fn dynamics_loss<P: Potential, G: InputMatrix>(
    sys: &LagrangianSystem<P, G>,
    states: &[Vec<f64>],
    u: &[f64],
    cfg: &RolloutConfig,
) -> Result<f64> {
    let vel = estimate_velocity(&sys.constraints, states, cfg.h)?;
    let preds = multi_start_rollouts(sys, states, &vel, u, cfg)?;
    Ok(preds
        .iter()
        .map(|s| {
            s.predictions
                .iter()
                .enumerate()
                .map(|(j, x)| sq_dist(x, &states[s.start + 1 + j]))
                .sum::<f64>()
        })
        .sum())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Sum of squared pixel differences over a sequence of images.
pub fn recon_loss(pred: &[Image], target: &[Image]) -> Result<f64> {
    check_dim("reconstruction frames", target.len(), pred.len())?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        check_dim("reconstruction pixels", t.data.len(), p.data.len())?;
        total += sq_dist(&p.data, &t.data);
    }
    Ok(total)
}

/// Mean binary cross-entropy between logistic-squashed scores `s` and blob
/// targets.
pub fn encoder_loss(s: &HeatmapStack, s_blob: &HeatmapStack) -> Result<f64> {
    check_dim("encoder heatmaps", s_blob.data.len(), s.data.len())?;
    if s.data.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = s
        .data
        .iter()
        .zip(&s_blob.data)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / s.data.len() as f64)
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_d: f64,
    pub rollout: RolloutConfig,
    /// Seed of the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 3e-4,
            lambda_d: 1.0,
            rollout: RolloutConfig::default(),
            seed: 0,
        }
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DynamicsParams,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(params: DynamicsParams, lr: f64) -> Self {
        let adam = Adam::new(params.param_count(), lr);
        Self { params, adam, epoch: 0 }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sequence dynamics loss over the epoch's batches.
    #[serde(rename = "train_Ld")]
    pub train_ld: f64,
    /// Mean per-sequence dynamics loss on the validation split after the
    /// epoch.
    #[serde(rename = "val_Ld")]
    pub val_ld: f64,
    pub wall_ms: u64,
}

/// A sequence with its velocity estimates, ready for the loss.
pub struct Prepared {
    pub states: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub u: Vec<f64>,
}

pub fn prepare(c: &ConstraintSet, seqs: &[&Trajectory], h: f64) -> Result<Vec<Prepared>> {
    seqs.iter()
        .map(|t| {
            Ok(Prepared {
                states: t.states.clone(),
                velocities: estimate_velocity(c, &t.states, h)?,
                u: t.u.clone(),
            })
        })
        .collect()
}

/// Mean per-sequence dynamics loss of `params` on prepared sequences.
pub fn mean_loss(c: &ConstraintSet, params: &DynamicsParams, seqs: &[Prepared], cfg: &RolloutConfig) -> Result<f64> {
    if seqs.is_empty() {
        return Ok(0.0);
    }
    let sys = crate::dynamics::LearnedSystem::learned(c.clone(), params)?;
    let losses = seqs
        .par_iter()
        .map(|s| {
            let preds = multi_start_rollouts(&sys, &s.states, &s.velocities, &s.u, cfg)?;
            Ok(preds
                .iter()
                .map(|p| {
                    p.predictions
                        .iter()
                        .enumerate()
                        .map(|(j, x)| sq_dist(x, &s.states[p.start + 1 + j]))
                        .sum::<f64>()
                })
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / seqs.len() as f64)
}

/// Batch loss `λ · mean L_d` and its gradient. Per-sequence gradients are
/// summed in batch order.
pub fn batch_loss_grad(
    c: &ConstraintSet,
    params: &DynamicsParams,
    batch: &[&Prepared],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let model = LearnedModel::new(c, params)?;
    let n = params.param_count();
    let parts = batch
        .par_iter()
        .map(|s| {
            let mut g = vec![0.0; n];
            let l = model.dynamics_loss_grad(&s.states, &s.velocities, &s.u, &cfg.rollout, &mut g)?;
            Ok((l, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = cfg.lambda_d / batch.len() as f64;
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    for g in &mut grad {
        *g *= scale;
    }
    Ok((loss / batch.len() as f64, grad))
}

/// Adam on `λ L_d` over shuffled training batches. `on_epoch` sees every
/// log record and the state after that epoch; returning an error stops
/// training.
pub fn train<F>(
    data: &Dataset,
    c: &ConstraintSet,
    mut state: TrainState,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(TrainState, Vec<EpochLog>)>
where
    F: FnMut(&EpochLog, &TrainState) -> Result<()>,
{
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.lambda_d > 0.0) {
        return Err(Error::InvalidInput("batch size, learning rate and λ must be positive".into()));
    }
    check_dim("dynamics parameters", c.k(), state.params.k())?;
    let h = cfg.rollout.h;
    let train_idx = data.train_indices();
    if train_idx.is_empty() {
        return Err(Error::InvalidInput("dataset has no training sequences".into()));
    }
    let train_set = prepare(c, &train_idx.iter().map(|&i| &data.sequences[i]).collect::<Vec<_>>(), h)?;
    let val_set = prepare(c, &data.validation.iter().map(|&i| &data.sequences[i]).collect::<Vec<_>>(), h)?;
    state.adam.lr = cfg.lr;

    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let started = Instant::now();
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));

        let mut flat = state.params.flatten();
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let abort = |detail: String| Error::NonFiniteLoss {
                epoch,
                batch: b,
                detail: format!("{detail}; sequences {:?}", chunk.iter().map(|&i| train_idx[i]).collect::<Vec<_>>()),
            };
            let (loss, grad) = match batch_loss_grad(c, &state.params, &batch, cfg) {
                Ok(r) => r,
                Err(Error::Integration { x, v }) => return Err(abort(format!("integration failed at x = {x:?}, v = {v:?}"))),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(abort(format!("loss = {loss}")));
            }
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(abort(format!("gradient entry {i} = {}", grad[i])));
            }
            loss_sum += loss * batch.len() as f64;
            state.adam.step(&mut flat, &grad);
            state.params = state.params.from_flat(&flat)?;
        }
        state.epoch = epoch;
        let val_ld = mean_loss(c, &state.params, &val_set, &cfg.rollout).map_err(|e| match e {
            Error::Integration { x, v } => Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                detail: format!("validation rollout failed at x = {x:?}, v = {v:?}"),
            },
            e => e,
        })?;
        let record = EpochLog {
            epoch,
            train_ld: loss_sum / train_set.len() as f64,
            val_ld,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!("epoch {epoch}: train {:.6e} val {:.6e}", record.train_ld, record.val_ld);
        on_epoch(&record, &state)?;
        log.push(record);
    }
    Ok((state, log))
}
