//! Run configuration: one JSON document, overridable from the command line.

use std::path::{Path, PathBuf};

use lagkit::keypoints::{WorldFrame, DEFAULT_EXTENT, DEFAULT_GRID, DEFAULT_SIGMA};
use lagkit::learn::DataConfig;
use lagkit::systems::{Actuator, Benchmark, GRAVITY};
use lagkit::{ConstraintKind, ConstraintRow, ConstraintSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemSpec {
    Pendulum,
    Cartpole,
    Acrobot,
    Custom(CustomSystem),
}

/// A user-described rigid set. Nominal constraint values are read off
/// `reference_state`, which therefore lies on the manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSystem {
    pub constraints: Vec<ConstraintRow>,
    pub masses: Vec<f64>,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default)]
    pub actuators: Vec<Actuator>,
    pub reference_state: Vec<f64>,
}

fn default_gravity() -> f64 {
    GRAVITY
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            kp: lagkit::control::DEFAULT_KP,
            kd: lagkit::control::DEFAULT_KD,
        }
    }
}

/// Dataset settings other than the timestep and actuator count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub num_sequences: usize,
    pub frames: usize,
    pub val_fraction: f64,
    pub zero_u_fraction: f64,
    pub input_limit: f64,
    pub substeps: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        let d = DataConfig::default();
        Self {
            num_sequences: d.num_sequences,
            frames: d.frames,
            val_fraction: d.val_fraction,
            zero_u_fraction: d.zero_u_fraction,
            input_limit: d.input_limit,
            substeps: d.substeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    /// Learned parameters, or the literal `analytic` for the ground truth.
    pub params_file: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            params_file: "params.json".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: SystemSpec,
    /// Replaces the system's actuator list when present.
    pub actuation: Option<Vec<Actuator>>,
    /// Actuators in use: a prefix of the actuator list.
    pub actuators: usize,
    pub h: f64,
    pub nu: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_d: f64,
    pub sigma: f64,
    /// Noise on the log-blob scores of the emulated keypoint estimator.
    pub observe_noise: f64,
    pub seed: u64,
    /// Image height and width.
    pub grid: [usize; 2],
    /// World rectangle covered by the image; a per-system default if absent.
    pub world: Option<Bounds>,
    pub gains: Gains,
    pub data: DataSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = lagkit::learn::TrainConfig::default();
        Self {
            system: SystemSpec::Pendulum,
            actuation: None,
            actuators: 0,
            h: train.rollout.h,
            nu: train.rollout.nu,
            epochs: train.epochs,
            batch: train.batch_size,
            lr: train.lr,
            lambda_d: train.lambda_d,
            sigma: DEFAULT_SIGMA,
            observe_noise: 0.0,
            seed: 0,
            grid: [DEFAULT_GRID, DEFAULT_GRID],
            world: None,
            gains: Gains::default(),
            data: DataSettings::default(),
            paths: Paths::default(),
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{field}`: {msg}"))
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field_err(field, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        positive("h", self.h)?;
        positive("lr", self.lr)?;
        positive("lambda_d", self.lambda_d)?;
        positive("sigma", self.sigma)?;
        positive("gains.kp", self.gains.kp)?;
        if !(self.gains.kd >= 0.0) {
            return Err(field_err("gains.kd", format!("must be non-negative, got {}", self.gains.kd)));
        }
        if !(self.observe_noise >= 0.0) {
            return Err(field_err("observe_noise", format!("must be non-negative, got {}", self.observe_noise)));
        }
        for (name, v) in [("nu", self.nu), ("epochs", self.epochs), ("batch", self.batch)] {
            if v == 0 {
                return Err(field_err(name, "must be positive"));
            }
        }
        if self.grid.contains(&0) {
            return Err(field_err("grid", format!("must be positive, got {:?}", self.grid)));
        }
        if let Some(b) = self.world {
            if !(b.x_min < b.x_max && b.y_min < b.y_max) {
                return Err(field_err("world", "needs x_min < x_max and y_min < y_max"));
            }
        }
        let d = &self.data;
        if d.num_sequences == 0 {
            return Err(field_err("data.num_sequences", "must be positive"));
        }
        if d.frames < self.nu + 2 {
            return Err(field_err(
                "data.frames",
                format!("must be at least nu + 2 = {}, got {}", self.nu + 2, d.frames),
            ));
        }
        if d.substeps == 0 {
            return Err(field_err("data.substeps", "must be positive"));
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(field_err("data.val_fraction", format!("must lie in [0, 1), got {}", d.val_fraction)));
        }
        if !(0.0..=1.0).contains(&d.zero_u_fraction) {
            return Err(field_err(
                "data.zero_u_fraction",
                format!("must lie in [0, 1], got {}", d.zero_u_fraction),
            ));
        }
        if !(d.input_limit >= 0.0) {
            return Err(field_err("data.input_limit", format!("must be non-negative, got {}", d.input_limit)));
        }
        let bench = self.benchmark()?;
        if self.actuators > bench.actuators.len() {
            return Err(field_err(
                "actuators",
                format!("{} has {} actuators, {} requested", bench.name(), bench.actuators.len(), self.actuators),
            ));
        }
        Ok(())
    }

    pub fn system_name(&self) -> &'static str {
        match self.system {
            SystemSpec::Pendulum => "pendulum",
            SystemSpec::Cartpole => "cartpole",
            SystemSpec::Acrobot => "acrobot",
            SystemSpec::Custom(_) => "custom",
        }
    }

    pub fn benchmark(&self) -> Result<Benchmark, CliError> {
        let mut b = match &self.system {
            SystemSpec::Pendulum => Benchmark::pendulum(),
            SystemSpec::Cartpole => Benchmark::cartpole(),
            SystemSpec::Acrobot => Benchmark::acrobot(),
            SystemSpec::Custom(c) => custom_benchmark(c)?,
        };
        if let Some(list) = &self.actuation {
            let keypoints = b.constraints.num_keypoints();
            if let Some(bad) = list.iter().find(|a| !actuator_in_range(a, keypoints)) {
                return Err(field_err("actuation", format!("actuator `{}` references a missing keypoint", bad.name)));
            }
            b.actuators = list.clone();
        }
        Ok(b)
    }

    pub fn world_frame(&self) -> Result<WorldFrame, CliError> {
        let [height, width] = self.grid;
        let b = match self.world {
            Some(b) => b,
            None => match &self.system {
                SystemSpec::Cartpole => Bounds { x_min: -2.4, x_max: 2.4, y_min: -1.2, y_max: 1.2 },
                SystemSpec::Custom(c) => {
                    let r = c.reference_state.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let e = DEFAULT_EXTENT.max(1.5 * r);
                    Bounds { x_min: -e, x_max: e, y_min: -e, y_max: e }
                }
                _ => Bounds {
                    x_min: -DEFAULT_EXTENT,
                    x_max: DEFAULT_EXTENT,
                    y_min: -DEFAULT_EXTENT,
                    y_max: DEFAULT_EXTENT,
                },
            },
        };
        let frame = WorldFrame {
            height,
            width,
            x_min: b.x_min,
            x_max: b.x_max,
            y_min: b.y_min,
            y_max: b.y_max,
        };
        frame.validate().map_err(|e| field_err("world", e))?;
        Ok(frame)
    }

    pub fn data_config(&self) -> DataConfig {
        let d = &self.data;
        DataConfig {
            num_sequences: d.num_sequences,
            frames: d.frames,
            h: self.h,
            val_fraction: d.val_fraction,
            zero_u_fraction: d.zero_u_fraction,
            input_limit: d.input_limit,
            actuators: self.actuators,
            substeps: d.substeps,
        }
    }

    pub fn train_config(&self) -> Result<lagkit::learn::TrainConfig, CliError> {
        Ok(lagkit::learn::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            lambda_d: self.lambda_d,
            rollout: lagkit::RolloutConfig::new(self.h, self.nu).map_err(|e| field_err("nu", e))?,
            seed: self.seed,
        })
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.data_dir.join(self.system_name())
    }
}

fn actuator_in_range(a: &Actuator, keypoints: usize) -> bool {
    use lagkit::systems::{ActuatorTerm, Anchor};
    a.terms.iter().all(|t| match *t {
        ActuatorTerm::Force { keypoint, .. } => keypoint < keypoints,
        ActuatorTerm::Torque { anchor, keypoint, .. } => {
            keypoint < keypoints && !matches!(anchor, Anchor::Keypoint(j) if j >= keypoints)
        }
    })
}

fn custom_benchmark(c: &CustomSystem) -> Result<Benchmark, CliError> {
    let x = &c.reference_state;
    let k = x.len();
    let keypoints = k / 2;
    let pt = |i: usize| -> Result<[f64; 2], CliError> {
        if i < keypoints {
            Ok([x[2 * i], x[2 * i + 1]])
        } else {
            Err(field_err("system.custom.constraints", format!("keypoint {i} beyond {keypoints}")))
        }
    };
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let nominal = c
        .constraints
        .iter()
        .map(|row| match *row {
            ConstraintRow::Distance { i, j } => Ok(dist(pt(i)?, pt(j)?)),
            ConstraintRow::Anchor { i, anchor } => Ok(dist(pt(i)?, anchor)),
            ConstraintRow::Coordinate { i, axis } if axis < 2 => Ok(pt(i)?[axis]),
            ConstraintRow::Coordinate { axis, .. } => Err(field_err("system.custom.constraints", format!("axis {axis} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let set = ConstraintSet::new(k, c.constraints.clone(), nominal, ConstraintKind::RigidSet)
        .map_err(|e| field_err("system.custom.constraints", e))?;
    if let Some(bad) = c.actuators.iter().find(|a| !actuator_in_range(a, keypoints)) {
        return Err(field_err(
            "system.custom.actuators",
            format!("actuator `{}` references a missing keypoint", bad.name),
        ));
    }
    Benchmark::custom(set, c.masses.clone(), c.gravity, c.actuators.clone(), x.clone())
        .map_err(|e| field_err("system.custom", e))
}
