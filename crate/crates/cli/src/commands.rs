use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lagkit::control::{closed_loop, ClosedLoop, ControlGains};
use lagkit::eval::{self, MetricsReport};
use lagkit::integrate::{trajectory_csv, write_trajectory, ExtraColumns, TrajectoryMeta};
use lagkit::keypoints::{
    frame_file_name, gaussian_blobs, heatmap_images, locate_discs, read_pgm, render_sequence, synth_observe, write_pgm,
};
use lagkit::learn::{self, Adam, Dataset, EpochLog, TrainState};
use lagkit::systems::{project_to_manifold, ActuatorInput, Benchmark, GravityPotential};
use lagkit::{json, DynamicsParams, Error, LagrangianSystem, LearnedSystem, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, CliError};

/// Literal params path selecting the ground-truth model.
pub const ANALYTIC: &str = "analytic";

/// Written beside the outputs of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub outputs: Vec<PathBuf>,
}

/// Optimizer state stored beside a params file so training can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_hash: String,
    pub epoch: usize,
    pub adam: Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub config_hash: String,
    pub image: MetricsReport,
    pub state_space: MetricsReport,
}

pub fn checkpoint_path(params: &Path) -> PathBuf {
    params.with_extension("ckpt.json")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn write_manifest(dir: &Path, name: &str, command: &str, cfg: &RunConfig, outputs: Vec<PathBuf>) -> Result<(), CliError> {
    let m = Manifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        outputs,
    };
    write_file(&dir.join(name), json::to_string_pretty(&m)?)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = cfg.dataset_dir();
    if !dir.join("split.json").exists() {
        return Err(CliError::Other(format!("no dataset in {}; run gen-data first", dir.display())));
    }
    let data = Dataset::load(&dir)?;
    if (data.h() - cfg.h).abs() > 1e-12 * cfg.h {
        return Err(CliError::Config(format!(
            "field `h`: dataset in {} was generated with h = {}, config has {}",
            dir.display(),
            data.h(),
            cfg.h
        )));
    }
    Ok(data)
}

enum Model {
    Analytic(LagrangianSystem<GravityPotential, ActuatorInput>),
    Learned(DynamicsParams),
}

fn load_model(cfg: &RunConfig, bench: &Benchmark) -> Result<Model, CliError> {
    let path = &cfg.paths.params_file;
    if path.as_os_str() == ANALYTIC {
        return Ok(Model::Analytic(bench.analytic_system(cfg.actuators)));
    }
    if !path.exists() {
        return Err(CliError::Other(format!("no parameters at {}; run train first", path.display())));
    }
    let params = DynamicsParams::load(path)?;
    if params.k() != bench.k() {
        return Err(CliError::Config(format!(
            "parameters in {} are for state dimension {}, {} has {}",
            path.display(),
            params.k(),
            bench.name(),
            bench.k()
        )));
    }
    Ok(Model::Learned(params))
}

/// Binds `$sys` to a `&LagrangianSystem` of either model kind.
macro_rules! with_system {
    ($model:expr, $bench:expr, |$sys:ident| $body:expr) => {
        match $model {
            Model::Analytic(s) => {
                let $sys = s;
                $body
            }
            Model::Learned(p) => {
                let owned = LearnedSystem::learned($bench.constraints.clone(), p)?;
                let $sys = &owned;
                $body
            }
        }
    };
}

pub fn gen_data(cfg: &RunConfig) -> Result<String, CliError> {
    let bench = cfg.benchmark()?;
    let data = learn::generate_dataset(&bench, &cfg.data_config(), cfg.seed)?;
    let dir = cfg.dataset_dir();
    data.save(&dir)?;
    let mut outputs: Vec<PathBuf> = (0..data.sequences.len()).map(|i| Dataset::seq_file_name(i).into()).collect();
    outputs.push("split.json".into());
    write_manifest(&dir, "manifest.json", "gen-data", cfg, outputs)?;
    Ok(format!(
        "wrote {} sequences ({} validation) to {}",
        data.sequences.len(),
        data.validation.len(),
        dir.display()
    ))
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<String, CliError> {
    let bench = cfg.benchmark()?;
    let data = load_dataset(cfg)?;
    let tc = cfg.train_config()?;
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let params_path = cfg.paths.params_file.clone();
    if params_path.as_os_str() == ANALYTIC {
        return Err(CliError::Config("field `paths.params_file`: training needs a file path".into()));
    }
    if let Some(dir) = params_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let ckpt_path = checkpoint_path(&params_path);
    let log_path = out.join("train_log.jsonl");

    let state = match resume {
        Some(from) => {
            let params = DynamicsParams::load(from)?;
            let ckpt_file = checkpoint_path(from);
            let text = fs::read_to_string(&ckpt_file).map_err(|e| io_err(&ckpt_file, e))?;
            let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", ckpt_file.display())))?;
            TrainState {
                params,
                adam: ckpt.adam,
                epoch: ckpt.epoch,
            }
        }
        None => TrainState::fresh(DynamicsParams::init(bench.k(), cfg.actuators, cfg.seed), cfg.lr),
    };
    if state.params.l() != data.sequences[0].u.len() {
        return Err(CliError::Config(format!(
            "field `actuators`: model has {} inputs, dataset has {}",
            state.params.l(),
            data.sequences[0].u.len()
        )));
    }

    let mut log = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        fs::File::create(&log_path)
    }
    .map_err(|e| io_err(&log_path, e))?;
    let mut append = |rec: &EpochLog| -> lagkit::Result<()> {
        writeln!(log, "{}", json::to_string_line(rec)?).map_err(|e| Error::Format(format!("{}: {e}", log_path.display())))
    };

    if resume.is_none() {
        let started = Instant::now();
        let seqs = |idx: &[usize]| idx.iter().map(|&i| &data.sequences[i]).collect::<Vec<&Trajectory>>();
        let train_set = learn::prepare(&bench.constraints, &seqs(&data.train_indices()), cfg.h)?;
        let val_set = learn::prepare(&bench.constraints, &seqs(&data.validation), cfg.h)?;
        append(&EpochLog {
            epoch: 0,
            train_ld: learn::mean_loss(&bench.constraints, &state.params, &train_set, &tc.rollout)?,
            val_ld: learn::mean_loss(&bench.constraints, &state.params, &val_set, &tc.rollout)?,
            wall_ms: started.elapsed().as_millis() as u64,
        })?;
    }

    let hash = cfg.hash();
    let (state, records) = learn::train(&data, &bench.constraints, state, &tc, |rec, st| {
        append(rec)?;
        st.params.save(&params_path)?;
        let ckpt = Checkpoint {
            config_hash: hash.clone(),
            epoch: st.epoch,
            adam: st.adam.clone(),
        };
        fs::write(&ckpt_path, json::to_string_pretty(&ckpt)?).map_err(|e| Error::Format(format!("{}: {e}", ckpt_path.display())))
    })?;
    if records.is_empty() {
        state.params.save(&params_path)?;
    }
    write_manifest(out, "manifest_train.json", "train", cfg, vec![params_path.clone(), ckpt_path, log_path])?;
    Ok(match records.last() {
        Some(r) => format!("epoch {} val_Ld {:.6e}; parameters in {}", r.epoch, r.val_ld, params_path.display()),
        None => format!("already trained for {} epochs", state.epoch),
    })
}

#[derive(Serialize)]
struct PredictSummary {
    sequence: usize,
    horizon: usize,
    /// Largest state error over predicted frames that have an observation.
    max_error: Option<f64>,
    final_error: Option<f64>,
}

pub fn predict(cfg: &RunConfig, sequence: Option<usize>, horizon: usize, render: bool) -> Result<String, CliError> {
    let bench = cfg.benchmark()?;
    let data = load_dataset(cfg)?;
    let model = load_model(cfg, &bench)?;
    let seq = sequence.unwrap_or_else(|| data.validation.first().copied().unwrap_or(0));
    let obs = data
        .sequences
        .get(seq)
        .ok_or_else(|| CliError::Config(format!("sequence {seq} not in dataset of {}", data.sequences.len())))?;
    if obs.len() < 3 {
        return Err(CliError::Core(Error::InvalidInput(format!("sequence {seq} has {} frames, prediction needs 3", obs.len()))));
    }
    let pred = with_system!(&model, bench, |sys| eval::predict(sys, &obs.states, &obs.u, horizon, cfg.h)?);

    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let csv = out.join(format!("predict_{seq:04}.csv"));
    let meta = TrajectoryMeta {
        system: cfg.system_name().into(),
        h: cfg.h,
        seed: cfg.seed,
        on_manifold: false,
    };
    write_trajectory(&csv, &pred, &meta)?;
    let mut outputs = vec![csv.clone(), csv.with_extension("json")];
    if render {
        let frames_dir = out.join("frames");
        create_dir(&frames_dir)?;
        let frame = cfg.world_frame()?;
        let images = render_sequence(&bench.links, &pred.states[1..], &frame);
        for (j, img) in images.iter().enumerate() {
            let path = frames_dir.join(frame_file_name(seq, j + 2));
            write_pgm(&path, img)?;
            outputs.push(path);
        }
    }
    write_manifest(out, "manifest_predict.json", "predict", cfg, outputs)?;

    let errors: Vec<f64> = pred
        .states
        .iter()
        .enumerate()
        .skip(1)
        .filter_map(|(j, x)| obs.states.get(1 + j).map(|t| x.iter().zip(t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)))
        .collect();
    let summary = PredictSummary {
        sequence: seq,
        horizon,
        max_error: errors.iter().copied().reduce(f64::max),
        final_error: (obs.states.len() > 1 + horizon).then(|| errors[horizon - 1]),
    };
    Ok(serde_json::to_string(&summary).expect("summary serializes"))
}

pub enum Target {
    State(Vec<f64>),
    Frame(PathBuf),
}

pub fn parse_state(text: &str, k: usize, what: &str) -> Result<Vec<f64>, CliError> {
    let v = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(format!("{what} `{text}`: {e}")))?;
    if v.len() != k {
        return Err(CliError::Config(format!("{what} has {} values, the system state has {k}", v.len())));
    }
    Ok(v)
}

/// Reference configuration with the last keypoint nudged sideways, at rest.
/// Exactly hanging configurations are equilibria of the shaped system too.
fn default_start(bench: &Benchmark) -> Vec<f64> {
    let mut x = bench.reference_state.clone();
    let k = x.len();
    x[k - 2] += 1e-3;
    project_to_manifold(&bench.constraints, &x)
}

#[derive(Serialize)]
struct ControlSummary {
    success: bool,
    settled_at: Option<usize>,
    steps: usize,
    target: Vec<f64>,
}

pub fn control(
    cfg: &RunConfig,
    target: Target,
    steps: usize,
    start: Option<Vec<f64>>,
) -> Result<String, CliError> {
    let bench = cfg.benchmark()?;
    let model = load_model(cfg, &bench)?;
    let frame = cfg.world_frame()?;
    let x_star = match target {
        Target::State(x) => x,
        Target::Frame(path) => {
            let img = read_pgm(&path)?;
            if img.height != frame.height || img.width != frame.width {
                return Err(CliError::Config(format!(
                    "target frame is {}×{}, grid is {}×{}",
                    img.height, img.width, frame.height, frame.width
                )));
            }
            let located = locate_discs(&img, &frame, &bench.upright())?;
            let (_, xhat) = synth_observe(&located, &frame, cfg.sigma, cfg.observe_noise, cfg.seed)?;
            project_to_manifold(&bench.constraints, &xhat)
        }
    };
    let x0 = start.unwrap_or_else(|| default_start(&bench));
    let v0 = vec![0.0; bench.k()];
    let run: ClosedLoop = with_system!(&model, bench, |sys| {
        let gains = ControlGains::new(sys, cfg.gains.kp, cfg.gains.kd, x_star.clone())?;
        closed_loop(sys, &gains, &x0, &v0, steps, cfg.h)?
    });

    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let csv = out.join("control.csv");
    let (names, rows) = run.csv_columns();
    write_file(&csv, trajectory_csv(&run.trajectory, Some(&ExtraColumns { names, rows: &rows }))?)?;
    write_manifest(out, "manifest_control.json", "control", cfg, vec![csv])?;

    if let Some((step, reason)) = &run.failure {
        return Err(CliError::Core(Error::ActuationDeficiency {
            x: run.trajectory.states[*step].clone(),
            reason: format!("at step {step}: {reason}"),
        }));
    }
    let summary = ControlSummary {
        success: run.success,
        settled_at: run.settled_at,
        steps,
        target: x_star,
    };
    Ok(serde_json::to_string(&summary).expect("summary serializes"))
}

/// Validation sequences whose energy traces and input fields are exported.
const TRACED_SEQUENCES: usize = 5;

pub fn evaluate(cfg: &RunConfig) -> Result<String, CliError> {
    let bench = cfg.benchmark()?;
    let data = load_dataset(cfg)?;
    let model = load_model(cfg, &bench)?;
    let frame = cfg.world_frame()?;
    let val: Vec<&Trajectory> = data.validation.iter().map(|&i| &data.sequences[i]).collect();
    if val.is_empty() {
        return Err(CliError::Config("field `data.val_fraction`: the dataset has no validation sequences".into()));
    }
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let mut outputs = Vec::new();
    let (image, state_space) = with_system!(&model, bench, |sys| {
        let image = eval::image_vpt(sys, &bench.links, &frame, &val, cfg.h)?;
        let state_space = eval::state_space_vpt(sys, &val, cfg.h)?;
        for (&idx, seq) in data.validation.iter().zip(&val).take(TRACED_SEQUENCES) {
            let pred = eval::predict(sys, &seq.states, &seq.u, seq.len() - 2, cfg.h)?;
            let path = out.join(format!("energy_{idx:04}.csv"));
            write_file(&path, eval::energy_trace_csv(&eval::energy_trace(sys, &pred)?))?;
            outputs.push(path);
            if sys.l() > 0 {
                let path = out.join(format!("input_field_{idx:04}.csv"));
                write_file(&path, eval::input_field_csv(&eval::input_field(sys, &pred)?))?;
                outputs.push(path);
            }
        }
        (image, state_space)
    });
    let report = EvalReport {
        config_hash: cfg.hash(),
        image: MetricsReport::new(cfg.system_name(), &image),
        state_space: MetricsReport::new(cfg.system_name(), &state_space),
    };
    let metrics = out.join("metrics.json");
    write_file(&metrics, json::to_string_pretty(&report)?)?;
    outputs.insert(0, metrics);
    write_manifest(out, "manifest_eval.json", "eval", cfg, outputs)?;
    Ok(format!(
        "VPT {:.2} ± {:.2} over {} sequences (state space {:.2})",
        image.mean,
        image.std,
        image.per_seq.len(),
        state_space.mean
    ))
}

/// Renders dataset sequences, and optionally their keypoint blob targets,
/// to PGM.
pub fn export(cfg: &RunConfig, sequence: Option<usize>, heatmaps: bool) -> Result<String, CliError> {
    let bench = cfg.benchmark()?;
    let data = load_dataset(cfg)?;
    let frame = cfg.world_frame()?;
    let selected = match sequence {
        Some(s) if s < data.sequences.len() => vec![s],
        Some(s) => return Err(CliError::Config(format!("sequence {s} not in dataset of {}", data.sequences.len()))),
        None => data.validation.clone(),
    };
    let out = &cfg.paths.out_dir;
    let frames_dir = out.join("frames");
    create_dir(&frames_dir)?;
    let mut outputs = Vec::new();
    for &s in &selected {
        let states = &data.sequences[s].states;
        for (i, img) in render_sequence(&bench.links, states, &frame).iter().enumerate() {
            let path = frames_dir.join(frame_file_name(s, i));
            write_pgm(&path, img)?;
            outputs.push(path);
        }
        if heatmaps {
            for (i, x) in states.iter().enumerate() {
                let blobs = gaussian_blobs(x, &frame, cfg.sigma)?;
                for (m, img) in heatmap_images(&blobs).iter().enumerate() {
                    let dir = out.join("heatmaps").join(format!("kp{m}"));
                    create_dir(&dir)?;
                    let path = dir.join(frame_file_name(s, i));
                    write_pgm(&path, img)?;
                    outputs.push(path);
                }
            }
        }
    }
    let count = outputs.len();
    write_manifest(out, "manifest_export.json", "export", cfg, outputs)?;
    Ok(format!("wrote {count} images for {} sequences to {}", selected.len(), out.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_reparses_to_an_equal_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::from_json(r#"{"system": "acrobot", "lr": 0.1, "world": {"x_min": -2, "x_max": 2, "y_min": -1, "y_max": 1}}"#).unwrap();
        cfg.gains.kd = 0.3;
        write_manifest(dir.path(), "m.json", "test", &cfg, vec!["a.csv".into()]).unwrap();
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(m.config, cfg);
        assert_eq!(m.config_hash, cfg.hash());
        assert_eq!(m.config.hash(), cfg.hash());
    }

    #[test]
    fn state_parsing() {
        assert_eq!(parse_state(" 0, 1", 2, "target").unwrap(), vec![0.0, 1.0]);
        assert!(parse_state("0,x", 2, "target").is_err());
        assert!(parse_state("0", 2, "target").is_err());
    }

    #[test]
    fn default_start_is_on_the_manifold_and_off_the_equilibrium() {
        for b in [Benchmark::pendulum(), Benchmark::cartpole(), Benchmark::acrobot()] {
            let x = default_start(&b);
            assert!(b.constraints.eval_phi(&x).unwrap().amax() < 1e-12);
            assert!(x != b.reference_state);
        }
    }
}
