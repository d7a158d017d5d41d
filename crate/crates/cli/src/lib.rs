//! Entry points behind the `evblur` binary. Each `cmd_*` function is usable
//! on its own so tests can drive whole runs without spawning processes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use evblur_core::datagen::{make_dataset, DatasetConfig};
use evblur_core::eval::{evaluate, training_views, EvalReport};
use evblur_core::io::{self, read_checkpoint, read_dataset, write_checkpoint, write_dataset, TrainLog};
use evblur_core::render::{render_image, DepthSampling, FieldPair, Intrinsics};
use evblur_core::train::{train, TrainConfig, TrainData, TrainState};
use evblur_core::{Error, Result};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub manifest: PathBuf,
    pub views: usize,
    pub novel_views: usize,
    pub events_per_view: Vec<usize>,
    pub positive_fraction: f64,
}

pub fn cmd_simulate(out: &Path, config: &DatasetConfig) -> Result<SimulateSummary> {
    let ds = make_dataset(config)?;
    let manifest = write_dataset(out, &ds)?;
    let events_per_view: Vec<usize> = ds.views.iter().map(|v| v.events.len()).collect();
    let total: usize = events_per_view.iter().sum();
    let positive = ds.views.iter().flat_map(|v| &v.events).filter(|e| e.polarity > 0).count();
    Ok(SimulateSummary {
        manifest,
        views: ds.views.len(),
        novel_views: ds.novel.len(),
        events_per_view,
        positive_fraction: if total == 0 { 0.0 } else { positive as f64 / total as f64 },
    })
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !io::manifest_path(&self.dataset).is_file() {
            return Err(Error::Invalid(format!("dataset: no manifest at {}", self.dataset.display())));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iterations: usize,
    pub final_loss: Option<f64>,
}

pub const INTRINSICS_NAME: &str = "intrinsics.json";

/// Trains from scratch and writes the checkpoint, `train_log.csv`,
/// `run_config.json` and `intrinsics.json` into `run.out`.
pub fn cmd_train(run: &RunConfig) -> Result<TrainSummary> {
    run.validate()?;
    let ds = read_dataset(&run.dataset)?;
    let data = TrainData::new(training_views(&ds), run.train.p)?;
    let mut state = TrainState::init(&data, &run.train)?;
    fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    let log_path = run.out.join("train_log.csv");
    let mut log = TrainLog::create(&log_path)?;
    let mut last = None;
    let mut log_err = None;
    train(&data, &run.train, &mut state, |r| {
        last = Some(r.loss.total);
        if let Err(e) = log.append(r) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.finish()?;
    let trajectories = state.trajectories(&data, &run.train)?;
    write_checkpoint(&run.out, &run.train, &state, &trajectories)?;
    write_json(&run.out.join("run_config.json"), run)?;
    write_json(&run.out.join(INTRINSICS_NAME), &ds.intrinsics)?;
    Ok(TrainSummary { checkpoint: run.out.clone(), log: log_path, iterations: state.iteration, final_loss: last })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Scores a checkpoint on its dataset. `samples` overrides the depth samples
/// per ray used for rendering.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path, samples: Option<usize>) -> Result<EvalReport> {
    let ck = read_checkpoint(checkpoint)?;
    let ds = read_dataset(dataset)?;
    if ck.trajectories.len() != ds.views.len() {
        return Err(Error::Invalid(format!(
            "checkpoint has {} views but the dataset has {}",
            ck.trajectories.len(),
            ds.views.len()
        )));
    }
    evaluate(&ds, &ck.state.field, ck.state.coarse.as_ref(), &ck.trajectories, samples.unwrap_or(ck.config.samples))
}

/// Renders every pose of a pose-list file to `out/render_XXX.{pfm,ppm}`.
pub fn cmd_render(checkpoint: &Path, poses: &Path, out: &Path, samples: Option<usize>, intrinsics: Option<Intrinsics>) -> Result<Vec<PathBuf>> {
    let ck = read_checkpoint(checkpoint)?;
    let k = match intrinsics {
        Some(k) => k,
        None => {
            let p = checkpoint.join(INTRINSICS_NAME);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?
        }
    };
    let poses = io::read_pose_list(poses)?;
    let fields = FieldPair { fine: &ck.state.field, coarse: ck.state.coarse.as_ref() };
    let n = samples.unwrap_or(ck.config.samples);
    let mut written = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let img = render_image(fields, &k, pose, n, DepthSampling::Midpoint)?;
        let pfm = out.join(format!("render_{i:03}.pfm"));
        io::write_pfm(&pfm, &img)?;
        io::write_ppm(&out.join(format!("render_{i:03}.ppm")), &img)?;
        written.push(pfm);
    }
    Ok(written)
}
