//! Pre-training loop: per-image gradients in parallel, reduced in a fixed
//! order so results do not depend on the thread count.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dmtj_core::model::{Model, ModelGrads, StepPlan};
use dmtj_core::optim::{ema_update, optimizer_step, OptimizerState};
use dmtj_core::Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::corpus::partial_path;
use crate::data::Unlabeled;
use crate::error::{IoError, IoResult};

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub opt_context: OptimizerState,
    pub opt_predictor: OptimizerState,
    pub step: u64,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(config: RunConfig) -> IoResult<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(config.seed);
        let model = Model::new(&config.model, &mut rng)?;
        Ok(Self {
            opt_context: OptimizerState::new(&model.context),
            opt_predictor: OptimizerState::new(&model.predictor_params),
            config,
            model,
            step: 0,
            rng,
        })
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub ema: f64,
}

impl std::fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} loss={} lr={} wd={} ema={}",
            self.step, self.loss as f32, self.lr as f32, self.wd as f32, self.ema as f32
        )
    }
}

/// Worker pool sized by `DMT_THREADS` when set.
pub fn thread_pool() -> IoResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DMT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| IoError::Format(format!("DMT_THREADS={v:?} is not a thread count")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| IoError::Format(e.to_string()))
}

/// Where and how often a run persists itself.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
    /// Stop after this many epochs of the schedule (the schedule itself is
    /// unchanged); `None` runs to the end.
    pub max_epochs: Option<usize>,
}

pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Runs the schedule from `state.step` onward. Returns the metrics of the
/// steps taken by this call.
pub fn pretrain(
    state: &mut TrainState,
    data: Unlabeled<'_>,
    outputs: &Outputs,
    pool: &rayon::ThreadPool,
) -> IoResult<Vec<StepMetrics>> {
    let bs = state.config.batch_size;
    let steps_per_epoch = data.len() / bs;
    if steps_per_epoch == 0 {
        return Err(IoError::Format(format!(
            "{} training images cannot fill a batch of {bs}",
            data.len()
        )));
    }
    let schedules = state.config.schedule.resolve(steps_per_epoch);
    schedules.validate()?;
    let mut log = match &outputs.dir {
        Some(dir) => Some(open_log(dir, state)?),
        None => None,
    };

    let first_epoch = (state.step / steps_per_epoch as u64) as usize;
    let last_epoch = outputs
        .max_epochs
        .map_or(schedules.total_epochs, |m| (first_epoch + m).min(schedules.total_epochs));
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in first_epoch..last_epoch {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        for batch in order.chunks_exact(bs) {
            let plans = batch
                .iter()
                .map(|_| state.model.sample_plan(&mut state.rng))
                .collect::<Result<Vec<_>, _>>()?;
            let model = &state.model;
            let images = data.images();
            let results = pool.install(|| {
                batch
                    .par_iter()
                    .zip(&plans)
                    .map(|(&i, plan)| model.loss_and_grads(&images[i], plan))
                    .collect::<Vec<_>>()
            });
            let mut grads = ModelGrads::zeros(model);
            let mut loss = 0.0;
            for ((result, &i), plan) in results.into_iter().zip(batch).zip(&plans) {
                let (parts, g) = result.map_err(|e| replay_error(state, i, plan, &e.to_string()))?;
                if !parts.total.is_finite() {
                    return Err(replay_error(state, i, plan, "non-finite loss"));
                }
                loss += parts.total / bs as f64;
                grads.add_scaled(&g, 1.0 / bs as f64);
            }
            let m = StepMetrics {
                step: state.step,
                loss,
                lr: schedules.lr_at(state.step)?,
                wd: schedules.wd_at(state.step)?,
                ema: schedules.ema_at(state.step)?,
            };
            let cfg = &state.config.optimizer;
            optimizer_step(&mut state.model.context, &grads.context, &mut state.opt_context, cfg, m.lr, m.wd)?;
            optimizer_step(
                &mut state.model.predictor_params,
                &grads.predictor,
                &mut state.opt_predictor,
                cfg,
                m.lr,
                m.wd,
            )?;
            ema_update(&state.model.context, &mut state.model.target, m.ema)?;
            state.step += 1;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{m}").map_err(|e| IoError::io(METRICS_FILE, e))?;
            }
            log::debug!("{m}");
            metrics.push(m);
        }
        if let Some(dir) = &outputs.dir {
            crate::checkpoint::save(&dir.join(CHECKPOINT_FILE), state)?;
        }
    }
    if let (Some(mut w), Some(dir)) = (log, &outputs.dir) {
        w.flush().map_err(|e| IoError::io(METRICS_FILE, e))?;
        let path = dir.join(METRICS_FILE);
        fs::rename(partial_path(&path), &path).map_err(|e| IoError::io(&path, e))?;
    }
    Ok(metrics)
}

fn open_log(dir: &Path, state: &TrainState) -> IoResult<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    let partial = partial_path(&path);
    // A resumed run keeps the lines it already wrote.
    if state.step > 0 && path.exists() && !partial.exists() {
        fs::rename(&path, &partial).map_err(|e| IoError::io(&path, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(state.step > 0)
        .write(true)
        .truncate(state.step == 0)
        .open(&partial)
        .map_err(|e| IoError::io(&partial, e))?;
    if state.step == 0 {
        let config = serde_json::to_string(&state.config)?;
        writeln!(f, "# config {config}").map_err(|e| IoError::io(&partial, e))?;
    }
    Ok(BufWriter::new(f))
}

fn replay_error(state: &TrainState, image: usize, plan: &StepPlan, what: &str) -> IoError {
    let mut msg = format!(
        "{what} at step {} (seed {}, image {image}); replay with plan ",
        state.step, state.config.seed
    );
    let _ = write!(msg, "{plan:?}");
    IoError::Format(msg)
}

/// Mean of `values[i..i + window]` for every full window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
