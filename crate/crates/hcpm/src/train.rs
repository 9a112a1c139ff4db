//! Training driver: metric log, final checkpoint, divergence handling.

use std::path::{Path, PathBuf};

use hcpm_core::losses::LossReport;
use hcpm_core::nn::ParamStore;
use hcpm_core::pipeline::{Model, Trainer};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{at, IoError, Result};
use crate::log::JsonLog;

pub const CHECKPOINT: &str = "checkpoint.hcpm";
pub const METRICS: &str = "metrics.jsonl";
pub const CONFIG: &str = "config.json";

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLine {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub forced_keeps: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub losses: Vec<f64>,
    pub model: Model,
    pub params: ParamStore,
}

/// Trains for `cfg.pipeline.steps` steps and writes the checkpoint, the
/// resolved config and the metric log under `out`. A non-finite loss
/// stops training and leaves the last good parameters on disk.
pub fn train(cfg: &RunConfig, out: &Path, mut on_step: impl FnMut(&StepLine)) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(at(out))?;
    let ckpt = out.join(CHECKPOINT);
    let metrics = out.join(METRICS);
    let cfg_path = out.join(CONFIG);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg.to_value())?).map_err(at(&cfg_path))?;
    let mut log = JsonLog::create(&metrics)?;
    let mut trainer = Trainer::new(cfg.pipeline, cfg.scene)?;
    let steps = cfg.pipeline.steps;
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                checkpoint::save(&ckpt, &cfg.pipeline, &trainer.params)?;
                log.flush()?;
                return Err(IoError::Core(e));
            }
        };
        let line = StepLine {
            step: report.step,
            loss: report.loss,
            forced_keeps: report.forced_keeps,
        };
        losses.push(report.loss.total);
        if s % cfg.log_every == 0 || s + 1 == steps {
            log.write(&line)?;
        }
        on_step(&line);
    }
    log.flush()?;
    checkpoint::save(&ckpt, &cfg.pipeline, &trainer.params)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        metrics,
        losses,
        model: trainer.model,
        params: trainer.params,
    })
}
