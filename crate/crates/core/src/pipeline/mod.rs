//! Experiment pipeline: configs, synthetic and recorded datasets, training,
//! evaluation and ablation grids.

mod ablation;
mod config;
mod real;
mod tasks;
mod train;

use std::path::Path;

use thiserror::Error;

pub use ablation::{run_ablation, AblationAxis, AblationRow, AblationTable};
pub use config::{Ablation, ArchConfig, DataSource, DetectionSettings, Task, TrainConfig};
pub use real::{gen1_detection_samples, load_gen1_recordings, load_ncars};
pub use tasks::{bar_scene, bar_task, encode_to, squares_scene, squares_task, BarTaskConfig, ClassDataset, DetDataset, SquaresTaskConfig};
pub use train::{
    detector_anchors, evaluate_classifier, evaluate_detector, freeze_backbone, inference_network, train_classifier,
    train_detector, ClassEval, DetEval, EpochLog, ExperimentManifest, TrainOutcome,
};

use crate::autograd::{save_checkpoint, CheckpointError, TensorError};
use crate::detection::DetectionError;
use crate::encoding::{EncoderConfig, EncodingError};
use crate::event_io::EventError;
use crate::spiking::SpikingError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at epoch {epoch}, step {step} (lr {lr:.3e}, grad norm {grad_norm})")]
    NanLoss {
        epoch: usize,
        step: usize,
        lr: f64,
        grad_norm: f64,
    },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Spiking(#[from] SpikingError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

/// Train and test splits of whichever task a config names.
pub enum TaskData {
    Classification(ClassDataset, ClassDataset),
    Detection(DetDataset, DetDataset),
}

pub fn encoder_config(cfg: &TrainConfig) -> EncoderConfig {
    EncoderConfig {
        duration_us: cfg.duration_us,
        timesteps: cfg.timesteps,
        micro_bins: cfg.micro_bins,
        height: cfg.height,
        width: cfg.width,
    }
}

fn env_or(dir: &str, var: &str) -> String {
    if dir.is_empty() {
        std::env::var(var).unwrap_or_default()
    } else {
        dir.to_string()
    }
}

/// Generates or loads the data of `cfg`, applying the sample caps.
/// An empty directory for a recorded dataset falls back to
/// `SNN_NCARS_DIR` / `SNN_GEN1_DIR`.
pub fn load_task_data(cfg: &TrainConfig) -> Result<TaskData, PipelineError> {
    let mut enc = encoder_config(cfg);
    let mut data = match (&cfg.data, cfg.task) {
        (DataSource::Bars(b), Task::Classification) => {
            enc.duration_us = b.duration_us;
            let (tr, te) = bar_task(b, &enc)?;
            TaskData::Classification(tr, te)
        }
        (DataSource::Squares(s), Task::Detection) => {
            enc.duration_us = s.duration_us;
            let (tr, te) = squares_task(s, &enc)?;
            TaskData::Detection(tr, te)
        }
        (DataSource::Ncars { dir }, Task::Classification) => {
            let dir = env_or(dir, "SNN_NCARS_DIR");
            let root = Path::new(&dir);
            TaskData::Classification(
                load_ncars(root, "train", &enc, cfg.max_train_samples)?,
                load_ncars(root, "test", &enc, cfg.max_eval_samples)?,
            )
        }
        (DataSource::Gen1 { dir }, Task::Detection) => {
            let dir = env_or(dir, "SNN_GEN1_DIR");
            let root = Path::new(&dir);
            let tr = load_gen1_recordings(root, "train", None)?;
            let te = load_gen1_recordings(root, "test", None)?;
            TaskData::Detection(
                gen1_detection_samples(&tr, &enc, cfg.max_train_samples)?,
                gen1_detection_samples(&te, &enc, cfg.max_eval_samples)?,
            )
        }
        (d, t) => return Err(PipelineError::Config(format!("data source {d:?} does not fit task {t:?}"))),
    };
    let (ntr, nte) = (cfg.max_train_samples.unwrap_or(usize::MAX), cfg.max_eval_samples.unwrap_or(usize::MAX));
    match &mut data {
        TaskData::Classification(tr, te) => {
            tr.truncate(ntr);
            te.truncate(nte);
        }
        TaskData::Detection(tr, te) => {
            tr.truncate(ntr);
            te.truncate(nte);
        }
    }
    Ok(data)
}

/// Loads the data of `cfg` and trains on it, evaluating on the test split.
pub fn run_experiment(cfg: &TrainConfig) -> Result<TrainOutcome, PipelineError> {
    match load_task_data(cfg)? {
        TaskData::Classification(tr, te) => train_classifier(cfg, &tr, Some(&te)),
        TaskData::Detection(tr, te) => train_detector(cfg, &tr, Some(&te)),
    }
}

/// Writes `checkpoint.bin` and `manifest.json` under `dir`.
pub fn save_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let ckpt = outcome.network.to_checkpoint(outcome.optimizer.to_bytes());
    save_checkpoint(dir.join("checkpoint.bin"), &ckpt)?;
    std::fs::write(dir.join("manifest.json"), outcome.manifest.to_json())?;
    Ok(())
}
