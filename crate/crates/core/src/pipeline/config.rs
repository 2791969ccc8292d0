//! Experiment configuration and its defaults.

use serde::{Deserialize, Serialize};

use super::tasks::{BarTaskConfig, SquaresTaskConfig};
use super::PipelineError;
use crate::detection::{DetectionLossConfig, PostprocessConfig};
use crate::spiking::{
    build_densenet, build_detector, build_mobilenet, build_small_cnn, build_squeezenet, build_vgg, BlockStyle,
    BnPlacement, ConvMode, DetectorConfig, NetworkSpec, NeuronKind, PlifConfig, SmallCnnConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ArchConfig {
    Vgg { variant: u32 },
    Squeezenet { version: String },
    Mobilenet { first_filters: usize },
    Densenet { depth: u32, growth: usize },
    SmallCnn(SmallCnnConfig),
    Detector(DetectorConfig),
}

impl ArchConfig {
    pub fn label(&self) -> String {
        match self {
            ArchConfig::Vgg { variant } => format!("VGG-{variant}"),
            ArchConfig::Squeezenet { version } => format!("SqueezeNet {version}"),
            ArchConfig::Mobilenet { first_filters } => format!("MobileNet-{first_filters}"),
            ArchConfig::Densenet { depth, growth } => format!("DenseNet{depth}-{growth}"),
            ArchConfig::SmallCnn(_) => "small CNN".into(),
            ArchConfig::Detector(_) => "SSD".into(),
        }
    }

    /// Short names as used on the command line: `vgg11`, `squeezenet1.1`,
    /// `mobilenet-32`, `densenet121-16`, `small`, `ssd-densenet121-24`.
    pub fn from_name(name: &str) -> Result<Self, PipelineError> {
        let bad = || PipelineError::Config(format!("unknown architecture '{name}'"));
        let lower = name.to_ascii_lowercase().replace('_', "-");
        let num = |s: &str| s.trim_start_matches('-').parse::<usize>().map_err(|_| bad());
        if let Some(rest) = lower.strip_prefix("ssd-densenet") {
            let (d, g) = rest.split_once('-').ok_or_else(bad)?;
            return Ok(ArchConfig::Detector(DetectorConfig::densenet121_24(2).with_densenet(num(d)? as u32, num(g)?)));
        }
        if let Some(rest) = lower.strip_prefix("vgg") {
            return Ok(ArchConfig::Vgg { variant: num(rest)? as u32 });
        }
        if let Some(rest) = lower.strip_prefix("squeezenet") {
            return Ok(ArchConfig::Squeezenet {
                version: rest.trim_start_matches('-').to_string(),
            });
        }
        if let Some(rest) = lower.strip_prefix("mobilenet") {
            return Ok(ArchConfig::Mobilenet { first_filters: num(rest)? });
        }
        if let Some(rest) = lower.strip_prefix("densenet") {
            let (d, g) = rest.split_once('-').ok_or_else(bad)?;
            return Ok(ArchConfig::Densenet {
                depth: num(d)? as u32,
                growth: num(g)?,
            });
        }
        if lower == "small" {
            return Ok(ArchConfig::SmallCnn(SmallCnnConfig::default()));
        }
        Err(bad())
    }
}

/// Inference-time switches studied in the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub bn_placement: BnPlacement,
    pub neuron: NeuronKind,
    pub conv_mode: ConvMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Left-vs-right moving bars.
    Bars(BarTaskConfig),
    /// Moving squares of two sizes, for detection.
    Squares(SquaresTaskConfig),
    /// NCARS directory with `train`/`test` splits of `cars`/`background` `.dat` files.
    Ncars { dir: String },
    /// GEN1 directory with `train`/`val`/`test` splits of `_td.dat` + `_bbox.npy` pairs.
    Gen1 { dir: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub arch: ArchConfig,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_micro_bins")]
    pub micro_bins: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    /// Sample length in microseconds.
    #[serde(default = "default_duration")]
    pub duration_us: u64,
    /// Defaults per task and architecture when absent.
    #[serde(default)]
    pub lr0: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    pub data: DataSource,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub neuron: PlifConfig,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Evaluate with batch norms folded into the convs.
    #[serde(default = "default_true")]
    pub eval_fused: bool,
    /// Detection: train only the extra blocks and heads.
    #[serde(default)]
    pub freeze_backbone: bool,
    /// Checkpoint whose matching parameters initialise the network.
    #[serde(default)]
    pub pretrained: Option<String>,
    #[serde(default)]
    pub detection: DetectionSettings,
    /// Drop ground-truth boxes with a smaller diagonal (pixels) at evaluation.
    #[serde(default)]
    pub min_box_diagonal: Option<f64>,
    /// Cap on training samples, useful for smoke runs on real data.
    #[serde(default)]
    pub max_train_samples: Option<usize>,
    #[serde(default)]
    pub max_eval_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionSettings {
    pub loss: DetectionLossConfig,
    pub postprocess: PostprocessConfig,
    pub scale_min: f64,
    pub scale_max: f64,
    pub aspect_ratios: Vec<f64>,
}

impl Default for DetectionSettings {
    fn default() -> Self {
        Self {
            loss: DetectionLossConfig::default(),
            postprocess: PostprocessConfig::default(),
            scale_min: 0.5,
            scale_max: 0.8,
            aspect_ratios: vec![1.0, 2.0, 0.5],
        }
    }
}

fn default_timesteps() -> usize {
    5
}
fn default_micro_bins() -> usize {
    2
}
fn default_size() -> usize {
    64
}
fn default_duration() -> u64 {
    100_000
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_clip() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(task: Task, arch: ArchConfig, data: DataSource) -> Self {
        Self {
            task,
            arch,
            timesteps: default_timesteps(),
            micro_bins: default_micro_bins(),
            height: default_size(),
            width: default_size(),
            duration_us: default_duration(),
            lr0: None,
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
            epochs: None,
            seed: 0,
            deterministic: true,
            data,
            ablation: Ablation::default(),
            neuron: PlifConfig::default(),
            grad_clip: default_clip(),
            eval_fused: true,
            freeze_backbone: false,
            pretrained: None,
            detection: DetectionSettings::default(),
            min_box_diagonal: None,
            max_train_samples: None,
            max_eval_samples: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.timesteps == 0 || self.micro_bins == 0 {
            return bad("timesteps and micro_bins must be positive".into());
        }
        if let Some(lr) = self.lr0 {
            if !(lr >= 0.0) {
                return bad(format!("lr0 {lr} must be non-negative"));
            }
        }
        match (self.task, &self.arch) {
            (Task::Detection, ArchConfig::Detector(_)) => {}
            (Task::Detection, _) => return bad("detection needs a detector architecture".into()),
            (Task::Classification, ArchConfig::Detector(_)) => {
                return bad("a detector cannot be trained for classification".into())
            }
            _ => {}
        }
        self.neuron.validate().map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn input_channels(&self) -> usize {
        2 * self.micro_bins
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.task {
            Task::Classification => 10,
            Task::Detection => 200,
        })
    }

    /// 5e-3 by default, 5e-4 for VGG, 1e-3 for detection.
    pub fn lr0(&self) -> f64 {
        self.lr0.unwrap_or(match (&self.task, &self.arch) {
            (Task::Detection, _) => 1e-3,
            (_, ArchConfig::Vgg { .. }) => 5e-4,
            _ => 5e-3,
        })
    }

    pub fn style(&self) -> BlockStyle {
        BlockStyle {
            bn: self.ablation.bn_placement,
            neuron: self.ablation.neuron,
            plif: self.neuron,
        }
    }

    pub fn build_spec(&self, num_classes: usize) -> Result<NetworkSpec, PipelineError> {
        let (c, s) = (self.input_channels(), self.style());
        Ok(match &self.arch {
            ArchConfig::Vgg { variant } => build_vgg(*variant, c, num_classes, s)?,
            ArchConfig::Squeezenet { version } => build_squeezenet(version, c, num_classes, s)?,
            ArchConfig::Mobilenet { first_filters } => {
                build_mobilenet(*first_filters, c, num_classes, self.ablation.conv_mode, s)?
            }
            ArchConfig::Densenet { depth, growth } => build_densenet(*depth, *growth, c, num_classes, s)?,
            ArchConfig::SmallCnn(cfg) => build_small_cnn(cfg, c, num_classes, s)?,
            ArchConfig::Detector(cfg) => {
                let mut cfg = cfg.clone();
                cfg.num_classes = num_classes;
                cfg.anchors_per_cell = self.detection.aspect_ratios.len() + 1;
                build_detector(&cfg, c, s)?
            }
        })
    }
}
