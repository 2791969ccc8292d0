//! Grids of training runs that vary one factor of a base config.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::inference_network;
use super::{run_experiment, PipelineError};
use crate::metrics::count_ops;
use crate::spiking::{BnPlacement, ConvMode, NeuronKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum AblationAxis {
    /// `(T, n)` pairs.
    TimeBins(Vec<(usize, usize)>),
    BnPlacement(Vec<BnPlacement>),
    Neuron(Vec<NeuronKind>),
    ConvMode(Vec<ConvMode>),
}

impl AblationAxis {
    fn configs(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::TimeBins(v) => v
                .iter()
                .map(|&(t, n)| {
                    (
                        format!("T={t},n={n}"),
                        with(&|c| {
                            c.timesteps = t;
                            c.micro_bins = n;
                        }),
                    )
                })
                .collect(),
            AblationAxis::BnPlacement(v) => v
                .iter()
                .map(|&b| (format!("bn={b:?}"), with(&|c| c.ablation.bn_placement = b)))
                .collect(),
            AblationAxis::Neuron(v) => v
                .iter()
                .map(|&k| (format!("neuron={k:?}"), with(&|c| c.ablation.neuron = k)))
                .collect(),
            AblationAxis::ConvMode(v) => v
                .iter()
                .map(|&m| (format!("conv={m:?}"), with(&|c| c.ablation.conv_mode = m)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metric: Option<f64>,
    /// Trainable form of the network.
    pub params: u64,
    pub accs_per_timestep: u64,
    /// After separable pairs are merged and batch norms folded.
    pub inference_params: u64,
    pub inference_accs_per_timestep: u64,
    pub spike_rate: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub metric_name: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<22} {:>9} {:>10} {:>12} {:>10} {:>12} {:>8} {:>8}\n",
            "setting", self.metric_name, "params", "ACC/step", "inf.params", "inf.ACC/step", "rate", "time s"
        );
        for r in &self.rows {
            let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}", prec = p));
            out += &format!(
                "{:<22} {:>9} {:>10} {:>12} {:>10} {:>12} {:>8} {:>8.1}\n",
                r.label,
                opt(r.metric, 4),
                r.params,
                r.accs_per_timestep,
                r.inference_params,
                r.inference_accs_per_timestep,
                opt(r.spike_rate, 4),
                r.wall_clock_s
            );
        }
        out
    }
}

/// Trains and evaluates one run per value of `axis`, everything else taken
/// from `base`. Data are regenerated per run, so a `(T, n)` axis re-encodes.
pub fn run_ablation(base: &TrainConfig, axis: &AblationAxis) -> Result<AblationTable, PipelineError> {
    let mut rows = Vec::new();
    let mut metric_name = String::new();
    for (label, cfg) in axis.configs(base) {
        let out = run_experiment(&cfg)?;
        let inf = inference_network(&out.network, true)?;
        let ic = count_ops(inf.spec(), cfg.height, cfg.width)?;
        let m = &out.manifest;
        metric_name.clone_from(&m.metric_name);
        rows.push(AblationRow {
            label,
            metric: m.final_metric,
            params: m.counts.params,
            accs_per_timestep: m.counts.accs_per_timestep,
            inference_params: ic.params,
            inference_accs_per_timestep: ic.accs_per_timestep,
            spike_rate: m.sparsity.as_ref().map(|s| s.global_rate),
            final_loss: m.losses.last().copied(),
            wall_clock_s: m.wall_clock_s,
        });
    }
    Ok(AblationTable { metric_name, rows })
}
