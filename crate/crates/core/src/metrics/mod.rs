//! Accuracy, COCO mAP, parameter/ACC counts and spike sparsity, with JSON
//! and aligned-text reports.

mod counts;
mod map;

use serde::{Deserialize, Serialize};

use crate::spiking::SpikeRecord;

pub use counts::{count_accs_per_timestep, count_ops, count_params, LayerCount, OpCountReport};
pub use map::{coco_map, coco_thresholds, interpolated_ap, GroundTruth, MapReport};

/// Fraction of predictions equal to their label; 0 for empty input.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predictions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRate {
    pub name: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerRate>,
    /// Σ spikes / Σ (neurons × steps) over all layers and samples.
    pub global_rate: f64,
    pub timesteps: usize,
}

impl SparsityReport {
    /// Spike-driven work relative to one dense pass: `rate × T`.
    pub fn dense_pass_multiplier(&self) -> f64 {
        self.global_rate * self.timesteps as f64
    }
}

pub fn sparsity(record: &SpikeRecord) -> SparsityReport {
    let rate = |s: u64, e: u64| if e == 0 { 0.0 } else { s as f64 / e as f64 };
    SparsityReport {
        layers: record
            .layers
            .iter()
            .map(|l| LayerRate {
                name: l.name.clone(),
                rate: rate(l.total_spikes(), l.total_elements()),
            })
            .collect(),
        global_rate: rate(record.total_spikes(), record.total_elements()),
        timesteps: record.layers.first().map_or(0, |l| l.spikes.len()),
    }
}

/// One row of a results table: `#Params`, `ACCs/ts`, the task metric and
/// the spike rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub params: u64,
    pub accs_per_timestep: u64,
    /// Accuracy or mAP.
    pub metric: Option<f64>,
    pub sparsity: Option<f64>,
}

/// Compact units; counts from 1e8 up are shown in G, as in result tables.
fn human(n: u64) -> String {
    let v = n as f64;
    if v >= 1e8 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.1}K", v / 1e3)
    } else {
        n.to_string()
    }
}

/// Aligned text table, one row per model.
pub fn format_table(rows: &[ResultRow], metric_name: &str) -> String {
    let mut out = format!("{:<28} {:>10} {:>10} {:>10} {:>9}\n", "Model", "#Params", "ACCs/ts", metric_name, "Sparsity");
    for r in rows {
        let metric = r.metric.map_or("-".to_string(), |m| format!("{:.2}%", m * 100.0));
        let sp = r.sparsity.map_or("-".to_string(), |s| format!("{:.2}%", s * 100.0));
        out.push_str(&format!(
            "{:<28} {:>10} {:>10} {:>10} {:>9}\n",
            r.model,
            human(r.params),
            human(r.accs_per_timestep),
            metric,
            sp
        ));
    }
    out
}
