//! One-axis ablation grids over a base run configuration.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::federation::{run_experiment, AggregationMode};
use crate::par::Exec;
use crate::svgd::SvgdKernel;
use crate::wire::message_size;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Kernel,
    SvgdIters,
    Bandwidth,
    Particles,
    ScheduleRatio,
    LabelsPerClient,
    Eta,
    Lambda,
    KdeBandwidth,
    Aggregation,
}

impl Axis {
    pub const ALL: [Axis; 10] = [
        Axis::Kernel,
        Axis::SvgdIters,
        Axis::Bandwidth,
        Axis::Particles,
        Axis::ScheduleRatio,
        Axis::LabelsPerClient,
        Axis::Eta,
        Axis::Lambda,
        Axis::KdeBandwidth,
        Axis::Aggregation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Kernel => "kernel",
            Axis::SvgdIters => "svgd_iters",
            Axis::Bandwidth => "bandwidth",
            Axis::Particles => "particles",
            Axis::ScheduleRatio => "schedule_ratio",
            Axis::LabelsPerClient => "labels_per_client",
            Axis::Eta => "eta",
            Axis::Lambda => "lambda",
            Axis::KdeBandwidth => "kde_bandwidth",
            Axis::Aggregation => "aggregation",
        }
    }

    /// Grid cells as `(label, config)` pairs derived from `base`.
    pub fn cells(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label, c)
        };
        match self {
            Axis::Kernel => [
                SvgdKernel::Rbf { bandwidth: None },
                SvgdKernel::Laplacian { bandwidth: None },
                SvgdKernel::POLYNOMIAL_DEFAULT,
                SvgdKernel::SIGMOID_DEFAULT,
            ]
            .into_iter()
            .map(|k| with(k.name().into(), &|c| c.svgd.kernel = k))
            .collect(),
            Axis::SvgdIters => [20, 30, 40]
                .into_iter()
                .map(|n| with(n.to_string(), &|c| c.svgd.iterations = n))
                .collect(),
            Axis::Bandwidth => [Some(1.0), None, Some(12.0)]
                .into_iter()
                .map(|h| {
                    let label = h.map_or("med".to_string(), |h| h.to_string());
                    with(label, &|c| c.svgd.kernel = SvgdKernel::Rbf { bandwidth: h })
                })
                .collect(),
            Axis::Particles => [5, 10, 20]
                .into_iter()
                .map(|n| with(n.to_string(), &|c| c.federation.particles = n))
                .collect(),
            Axis::ScheduleRatio => [0.1, 0.2, 0.5]
                .into_iter()
                .map(|r| {
                    let z = ((base.federation.num_clients as f64 * r).round() as usize).max(1);
                    with(r.to_string(), &|c| c.federation.sample_size = z)
                })
                .collect(),
            Axis::LabelsPerClient => [2, 5, 10]
                .into_iter()
                .map(|l| with(l.to_string(), &|c| c.data.labels_per_client = l))
                .collect(),
            Axis::Eta => [0.01, 0.02, 0.03]
                .into_iter()
                .map(|e| with(e.to_string(), &|c| c.svgd.step_eta = e))
                .collect(),
            Axis::Lambda => [1e-7, 1e-8, 1e-9, 1e-10]
                .into_iter()
                .map(|l| with(format!("{l:e}"), &|c| c.svgd.adagrad_lambda = l))
                .collect(),
            Axis::KdeBandwidth => [0.30, 0.55, 0.70]
                .into_iter()
                .map(|b| with(b.to_string(), &|c| c.federation.kde_bandwidth = b))
                .collect(),
            Axis::Aggregation => [AggregationMode::Wba, AggregationMode::ParamAvg]
                .into_iter()
                .map(|m| {
                    let label = match m {
                        AggregationMode::Wba => "wba",
                        AggregationMode::ParamAvg => "param-avg",
                    };
                    with(label.into(), &|c| c.federation.mode = m)
                })
                .collect(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Axis::ALL.iter().map(|a| a.name()).collect();
            Error::config("axis", format!("unknown axis {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub axis: &'static str,
    pub value: String,
    pub seed: u64,
    pub final_mean_acc: f64,
    pub final_mean_ece: f64,
    pub rounds: usize,
    pub comm_bytes_per_round: u64,
    pub comm_bytes_total: u64,
    pub message_size: usize,
    pub wall_ms: f64,
}

pub const ABLATION_CSV_COLUMNS: &str =
    "axis,value,seed,final_mean_acc,final_mean_ece,rounds,comm_bytes_per_round,comm_bytes_total,message_size,wall_ms";

impl AblationRow {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            self.axis,
            self.value,
            self.seed,
            self.final_mean_acc,
            self.final_mean_ece,
            self.rounds,
            self.comm_bytes_per_round,
            self.comm_bytes_total,
            self.message_size,
            self.wall_ms
        )
    }
}

/// Runs every cell for every seed in `base.ablation.seeds`. Seeds are the
/// inner loop, so paired cells (e.g. `wba` vs `param-avg`) share seeds.
pub fn run_axis<F>(axis: Axis, base: &RunConfig, exec: Exec, mut on_row: F) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationRow) -> Result<()>,
{
    let mut rows = Vec::new();
    for (value, cell) in axis.cells(base) {
        for &seed in &base.ablation.seeds {
            let mut cfg = cell.clone();
            cfg.federation.seed = seed;
            cfg.validate()?;
            let data = cfg.load_dataset()?;
            let shape = cfg.shape_for(&data)?;
            let shards = cfg.partition(&data)?;
            let fed = cfg.federation_config();
            let out = run_experiment(&fed, shape, shards, exec, |_, _, _| Ok(()))?;
            let last = out.final_report();
            let rounds = out.reports.len();
            let total = out.comm_bytes_total();
            let row = AblationRow {
                axis: axis.name(),
                value: value.clone(),
                seed,
                final_mean_acc: last.mean_accuracy,
                final_mean_ece: last.mean_ece,
                rounds,
                comm_bytes_per_round: total / rounds as u64,
                comm_bytes_total: total,
                message_size: message_size(fed.particles, shape.flat_len()),
                wall_ms: out.reports.iter().map(|r| r.wall_ms).sum(),
            };
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}
