//! Run directories: manifest, config snapshot, per-round CSV, final
//! ensembles in the wire format, reliability tables and a JSON summary.
//!
//! ```text
//! <out>/manifest.json        written before round 1, rewritten at the end
//! <out>/config.toml          snapshot; reproduces the run exactly
//! <out>/partition.json
//! <out>/rounds.csv           one row per round per client
//! <out>/ensembles/global.fwba, client_<k>.fwba
//! <out>/reliability/client_<k>.csv
//! <out>/summary.json
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::partition_manifest;
use crate::error::{Error, Result};
use crate::federation::{run_experiment, ExperimentOutcome, RoundReport};
use crate::par::Exec;
use crate::wire::{self, message_size};

pub const CSV_VERSION: u32 = 1;
pub const ROUNDS_CSV_COLUMNS: [&str; 10] = [
    "round",
    "client_id",
    "scheduled",
    "missing",
    "accuracy",
    "ece",
    "mean_accuracy",
    "mean_ece",
    "mean_w2_client_to_global",
    "comm_bytes",
];

#[derive(Clone, Debug, Serialize)]
pub struct ArtifactPaths {
    pub manifest: PathBuf,
    pub config: PathBuf,
    pub partition: PathBuf,
    pub rounds_csv: PathBuf,
    pub summary: PathBuf,
    pub ensembles: PathBuf,
    pub reliability: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            manifest: dir.join("manifest.json"),
            config: dir.join("config.toml"),
            partition: dir.join("partition.json"),
            rounds_csv: dir.join("rounds.csv"),
            summary: dir.join("summary.json"),
            ensembles: dir.join("ensembles"),
            reliability: dir.join("reliability"),
        }
    }

    pub fn client_ensemble(&self, k: usize) -> PathBuf {
        self.ensembles.join(format!("client_{k:03}.fwba"))
    }

    pub fn global_ensemble(&self) -> PathBuf {
        self.ensembles.join("global.fwba")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub rng: &'static str,
    pub config: RunConfig,
    pub artifacts: ArtifactPaths,
    pub csv_version: u32,
    pub csv_columns: Vec<&'static str>,
    pub message_size: usize,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub final_mean_acc: f64,
    pub final_mean_ece: f64,
    pub final_scheduled_mean_acc: f64,
    pub final_scheduled_mean_ece: f64,
    pub first_round_mean_acc: f64,
    pub rounds: usize,
    pub comm_bytes_total: u64,
    pub message_size: usize,
    pub wall_ms_total: f64,
    pub wall_ms_per_round: Vec<f64>,
}

impl RunSummary {
    pub fn from_reports(reports: &[RoundReport], message_size: usize) -> Result<Self> {
        let (first, last) = match (reports.first(), reports.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::EmptyInput("round reports")),
        };
        let wall: Vec<f64> = reports.iter().map(|r| r.wall_ms).collect();
        Ok(Self {
            final_mean_acc: last.mean_accuracy,
            final_mean_ece: last.mean_ece,
            final_scheduled_mean_acc: last.scheduled_mean_accuracy,
            final_scheduled_mean_ece: last.scheduled_mean_ece,
            first_round_mean_acc: first.mean_accuracy,
            rounds: reports.len(),
            comm_bytes_total: reports.iter().map(|r| r.comm_bytes).sum(),
            message_size,
            wall_ms_total: wall.iter().sum(),
            wall_ms_per_round: wall,
        })
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Appends the per-client rows of one round.
pub fn write_round_rows<W: Write>(out: &mut W, r: &RoundReport) -> std::io::Result<()> {
    for (k, (acc, ece)) in r.per_client_accuracy.iter().zip(&r.per_client_ece).enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.round,
            k,
            u8::from(r.scheduled_clients.contains(&k)),
            u8::from(r.missing_clients.contains(&k)),
            acc,
            ece,
            r.mean_accuracy,
            r.mean_ece,
            r.mean_w2_client_to_global,
            r.comm_bytes
        )?;
    }
    Ok(())
}

pub struct RunOutput {
    pub outcome: ExperimentOutcome,
    pub summary: RunSummary,
    pub paths: ArtifactPaths,
}

/// Loads data, runs the experiment and persists every artifact under `dir`.
pub fn run_to_dir(config: &RunConfig, dir: &Path, exec: Exec) -> Result<RunOutput> {
    let paths = ArtifactPaths::new(dir);
    for d in [dir, paths.ensembles.as_path(), paths.reliability.as_path()] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let data = config.load_dataset()?;
    let shape = config.shape_for(&data)?;
    let shards = config.partition(&data)?;
    let fed = config.federation_config();
    let msg_size = message_size(fed.particles, shape.flat_len());

    write_file(&paths.config, config.to_toml_string()?.as_bytes())?;
    write_json(&paths.partition, &partition_manifest(&shards))?;
    let mut manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: fed.seed,
        rng: crate::numerics::SeededRng::ALGORITHM,
        config: config.clone(),
        artifacts: paths.clone(),
        csv_version: CSV_VERSION,
        csv_columns: ROUNDS_CSV_COLUMNS.to_vec(),
        message_size: msg_size,
        started_unix_ms: now_ms(),
        finished_unix_ms: None,
    };
    write_json(&paths.manifest, &manifest)?;

    let csv_path = &paths.rounds_csv;
    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{}", ROUNDS_CSV_COLUMNS.join(",")).map_err(|e| Error::io(csv_path, e))?;
    let outcome = run_experiment(&fed, shape, shards, exec, |report, _, _| {
        write_round_rows(&mut csv, report)
            .and_then(|_| csv.flush())
            .map_err(|e| Error::io(csv_path, e))
    })?;
    drop(csv);

    let last_round = outcome.server.round as u32;
    write_file(
        &paths.global_ensemble(),
        &wire::encode(last_round, wire::BROADCAST_ID, &outcome.server.global)?,
    )?;
    for c in &outcome.clients {
        write_file(
            &paths.client_ensemble(c.id()),
            &wire::encode(last_round, c.id() as u32, &c.particles)?,
        )?;
    }
    for (k, bins) in outcome.final_report().reliability.iter().enumerate() {
        let p = paths.reliability.join(format!("client_{k:03}.csv"));
        let mut buf = Vec::new();
        bins.write_csv(&mut buf).map_err(|e| Error::io(&p, e))?;
        write_file(&p, &buf)?;
    }
    let summary = RunSummary::from_reports(&outcome.reports, msg_size)?;
    write_json(&paths.summary, &summary)?;
    manifest.finished_unix_ms = Some(now_ms());
    write_json(&paths.manifest, &manifest)?;
    Ok(RunOutput {
        outcome,
        summary,
        paths,
    })
}
