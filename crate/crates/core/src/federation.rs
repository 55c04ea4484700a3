//! In-process simulation of the client/server protocol. Every hop goes
//! through the binary wire format, even though both ends live in one process.

use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::barycenter::{aggregate, param_average, AggregationConfig};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::kde::{GlobalPrior, DEFAULT_KDE_BANDWIDTH};
use crate::metrics::{evaluate, ReliabilityBins};
use crate::model::{grad_log_likelihood, grad_log_likelihood_indices, MlpShape};
use crate::numerics::{Matrix, SeededRng};
use crate::ot::w2_distance;
use crate::par::Exec;
use crate::svgd::{run_svgd_from, Score, SvgdConfig, SvgdState};
use crate::wire::{BroadcastMsg, UploadMsg};

const INIT_STREAM: u64 = 1;
const SCHEDULE_STREAM: u64 = 2;
const PARTITION_STREAM: u64 = 3;
const CLIENT_STREAM_BIT: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Wasserstein barycenter of the uploaded ensembles.
    #[default]
    Wba,
    /// Element-wise average of particle `i` across uploads.
    ParamAvg,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// KDE over the broadcast global particles.
    #[default]
    Kde,
    /// Flat prior: local likelihood only.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Each client scores its own latest local ensemble.
    #[default]
    Local,
    /// Each client scores the aggregated global ensemble.
    Global,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientWeighting {
    #[default]
    Uniform,
    /// Proportional to the client's training-set size.
    DataSize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub sample_size: usize,
    pub rounds: usize,
    pub particles: usize,
    pub kde_bandwidth: f64,
    pub init_scale: f64,
    pub seed: u64,
    pub mode: AggregationMode,
    pub prior: PriorMode,
    pub eval: EvalMode,
    pub weighting: ClientWeighting,
    pub svgd: SvgdConfig,
    pub aggregation: AggregationConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            sample_size: 2,
            rounds: 50,
            particles: 10,
            kde_bandwidth: DEFAULT_KDE_BANDWIDTH,
            init_scale: 0.1,
            seed: 0,
            mode: AggregationMode::default(),
            prior: PriorMode::default(),
            eval: EvalMode::default(),
            weighting: ClientWeighting::default(),
            svgd: SvgdConfig::default(),
            aggregation: AggregationConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("federation.num_clients", "must be >= 1"));
        }
        if self.sample_size == 0 || self.sample_size > self.num_clients {
            return Err(Error::config(
                "federation.sample_size",
                format!("must be in 1..={}, got {}", self.num_clients, self.sample_size),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("federation.rounds", "must be >= 1"));
        }
        if self.particles == 0 {
            return Err(Error::config("federation.particles", "must be >= 1"));
        }
        if !(self.kde_bandwidth > 0.0 && self.kde_bandwidth.is_finite()) {
            return Err(Error::config("federation.kde_bandwidth", "must be > 0"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("federation.init_scale", "must be >= 0"));
        }
        self.svgd.validate()?;
        self.aggregation.validate()?;
        if let Some(w) = &self.aggregation.client_weights {
            if w.len() != self.num_clients {
                return Err(Error::config(
                    "aggregation.client_weights",
                    format!("{} weights for {} clients", w.len(), self.num_clients),
                ));
            }
        }
        Ok(())
    }

    /// Bytes moved per round when every scheduled client uploads.
    pub fn comm_bytes_per_round(&self, dim: usize) -> u64 {
        (self.sample_size * 2 * crate::wire::message_size(self.particles, dim)) as u64
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: Matrix,
    /// Rounds completed so far.
    pub round: usize,
    schedule_rng: SeededRng,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub shard: ClientShard,
    pub particles: Matrix,
    pub times_scheduled: usize,
}

impl ClientState {
    pub fn id(&self) -> usize {
        self.shard.client_id
    }
}

/// `grad log p(theta | D) = grad log prior(theta) + grad log p(D | theta)`.
/// With a minibatch of size `b < |D|`, the likelihood term is the
/// `|D| / b`-scaled sum over a batch drawn from the per-iteration `draw`.
pub struct PosteriorScore<'a> {
    pub shape: MlpShape,
    pub data: &'a Dataset,
    pub prior: Option<&'a GlobalPrior>,
    pub minibatch: Option<usize>,
}

impl PosteriorScore<'_> {
    fn batch(&self, draw: u64) -> Option<Vec<usize>> {
        let n = self.data.len();
        let b = self.minibatch.filter(|&b| b < n)?;
        let mut idx = sample(&mut SeededRng::new(draw), n, b).into_vec();
        idx.sort_unstable();
        Some(idx)
    }
}

impl Score for PosteriorScore<'_> {
    fn score(&self, theta: &[f64], draw: u64) -> Result<Vec<f64>> {
        let mut g = match self.batch(draw) {
            Some(idx) => {
                let scale = self.data.len() as f64 / idx.len() as f64;
                grad_log_likelihood_indices(&self.shape, theta, self.data, &idx, scale)?
            }
            None => grad_log_likelihood(&self.shape, theta, self.data)?,
        };
        if let Some(prior) = self.prior {
            for (a, b) in g.iter_mut().zip(prior.grad_log_density(theta)?) {
                *a += b;
            }
        }
        Ok(g)
    }
}

/// Draws the initial global and local ensembles i.i.d. from `N(0, init_scale^2 I)`.
pub fn init_run(config: &FederationConfig, shape: MlpShape, shards: Vec<ClientShard>) -> Result<(ServerState, Vec<ClientState>)> {
    config.validate()?;
    if shards.len() != config.num_clients {
        return Err(Error::config(
            "federation.num_clients",
            format!("{} shards for {} clients", shards.len(), config.num_clients),
        ));
    }
    for (k, s) in shards.iter().enumerate() {
        if s.client_id != k {
            return Err(Error::Partition(format!("shard {k} carries client id {}", s.client_id)));
        }
        for (name, d) in [("train", &s.train), ("test", &s.test)] {
            if d.is_empty() {
                return Err(Error::Partition(format!("client {k} has an empty {name} shard")));
            }
            if d.dim() != shape.input_dim || d.classes() > shape.classes {
                return Err(Error::DimensionMismatch(format!(
                    "client {k} {name} data (dim {}, {} classes) for model {shape:?}",
                    d.dim(),
                    d.classes()
                )));
            }
        }
    }
    let root = SeededRng::new(config.seed);
    let mut init = root.derive(INIT_STREAM);
    let (n, m) = (config.particles, shape.flat_len());
    let global = init.normal_matrix(n, m, 0.0, config.init_scale);
    let clients = shards
        .into_iter()
        .map(|shard| ClientState {
            shard,
            particles: init.normal_matrix(n, m, 0.0, config.init_scale),
            times_scheduled: 0,
        })
        .collect();
    let server = ServerState {
        global,
        round: 0,
        schedule_rng: root.derive(SCHEDULE_STREAM),
    };
    Ok((server, clients))
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub scheduled_clients: Vec<usize>,
    pub missing_clients: Vec<usize>,
    pub per_client_accuracy: Vec<f64>,
    pub per_client_ece: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_ece: f64,
    pub scheduled_mean_accuracy: f64,
    pub scheduled_mean_ece: f64,
    /// Mean exact W2 from each received upload to the new global ensemble.
    pub mean_w2_client_to_global: f64,
    pub comm_bytes: u64,
    pub wall_ms: f64,
    #[serde(skip)]
    pub reliability: Vec<ReliabilityBins>,
    /// `(client, error)` for every scheduled client whose upload is missing.
    pub failures: Vec<(usize, String)>,
}

fn client_rng(seed: u64, round: usize, client: usize) -> SeededRng {
    SeededRng::new(seed).derive(CLIENT_STREAM_BIT | ((round as u64) << 32) | client as u64)
}

struct LocalResult {
    particles: Matrix,
    upload: Vec<u8>,
}

fn local_update(
    client: &ClientState,
    broadcast: &[u8],
    config: &FederationConfig,
    shape: MlpShape,
    round: usize,
    exec: Exec,
) -> Result<LocalResult> {
    let msg = BroadcastMsg::decode(broadcast)?;
    if msg.particles.shape() != client.particles.shape() {
        return Err(Error::DimensionMismatch(format!(
            "broadcast {:?} for local ensemble {:?}",
            msg.particles.shape(),
            client.particles.shape()
        )));
    }
    let prior = match config.prior {
        PriorMode::Kde => Some(GlobalPrior::new(msg.particles, config.kde_bandwidth)?),
        PriorMode::None => None,
    };
    let score = PosteriorScore {
        shape,
        data: &client.shard.train,
        prior: prior.as_ref(),
        minibatch: config.svgd.minibatch,
    };
    let mut rng = client_rng(config.seed, round, client.id());
    let mut state = SvgdState::new(client.particles.clone());
    run_svgd_from(&mut state, &score, &config.svgd, &mut rng, exec, |_, _| {})?;
    let upload = UploadMsg {
        round: round as u32,
        client_id: client.id() as u32,
        particles: state.particles.clone(),
    }
    .encode()?;
    Ok(LocalResult {
        particles: state.particles,
        upload,
    })
}

fn upload_weights(config: &FederationConfig, clients: &[ClientState], received: &[usize]) -> Result<Option<Vec<f64>>> {
    let raw: Vec<f64> = match (&config.aggregation.client_weights, config.weighting) {
        (Some(w), _) => received.iter().map(|&k| w[k]).collect(),
        (None, ClientWeighting::DataSize) => received.iter().map(|&k| clients[k].shard.train.len() as f64).collect(),
        (None, ClientWeighting::Uniform) => return Ok(None),
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::config("aggregation.client_weights", "received clients have zero total weight"));
    }
    Ok(Some(raw.iter().map(|w| w / total).collect()))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// One communication round: schedule, broadcast, local SVGD, upload,
/// aggregate, then evaluate every client.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    config: &FederationConfig,
    shape: MlpShape,
    exec: Exec,
) -> Result<RoundReport> {
    let start = Instant::now();
    let round = server.round + 1;
    let k = clients.len();
    if k != config.num_clients {
        return Err(Error::config("federation.num_clients", format!("{k} client states")));
    }
    let mut scheduled = sample(&mut server.schedule_rng, k, config.sample_size).into_vec();
    scheduled.sort_unstable();

    let broadcast = BroadcastMsg {
        round: round as u32,
        particles: server.global.clone(),
    }
    .encode()?;
    let mut comm_bytes = (broadcast.len() * scheduled.len()) as u64;

    let results = {
        let clients = &*clients;
        exec.map(&scheduled, |&id| local_update(&clients[id], &broadcast, config, shape, round, exec))
    };

    let mut received = Vec::new();
    let mut uploads = Vec::new();
    let mut failures = Vec::new();
    for (&id, result) in scheduled.iter().zip(results) {
        clients[id].times_scheduled += 1;
        let decoded = result.and_then(|r| {
            let msg = UploadMsg::decode(&r.upload)?;
            if msg.client_id as usize != id || msg.round as usize != round {
                return Err(Error::Wire(format!(
                    "upload tagged client {} round {} from client {id} in round {round}",
                    msg.client_id, msg.round
                )));
            }
            Ok((r, msg))
        });
        match decoded {
            Ok((r, msg)) => {
                comm_bytes += r.upload.len() as u64;
                clients[id].particles = r.particles;
                received.push(id);
                uploads.push(msg.particles);
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    if uploads.is_empty() {
        return Err(Error::NoUploads(scheduled.len()));
    }

    let weights = upload_weights(config, clients, &received)?;
    let agg = AggregationConfig {
        fixed_point_iters: config.aggregation.fixed_point_iters,
        client_weights: weights.clone(),
    };
    server.global = match config.mode {
        AggregationMode::Wba => aggregate(&server.global, &uploads, &agg, exec)?,
        AggregationMode::ParamAvg => param_average(&uploads, weights.as_deref())?,
    };
    server.round = round;

    let w2s = exec
        .map(&uploads, |u| w2_distance(u, &server.global))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let evals = {
        let global = &server.global;
        exec.map(clients, |c| {
            let particles = match config.eval {
                EvalMode::Local => &c.particles,
                EvalMode::Global => global,
            };
            evaluate(particles, &c.shard.test, &shape, Exec::Sequential)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
    };
    let per_client_accuracy: Vec<f64> = evals.iter().map(|e| e.accuracy).collect();
    let per_client_ece: Vec<f64> = evals.iter().map(|e| e.ece).collect();
    let missing_clients = failures.iter().map(|(id, _)| *id).collect();
    Ok(RoundReport {
        round,
        mean_accuracy: mean(per_client_accuracy.iter().copied()),
        mean_ece: mean(per_client_ece.iter().copied()),
        scheduled_mean_accuracy: mean(scheduled.iter().map(|&i| per_client_accuracy[i])),
        scheduled_mean_ece: mean(scheduled.iter().map(|&i| per_client_ece[i])),
        scheduled_clients: scheduled,
        missing_clients,
        per_client_accuracy,
        per_client_ece,
        mean_w2_client_to_global: mean(w2s),
        comm_bytes,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        reliability: evals.into_iter().map(|e| e.reliability).collect(),
        failures,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl ExperimentOutcome {
    pub fn final_report(&self) -> &RoundReport {
        self.reports.last().expect("at least one round")
    }

    pub fn comm_bytes_total(&self) -> u64 {
        self.reports.iter().map(|r| r.comm_bytes).sum()
    }
}

/// Runs `config.rounds` rounds, handing each report to `on_round` as soon as
/// it is produced.
pub fn run_experiment<F>(
    config: &FederationConfig,
    shape: MlpShape,
    shards: Vec<ClientShard>,
    exec: Exec,
    mut on_round: F,
) -> Result<ExperimentOutcome>
where
    F: FnMut(&RoundReport, &ServerState, &[ClientState]) -> Result<()>,
{
    let (mut server, mut clients) = init_run(config, shape, shards)?;
    let mut reports = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let report = run_round(&mut server, &mut clients, config, shape, exec)?;
        on_round(&report, &server, &clients)?;
        reports.push(report);
    }
    Ok(ExperimentOutcome {
        reports,
        server,
        clients,
    })
}

/// Generator for the data partition, kept apart from the protocol streams.
pub fn partition_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed).derive(PARTITION_STREAM)
}
