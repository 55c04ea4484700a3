//! Oracle suites for the convergence properties: per-iteration KL decrease of
//! local SVGD, contraction of the aggregated barycenter toward the true
//! parameter as client data grows, and exactness of the transport solver.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::barycenter::{aggregate, AggregationConfig};
use crate::error::Result;
use crate::metrics::{gaussian_fit_kl, w2_to_point};
use crate::numerics::{cholesky, cholesky_inverse, median, Matrix, SeededRng};
use crate::ot::{brute_force_objective, cost_matrix, solve_exact};
use crate::par::Exec;
use crate::svgd::{run_svgd_from, SvgdConfig, SvgdState};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    /// Headline statistic compared against the pass threshold.
    pub statistic: String,
    pub elapsed_ms: f64,
}

/// Conjugate 2D Gaussian: data `x_i ~ N(theta, S)`, prior `N(0, tau^2 I)`,
/// analytic posterior `N(mu, P^-1)` with `P = I / tau^2 + n S^-1`.
#[derive(Clone, Debug)]
pub struct ConjugateGaussian {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    precision: Matrix,
}

impl ConjugateGaussian {
    pub fn sample(n: usize, rng: &mut SeededRng) -> Result<Self> {
        let theta = [1.0, -0.5];
        let s = Matrix::from_rows(&[[1.0, 0.6], [0.6, 0.8]])?;
        let tau2 = 4.0;
        let ls = cholesky(&s)?;
        let s_inv = cholesky_inverse(&ls);
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let z = [rng.standard_normal(), rng.standard_normal()];
            // x = theta + L z
            sum[0] += theta[0] + ls.get(0, 0) * z[0];
            sum[1] += theta[1] + ls.get(1, 0) * z[0] + ls.get(1, 1) * z[1];
        }
        let nf = n as f64;
        let mut precision = Matrix::zeros(2, 2);
        for a in 0..2 {
            for b in 0..2 {
                let prior = if a == b { 1.0 / tau2 } else { 0.0 };
                precision.set(a, b, prior + nf * s_inv.get(a, b));
            }
        }
        let cov = cholesky_inverse(&cholesky(&precision)?);
        // mu = P^-1 S^-1 sum(x)
        let rhs: Vec<f64> = (0..2).map(|a| (0..2).map(|b| s_inv.get(a, b) * sum[b]).sum()).collect();
        let mean = (0..2).map(|a| (0..2).map(|b| cov.get(a, b) * rhs[b]).sum()).collect();
        Ok(Self { mean, cov, precision })
    }

    pub fn score(&self, theta: &[f64]) -> Vec<f64> {
        (0..2)
            .map(|a| -(0..2).map(|b| self.precision.get(a, b) * (theta[b] - self.mean[b])).sum::<f64>())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct KlSuiteConfig {
    pub seeds: u64,
    pub particles: usize,
    pub data_points: usize,
    pub svgd: SvgdConfig,
    pub burn_in: usize,
    pub min_nonincreasing: f64,
    pub max_final_ratio: f64,
    /// Slack on "nonincreasing" for floating-point noise at convergence.
    pub tolerance: f64,
}

impl Default for KlSuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            particles: 50,
            data_points: 20,
            svgd: SvgdConfig {
                iterations: 1000,
                step_eta: 0.3,
                momentum: 0.0,
                ..SvgdConfig::default()
            },
            burn_in: 20,
            min_nonincreasing: 0.95,
            max_final_ratio: 0.05,
            tolerance: 1e-12,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct KlSeedStats {
    pub seed: u64,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub nonincreasing_fraction: f64,
}

/// KL trace for one seed: entry 0 is the initial ensemble, entry `l` the
/// ensemble after iteration `l`.
pub fn kl_trace(config: &KlSuiteConfig, seed: u64) -> Result<(Vec<f64>, ConjugateGaussian)> {
    let mut rng = SeededRng::new(seed);
    let target = ConjugateGaussian::sample(config.data_points, &mut rng)?;
    let init = Matrix::from_vec(
        config.particles,
        2,
        (0..config.particles * 2)
            .map(|i| rng.standard_normal() + if i % 2 == 0 { -3.0 } else { 2.0 })
            .collect(),
    )?;
    let mut kls = vec![gaussian_fit_kl(&init, &target.mean, &target.cov)?];
    let mut err = None;
    let mut state = SvgdState::new(init);
    let score = |t: &[f64]| Ok(target.score(t));
    run_svgd_from(&mut state, &score, &config.svgd, &mut rng, Exec::Sequential, |_, p| {
        match gaussian_fit_kl(p, &target.mean, &target.cov) {
            Ok(k) => kls.push(k),
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok((kls, target))
}

pub fn kl_seed_stats(config: &KlSuiteConfig, seed: u64) -> Result<KlSeedStats> {
    let (kls, _) = kl_trace(config, seed)?;
    // steps l -> l+1 with l >= burn_in
    let steps: Vec<bool> = kls
        .windows(2)
        .skip(config.burn_in)
        .map(|w| w[1] <= w[0] + config.tolerance)
        .collect();
    let ok = steps.iter().filter(|b| **b).count();
    Ok(KlSeedStats {
        seed,
        initial_kl: kls[0],
        final_kl: *kls.last().unwrap_or(&f64::NAN),
        nonincreasing_fraction: if steps.is_empty() { 1.0 } else { ok as f64 / steps.len() as f64 },
    })
}

pub fn kl_suite(config: &KlSuiteConfig) -> Result<(SuiteReport, Vec<KlSeedStats>)> {
    let start = Instant::now();
    let stats = (0..config.seeds)
        .map(|s| kl_seed_stats(config, s))
        .collect::<Result<Vec<_>>>()?;
    let worst_frac = stats.iter().map(|s| s.nonincreasing_fraction).fold(f64::INFINITY, f64::min);
    let worst_ratio = stats
        .iter()
        .map(|s| s.final_kl / s.initial_kl)
        .fold(f64::NEG_INFINITY, f64::max);
    let passed = stats
        .iter()
        .all(|s| s.nonincreasing_fraction >= config.min_nonincreasing && s.final_kl.is_finite())
        && worst_ratio < config.max_final_ratio;
    Ok((
        SuiteReport {
            name: "kl-monotonicity",
            passed,
            statistic: format!(
                "min nonincreasing fraction {worst_frac:.4} (need >= {}), max final/initial KL {worst_ratio:.3e} (need < {})",
                config.min_nonincreasing, config.max_final_ratio
            ),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        stats,
    ))
}

#[derive(Clone, Debug)]
pub struct ContractionConfig {
    pub clients: usize,
    pub particles: usize,
    pub data_sizes: Vec<usize>,
    pub seeds: u64,
    pub true_mean: f64,
    pub noise_std: f64,
    pub prior_std: f64,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            particles: 10,
            data_sizes: vec![10, 100, 1000],
            seeds: 10,
            true_mean: 1.5,
            noise_std: 1.0,
            prior_std: 1.0,
        }
    }
}

/// Barycenter of `clients` conjugate posteriors of a 1D Gaussian mean, each
/// built from `s` observations and represented by `particles` posterior draws.
pub fn contraction_w2(config: &ContractionConfig, s: usize, seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed).derive(s as u64);
    let (sig2, tau2) = (config.noise_std.powi(2), config.prior_std.powi(2));
    let n = config.particles;
    let mut ensembles = Vec::with_capacity(config.clients);
    for _ in 0..config.clients {
        let sum: f64 = (0..s)
            .map(|_| config.true_mean + config.noise_std * rng.standard_normal())
            .sum();
        let var = 1.0 / (1.0 / tau2 + s as f64 / sig2);
        let mean = var * sum / sig2;
        ensembles.push(rng.normal_matrix(n, 1, mean, var.sqrt()));
    }
    let init = rng.normal_matrix(n, 1, 0.0, config.prior_std);
    let bary = aggregate(&init, &ensembles, &AggregationConfig::default(), Exec::Sequential)?;
    w2_to_point(&bary, &[config.true_mean])
}

pub fn contraction_suite(config: &ContractionConfig) -> Result<(SuiteReport, Vec<f64>)> {
    let start = Instant::now();
    let mut medians = Vec::new();
    for &s in &config.data_sizes {
        let w: Vec<f64> = (0..config.seeds)
            .map(|seed| contraction_w2(config, s, seed))
            .collect::<Result<_>>()?;
        medians.push(median(&w)?);
    }
    let passed = medians.windows(2).all(|w| w[1] < w[0]);
    Ok((
        SuiteReport {
            name: "barycenter-contraction",
            passed,
            statistic: format!("median W2 to truth at s={:?}: {:?} (need strictly decreasing)", config.data_sizes, medians),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        medians,
    ))
}

#[derive(Clone, Debug)]
pub struct OtOracleConfig {
    pub instances: usize,
    pub sizes: std::ops::RangeInclusive<usize>,
    pub dims: Vec<usize>,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for OtOracleConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            sizes: 2..=6,
            dims: vec![1, 2, 5],
            tolerance: 1e-9,
            seed: 0,
        }
    }
}

pub fn ot_oracle_suite(config: &OtOracleConfig) -> Result<(SuiteReport, f64)> {
    let start = Instant::now();
    let mut rng = SeededRng::new(config.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..config.instances {
        let n = rng.random_range(config.sizes.clone());
        let m = config.dims[rng.random_range(0..config.dims.len())];
        let scale = 10f64.powf(rng.random_range(-1.0..1.0));
        let a = rng.normal_matrix(n, m, 0.0, scale);
        let offset = rng.standard_normal();
        let b = rng.normal_matrix(n, m, offset, scale);
        let cost = cost_matrix(&a, &b)?;
        let (_, obj) = solve_exact(&cost)?;
        worst = worst.max((obj - brute_force_objective(&cost)?).abs());
    }
    let passed = worst <= config.tolerance;
    Ok((
        SuiteReport {
            name: "ot-oracle",
            passed,
            statistic: format!(
                "max |exact - brute force| {worst:.3e} over {} instances (need <= {:e})",
                config.instances, config.tolerance
            ),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        },
        worst,
    ))
}

/// All three suites with default settings; `kl_eta` overrides the KL suite's
/// step size.
pub fn run_all(kl_eta: Option<f64>) -> Result<Vec<SuiteReport>> {
    let mut kl = KlSuiteConfig::default();
    if let Some(eta) = kl_eta {
        kl.svgd.step_eta = eta;
    }
    let kl_report = match kl_suite(&kl) {
        Ok((r, _)) => r,
        // a diverging step size can push particles to non-finite values
        Err(e) => SuiteReport {
            name: "kl-monotonicity",
            passed: false,
            statistic: format!("run aborted: {e}"),
            elapsed_ms: 0.0,
        },
    };
    Ok(vec![
        kl_report,
        contraction_suite(&ContractionConfig::default())?.0,
        ot_oracle_suite(&OtOracleConfig::default())?.0,
    ])
}
