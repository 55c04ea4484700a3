//! Free-support Wasserstein barycenter of equally sized particle clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::ot::{cost_matrix, solve_exact, TransportPlan};
use crate::par::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub fixed_point_iters: usize,
    /// One weight per client id; `None` means uniform over the received uploads.
    pub client_weights: Option<Vec<f64>>,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            fixed_point_iters: 1,
            client_weights: None,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fixed_point_iters == 0 {
            return Err(Error::config("aggregation.fixed_point_iters", "must be >= 1"));
        }
        if let Some(w) = &self.client_weights {
            check_weights(w).map_err(|reason| Error::config("aggregation.client_weights", reason))?;
        }
        Ok(())
    }
}

fn check_weights(w: &[f64]) -> std::result::Result<(), String> {
    if w.is_empty() {
        return Err("no weights".into());
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(format!("weight {bad} is not a finite nonnegative number"));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(format!("weights sum to {total}, expected 1"));
    }
    Ok(())
}

/// Result of one [`aggregate_detailed`] call.
#[derive(Clone, Debug)]
pub struct Aggregation {
    pub particles: Matrix,
    /// Plans from the last fixed-point iteration, one per client.
    pub plans: Vec<TransportPlan>,
    /// Barycenter objective under freshly solved plans, before the first
    /// update and after every iteration (`fixed_point_iters + 1` values).
    pub objectives: Vec<f64>,
}

fn check_shapes(global: &Matrix, clients: &[Matrix]) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::EmptyInput("client ensembles"));
    }
    if let Some(bad) = clients.iter().find(|c| c.shape() != global.shape()) {
        return Err(Error::DimensionMismatch(format!(
            "client ensemble {:?} vs global {:?}",
            bad.shape(),
            global.shape()
        )));
    }
    if global.rows() == 0 {
        return Err(Error::EmptyInput("global ensemble"));
    }
    Ok(())
}

fn resolve_weights(weights: Option<&[f64]>, k: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / k as f64; k]),
        Some(w) => {
            if w.len() != k {
                return Err(Error::config(
                    "aggregation.client_weights",
                    format!("{} weights for {k} ensembles", w.len()),
                ));
            }
            check_weights(w).map_err(|reason| Error::config("aggregation.client_weights", reason))?;
            Ok(w.to_vec())
        }
    }
}

fn solve_plans(global: &Matrix, clients: &[Matrix], exec: Exec) -> Result<Vec<(TransportPlan, f64)>> {
    exec.map(clients, |c| solve_exact(&cost_matrix(global, c)?))
        .into_iter()
        .collect()
}

/// `Theta[i] = sum_k w_k Theta_k[sigma_k(i)]`, i.e. `sum_k w_k (N T_k) Theta_k`
/// for permutation plans.
fn project(clients: &[Matrix], plans: &[TransportPlan], weights: &[f64]) -> Result<Matrix> {
    let (n, m) = clients[0].shape();
    let mut out = Matrix::zeros(n, m);
    for ((client, plan), &w) in clients.iter().zip(plans).zip(weights) {
        for (i, &j) in plan.assignment.iter().enumerate() {
            for (o, c) in out.row_mut(i).iter_mut().zip(client.row(j)) {
                *o += w * c;
            }
        }
    }
    Ok(out)
}

/// Weighted barycenter support update; `config.client_weights`, if present,
/// must have one entry per ensemble in `clients`.
pub fn aggregate(global: &Matrix, clients: &[Matrix], config: &AggregationConfig, exec: Exec) -> Result<Matrix> {
    Ok(aggregate_detailed(global, clients, config.fixed_point_iters, config.client_weights.as_deref(), exec)?.particles)
}

pub fn aggregate_detailed(
    global: &Matrix,
    clients: &[Matrix],
    fixed_point_iters: usize,
    weights: Option<&[f64]>,
    exec: Exec,
) -> Result<Aggregation> {
    check_shapes(global, clients)?;
    if fixed_point_iters == 0 {
        return Err(Error::config("aggregation.fixed_point_iters", "must be >= 1"));
    }
    let weights = resolve_weights(weights, clients.len())?;
    let weighted = |solved: &[(TransportPlan, f64)]| solved.iter().zip(&weights).map(|((_, o), w)| w * o).sum::<f64>();

    let mut current = global.clone();
    let mut solved = solve_plans(&current, clients, exec)?;
    let mut objectives = vec![weighted(&solved)];
    let mut plans = Vec::new();
    for _ in 0..fixed_point_iters {
        plans = solved.iter().map(|(p, _)| p.clone()).collect();
        current = project(clients, &plans, &weights)?;
        solved = solve_plans(&current, clients, exec)?;
        objectives.push(weighted(&solved));
    }
    Ok(Aggregation {
        particles: current,
        plans,
        objectives,
    })
}

/// `(1/K) sum_k <M_k, T_k>_F` with `M_k = cost_matrix(global, client_k)`.
pub fn objective_value(global: &Matrix, clients: &[Matrix], plans: &[TransportPlan]) -> Result<f64> {
    weighted_objective_value(global, clients, plans, None)
}

pub fn weighted_objective_value(
    global: &Matrix,
    clients: &[Matrix],
    plans: &[TransportPlan],
    weights: Option<&[f64]>,
) -> Result<f64> {
    check_shapes(global, clients)?;
    if plans.len() != clients.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} plans for {} ensembles",
            plans.len(),
            clients.len()
        )));
    }
    let weights = resolve_weights(weights, clients.len())?;
    let mut total = 0.0;
    for ((client, plan), w) in clients.iter().zip(plans).zip(weights) {
        total += w * plan.cost(&cost_matrix(global, client)?)?;
    }
    Ok(total)
}

/// Baseline: row-by-row average `theta_i = sum_k w_k theta_{k,i}` with no matching.
pub fn param_average(clients: &[Matrix], weights: Option<&[f64]>) -> Result<Matrix> {
    let first = clients.first().ok_or(Error::EmptyInput("client ensembles"))?;
    check_shapes(first, clients)?;
    let weights = resolve_weights(weights, clients.len())?;
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (c, w) in clients.iter().zip(weights) {
        for (o, v) in out.as_mut_slice().iter_mut().zip(c.as_slice()) {
            *o += w * v;
        }
    }
    Ok(out)
}
