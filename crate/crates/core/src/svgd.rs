//! Stein variational gradient descent.
//!
//! The particle direction is
//! `phi(x_i) = 1/N sum_j [k(x_j, x_i) score(x_j) + grad_{x_j} k(x_j, x_i)]`,
//! and the applied step is AdaGrad on `phi` (accumulated squares, smoothing
//! `lambda`) followed by a heavy-ball velocity with coefficient `momentum`.
//! With `momentum = 0` this is plain AdaGrad ascent.
//!
//! Every supported kernel has a gradient of the form
//! `grad_{x_j} k(x_j, x_i) = a_ji x_j + b_ji x_i`, so the repulsive term is a
//! linear combination of particle rows and never needs an `N x N x M` tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, median, pairwise_sq_dists, Matrix, SeededRng};
use crate::par::Exec;
use rand::RngCore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SvgdKernel {
    /// `exp(-||x - y||^2 / h)`; `h` from the median heuristic when `None`.
    Rbf { bandwidth: Option<f64> },
    /// `exp(-||x - y|| / sqrt(h))`, same `h` as the RBF kernel.
    Laplacian { bandwidth: Option<f64> },
    /// `(x . y + 1)^degree`
    Polynomial { degree: u32 },
    /// `tanh(scale x . y + bias)`; not positive definite.
    Sigmoid { scale: f64, bias: f64 },
}

impl Default for SvgdKernel {
    fn default() -> Self {
        SvgdKernel::Rbf { bandwidth: None }
    }
}

impl SvgdKernel {
    pub const POLYNOMIAL_DEFAULT: SvgdKernel = SvgdKernel::Polynomial { degree: 2 };
    pub const SIGMOID_DEFAULT: SvgdKernel = SvgdKernel::Sigmoid {
        scale: 1.0,
        bias: 0.0,
    };

    pub fn name(&self) -> &'static str {
        match self {
            SvgdKernel::Rbf { .. } => "rbf",
            SvgdKernel::Laplacian { .. } => "laplacian",
            SvgdKernel::Polynomial { .. } => "polynomial",
            SvgdKernel::Sigmoid { .. } => "sigmoid",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SvgdKernel::Rbf { bandwidth } | SvgdKernel::Laplacian { bandwidth } => {
                if let Some(h) = bandwidth {
                    if !(h > 0.0 && h.is_finite()) {
                        return Err(Error::config("svgd.kernel.bandwidth", "must be > 0"));
                    }
                }
            }
            SvgdKernel::Polynomial { degree } => {
                if degree < 1 {
                    return Err(Error::config("svgd.kernel.degree", "must be >= 1"));
                }
            }
            SvgdKernel::Sigmoid { scale, bias } => {
                if scale == 0.0 || !scale.is_finite() || !bias.is_finite() {
                    return Err(Error::config("svgd.kernel.scale", "must be finite and nonzero"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvgdConfig {
    pub iterations: usize,
    pub step_eta: f64,
    pub adagrad_lambda: f64,
    pub momentum: f64,
    pub minibatch: Option<usize>,
    pub kernel: SvgdKernel,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            step_eta: 0.01,
            adagrad_lambda: 1e-8,
            momentum: 0.9,
            minibatch: None,
            kernel: SvgdKernel::default(),
        }
    }
}

impl SvgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::config("svgd.iterations", "must be >= 1"));
        }
        if !(self.step_eta > 0.0 && self.step_eta.is_finite()) {
            return Err(Error::config("svgd.step_eta", "must be > 0"));
        }
        if !(self.adagrad_lambda > 0.0 && self.adagrad_lambda.is_finite()) {
            return Err(Error::config("svgd.adagrad_lambda", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("svgd.momentum", "must be in [0, 1)"));
        }
        if self.minibatch == Some(0) {
            return Err(Error::config("svgd.minibatch", "must be >= 1 when set"));
        }
        self.kernel.validate()
    }
}

/// Particles plus the AdaGrad accumulator and momentum velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct SvgdState {
    pub particles: Matrix,
    pub grad_accum: Matrix,
    pub velocity: Matrix,
}

impl SvgdState {
    pub fn new(particles: Matrix) -> Self {
        let (n, m) = particles.shape();
        Self {
            particles,
            grad_accum: Matrix::zeros(n, m),
            velocity: Matrix::zeros(n, m),
        }
    }
}

/// Target score `grad log p(theta)`. `draw` changes once per SVGD iteration
/// and is shared by all particles, so stochastic targets (minibatches) stay
/// deterministic under any worker count.
pub trait Score: Sync {
    fn score(&self, theta: &[f64], draw: u64) -> Result<Vec<f64>>;
}

impl<F> Score for F
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    fn score(&self, theta: &[f64], _draw: u64) -> Result<Vec<f64>> {
        self(theta)
    }
}

/// `h = med^2 / ln N` over pairwise Euclidean distances; 1.0 when `N = 1` or
/// all particles coincide.
pub fn median_bandwidth(particles: &Matrix) -> f64 {
    match pairwise_sq_dists(particles, particles) {
        Ok(d2) => median_bandwidth_from_sq(&d2),
        Err(_) => 1.0,
    }
}

fn median_bandwidth_from_sq(d2: &Matrix) -> f64 {
    let n = d2.rows();
    if n < 2 {
        return 1.0;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(d2.get(i, j).sqrt());
        }
    }
    let med = median(&dists).unwrap_or(0.0);
    if !(med > 0.0) || !med.is_finite() {
        return 1.0;
    }
    med * med / (n as f64).ln()
}

/// Kernel matrix and gradient coefficients for one particle set.
///
/// `values[j][i] = k(x_j, x_i)` and
/// `grad_{x_j} k(x_j, x_i) = self_coef[j][i] * x_j + other_coef[j][i] * x_i`.
#[derive(Clone, Debug)]
pub struct KernelEval {
    pub values: Matrix,
    pub self_coef: Matrix,
    pub other_coef: Matrix,
    /// Resolved bandwidth for RBF/Laplacian kernels.
    pub bandwidth: Option<f64>,
}

impl KernelEval {
    pub fn grad(&self, particles: &Matrix, j: usize, i: usize) -> Vec<f64> {
        let a = self.self_coef.get(j, i);
        let b = self.other_coef.get(j, i);
        particles
            .row(j)
            .iter()
            .zip(particles.row(i))
            .map(|(xj, xi)| a * xj + b * xi)
            .collect()
    }
}

pub fn evaluate_kernel(kernel: &SvgdKernel, particles: &Matrix) -> Result<KernelEval> {
    let n = particles.rows();
    if n == 0 {
        return Err(Error::EmptyInput("svgd particles"));
    }
    if !particles.is_finite() {
        return Err(Error::NonFinite("svgd particles"));
    }
    kernel.validate()?;
    let mut values = Matrix::zeros(n, n);
    let mut self_coef = Matrix::zeros(n, n);
    let mut other_coef = Matrix::zeros(n, n);
    let mut resolved = None;
    match *kernel {
        SvgdKernel::Rbf { bandwidth } | SvgdKernel::Laplacian { bandwidth } => {
            let d2 = pairwise_sq_dists(particles, particles)?;
            let h = bandwidth.unwrap_or_else(|| median_bandwidth_from_sq(&d2));
            resolved = Some(h);
            let laplacian = matches!(kernel, SvgdKernel::Laplacian { .. });
            let sigma = h.sqrt();
            for j in 0..n {
                for i in 0..n {
                    let r2 = d2.get(j, i);
                    let (k, a) = if laplacian {
                        let r = r2.sqrt();
                        let k = (-r / sigma).exp();
                        (k, if r > 0.0 { -k / (sigma * r) } else { 0.0 })
                    } else {
                        let k = (-r2 / h).exp();
                        (k, -2.0 * k / h)
                    };
                    values.set(j, i, k);
                    self_coef.set(j, i, a);
                    other_coef.set(j, i, -a);
                }
            }
        }
        SvgdKernel::Polynomial { degree } => {
            let d = f64::from(degree);
            for j in 0..n {
                for i in 0..n {
                    let s = dot(particles.row(j), particles.row(i)) + 1.0;
                    values.set(j, i, s.powi(degree as i32));
                    other_coef.set(j, i, d * s.powi(degree as i32 - 1));
                }
            }
        }
        SvgdKernel::Sigmoid { scale, bias } => {
            for j in 0..n {
                for i in 0..n {
                    let t = (scale * dot(particles.row(j), particles.row(i)) + bias).tanh();
                    values.set(j, i, t);
                    other_coef.set(j, i, scale * (1.0 - t * t));
                }
            }
        }
    }
    Ok(KernelEval {
        values,
        self_coef,
        other_coef,
        bandwidth: resolved,
    })
}

/// Kernel matrix plus explicit gradients: `grads[j]` has row `i` equal to
/// `grad_{x_j} k(x_j, x_i)`.
pub fn kernel_and_grad(kernel: &SvgdKernel, particles: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
    let eval = evaluate_kernel(kernel, particles)?;
    let n = particles.rows();
    let grads = (0..n)
        .map(|j| {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| eval.grad(particles, j, i)).collect();
            Matrix::from_rows(&rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((eval.values, grads))
}

/// The unscaled SVGD direction `phi` for every particle.
pub fn svgd_direction(
    particles: &Matrix,
    scores: &Matrix,
    kernel: &SvgdKernel,
    exec: Exec,
) -> Result<Matrix> {
    if particles.shape() != scores.shape() {
        return Err(Error::DimensionMismatch(format!(
            "scores {:?} for particles {:?}",
            scores.shape(),
            particles.shape()
        )));
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite("svgd score input"));
    }
    let eval = evaluate_kernel(kernel, particles)?;
    let (n, m) = particles.shape();
    let inv_n = 1.0 / n as f64;
    let rows = exec.map_range(n, |i| {
        let mut phi = vec![0.0; m];
        let mut other_total = 0.0;
        for j in 0..n {
            let k = eval.values.get(j, i);
            if k != 0.0 {
                axpy(k, scores.row(j), &mut phi);
            }
            // j == i folds into the row-i coefficient so the self term cancels exactly
            let a = eval.self_coef.get(j, i);
            if j == i {
                other_total += a;
            } else if a != 0.0 {
                axpy(a, particles.row(j), &mut phi);
            }
            other_total += eval.other_coef.get(j, i);
        }
        if other_total != 0.0 {
            axpy(other_total, particles.row(i), &mut phi);
        }
        phi.iter_mut().for_each(|v| *v *= inv_n);
        phi
    });
    Matrix::from_rows(&rows)
}

/// One SVGD iteration in place.
pub fn svgd_step(state: &mut SvgdState, scores: &Matrix, config: &SvgdConfig, exec: Exec) -> Result<()> {
    if state.grad_accum.shape() != state.particles.shape() || state.velocity.shape() != state.particles.shape() {
        return Err(Error::DimensionMismatch("svgd state buffers".into()));
    }
    let phi = svgd_direction(&state.particles, scores, &config.kernel, exec)?;
    let SvgdState {
        particles,
        grad_accum,
        velocity,
    } = state;
    for (((theta, g2), v), p) in particles
        .as_mut_slice()
        .iter_mut()
        .zip(grad_accum.as_mut_slice())
        .zip(velocity.as_mut_slice())
        .zip(phi.as_slice())
    {
        *g2 += p * p;
        let delta = config.step_eta * p / (*g2 + config.adagrad_lambda).sqrt();
        *v = config.momentum * *v + delta;
        *theta += *v;
    }
    if !state.particles.is_finite() {
        return Err(Error::NonFinite("particles after svgd step"));
    }
    Ok(())
}

/// Scores of every particle under one shared `draw`.
pub fn evaluate_scores<S: Score + ?Sized>(target: &S, particles: &Matrix, draw: u64, exec: Exec) -> Result<Matrix> {
    let rows = exec
        .map_range(particles.rows(), |i| target.score(particles.row(i), draw))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if rows.iter().any(|r| r.len() != particles.cols()) {
        return Err(Error::DimensionMismatch("score length differs from particle dimension".into()));
    }
    Matrix::from_rows(&rows)
}

/// Runs `config.iterations` steps starting from `state`, calling `observe`
/// after every step with the iteration index and the current particles.
pub fn run_svgd_from<S, O>(
    state: &mut SvgdState,
    target: &S,
    config: &SvgdConfig,
    rng: &mut SeededRng,
    exec: Exec,
    mut observe: O,
) -> Result<()>
where
    S: Score + ?Sized,
    O: FnMut(usize, &Matrix),
{
    config.validate()?;
    for it in 0..config.iterations {
        let draw = rng.next_u64();
        let scores = evaluate_scores(target, &state.particles, draw, exec)?;
        svgd_step(state, &scores, config, exec)?;
        observe(it, &state.particles);
    }
    Ok(())
}

/// Fresh-state SVGD run; the median bandwidth is recomputed every iteration.
pub fn run_svgd<S: Score + ?Sized>(
    init: Matrix,
    target: &S,
    config: &SvgdConfig,
    rng: &mut SeededRng,
    exec: Exec,
) -> Result<Matrix> {
    let mut state = SvgdState::new(init);
    run_svgd_from(&mut state, target, config, rng, exec, |_, _| {})?;
    Ok(state.particles)
}

/// Square root of the V-statistic estimate of the squared kernelized Stein
/// discrepancy. Supports the RBF and polynomial kernels.
pub fn ksd<S: Score + ?Sized>(particles: &Matrix, target: &S, kernel: &SvgdKernel) -> Result<f64> {
    let (n, m) = particles.shape();
    if n < 2 {
        return Err(Error::EmptyInput("ksd needs at least two particles"));
    }
    let scores = evaluate_scores(target, particles, 0, Exec::Sequential)?;
    let mut total = 0.0;
    match *kernel {
        SvgdKernel::Rbf { bandwidth } => {
            let h = bandwidth.unwrap_or_else(|| median_bandwidth(particles));
            for a in 0..n {
                for b in 0..n {
                    let (x, y) = (particles.row(a), particles.row(b));
                    let (sx, sy) = (scores.row(a), scores.row(b));
                    let r2 = crate::numerics::sq_dist(x, y);
                    let k = (-r2 / h).exp();
                    // grad_y k = 2 (x - y) k / h,  grad_x k = -2 (x - y) k / h
                    let mut sx_diff = 0.0;
                    let mut sy_diff = 0.0;
                    for d in 0..m {
                        let diff = x[d] - y[d];
                        sx_diff += sx[d] * diff;
                        sy_diff += sy[d] * diff;
                    }
                    let trace = k * (2.0 * m as f64 / h - 4.0 * r2 / (h * h));
                    total += k * dot(sx, sy) + 2.0 * k / h * sx_diff - 2.0 * k / h * sy_diff + trace;
                }
            }
        }
        SvgdKernel::Polynomial { degree } => {
            let d = f64::from(degree);
            let p = degree as i32;
            for a in 0..n {
                for b in 0..n {
                    let (x, y) = (particles.row(a), particles.row(b));
                    let (sx, sy) = (scores.row(a), scores.row(b));
                    let xy = dot(x, y);
                    let s = xy + 1.0;
                    let k = s.powi(p);
                    let dk = d * s.powi(p - 1);
                    let d2k = if degree >= 2 { d * (d - 1.0) * s.powi(p - 2) } else { 0.0 };
                    // grad_x k = dk y, grad_y k = dk x
                    total += k * dot(sx, sy) + dk * dot(sx, x) + dk * dot(sy, y) + dk * m as f64 + d2k * xy;
                }
            }
        }
        other => {
            return Err(Error::UnsupportedKernel {
                op: "ksd",
                kernel: other.name().to_string(),
            })
        }
    }
    let v = total / (n * n) as f64;
    Ok(v.max(0.0).sqrt())
}
