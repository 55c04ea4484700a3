//! Continuous global prior rebuilt from prior particles with an isotropic
//! Gaussian kernel density estimate.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, sq_dist, Matrix};

pub const DEFAULT_KDE_BANDWIDTH: f64 = 0.55;

/// Uniform mixture of `N(particle_i, bandwidth^2 I)`.
#[derive(Clone, Debug)]
pub struct GlobalPrior {
    particles: Matrix,
    bandwidth: f64,
}

impl GlobalPrior {
    pub fn new(particles: Matrix, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::config("kde_bandwidth", format!("must be > 0, got {bandwidth}")));
        }
        if particles.rows() == 0 {
            return Err(Error::EmptyInput("prior particles"));
        }
        if !particles.is_finite() {
            return Err(Error::NonFinite("prior particles"));
        }
        Ok(Self {
            particles,
            bandwidth,
        })
    }

    pub fn particles(&self) -> &Matrix {
        &self.particles
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.particles.cols()
    }

    /// Unnormalized component log-weights `-||theta - p_i||^2 / (2 bw^2)`.
    fn component_logits(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta of length {} for a prior in dimension {}",
                theta.len(),
                self.dim()
            )));
        }
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        Ok(self
            .particles
            .row_iter()
            .map(|p| -sq_dist(theta, p) * inv)
            .collect())
    }

    /// Posterior responsibilities of the mixture components at `theta`.
    pub fn responsibilities(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let logits = self.component_logits(theta)?;
        let lse = log_sum_exp(&logits)?;
        Ok(logits.iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        let logits = self.component_logits(theta)?;
        let n = self.particles.rows() as f64;
        let m = self.dim() as f64;
        let log_norm = -0.5 * m * (2.0 * PI * self.bandwidth * self.bandwidth).ln();
        Ok(log_sum_exp(&logits)? - n.ln() + log_norm)
    }

    /// `sum_i w_i(theta) (p_i - theta) / bw^2`.
    pub fn grad_log_density(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let w = self.responsibilities(theta)?;
        let inv_var = 1.0 / (self.bandwidth * self.bandwidth);
        let mut grad = vec![0.0; theta.len()];
        for (wi, p) in w.iter().zip(self.particles.row_iter()) {
            if *wi == 0.0 {
                continue;
            }
            for ((g, pk), tk) in grad.iter_mut().zip(p).zip(theta) {
                *g += wi * (pk - tk) * inv_var;
            }
        }
        Ok(grad)
    }
}
