#![allow(dead_code)]

use fedwba::data::Dataset;
use fedwba::kde::GlobalPrior;
use fedwba::model::MlpShape;
use fedwba::{Matrix, SeededRng};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;
pub const FD_ABS_TOL: f64 = 1e-7;
/// Fraction of coordinates that must meet the relative tolerance.
pub const FD_REL_QUORUM: f64 = 0.99;

#[derive(Debug)]
pub struct FdReport {
    pub coords: usize,
    pub rel_ok: usize,
    /// Largest absolute error among coordinates that missed the relative tolerance.
    pub worst_abs_outside: f64,
    pub worst_rel: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.rel_ok as f64 >= FD_REL_QUORUM * self.coords as f64 && self.worst_abs_outside <= FD_ABS_TOL
    }
}

/// Central differences of `f` at `x` against `grad`, coordinate by coordinate.
pub fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> FdReport {
    assert_eq!(x.len(), grad.len());
    let mut probe = x.to_vec();
    let mut rep = FdReport {
        coords: x.len(),
        rel_ok: 0,
        worst_abs_outside: 0.0,
        worst_rel: 0.0,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * FD_STEP);
        let abs = (fd - grad[i]).abs();
        let rel = abs / fd.abs().max(grad[i].abs()).max(f64::MIN_POSITIVE);
        if abs == 0.0 || rel <= FD_REL_TOL {
            rep.rel_ok += 1;
        } else {
            rep.worst_abs_outside = rep.worst_abs_outside.max(abs);
        }
        if abs > 0.0 {
            rep.worst_rel = rep.worst_rel.max(rel);
        }
    }
    rep
}

pub struct ModelInstance {
    pub shape: MlpShape,
    pub theta: Vec<f64>,
    pub data: Dataset,
}

/// Pre-activations closer to zero than this are resampled: a central
/// difference across a ReLU kink measures a jump, not a derivative.
pub const KINK_MARGIN: f64 = 1e-3;

fn min_abs_preactivation(shape: &MlpShape, theta: &[f64], data: &Dataset) -> f64 {
    let (d, h) = (shape.input_dim, shape.hidden_dim);
    let mut min = f64::INFINITY;
    for i in 0..data.len() {
        let (x, _) = data.sample(i);
        for j in 0..h {
            let pre = theta[d * h + j] + (0..d).map(|c| theta[j * d + c] * x[c]).sum::<f64>();
            min = min.min(pre.abs());
        }
    }
    min
}

pub fn random_model_instance(rng: &mut SeededRng) -> ModelInstance {
    loop {
        let input = rng.random_range(1..=6);
        let hidden = rng.random_range(1..=6);
        let classes = rng.random_range(2..=4);
        let shape = MlpShape::new(input, hidden, classes).unwrap();
        let theta: Vec<f64> = (0..shape.flat_len()).map(|_| rng.standard_normal()).collect();
        let n = rng.random_range(1..=5);
        let features = rng.normal_matrix(n, input, 0.0, 1.0);
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let data = Dataset::new(features, labels, classes).unwrap();
        if min_abs_preactivation(&shape, &theta, &data) >= KINK_MARGIN {
            return ModelInstance { shape, theta, data };
        }
    }
}

pub fn random_kde_instance(rng: &mut SeededRng) -> (GlobalPrior, Vec<f64>) {
    let n = rng.random_range(1..=8);
    let m = rng.random_range(1..=5);
    let bandwidth = rng.random_range(0.3..2.0);
    let particles: Matrix = rng.normal_matrix(n, m, 0.0, 1.0);
    let theta: Vec<f64> = (0..m).map(|_| 1.5 * rng.standard_normal()).collect();
    (GlobalPrior::new(particles, bandwidth).unwrap(), theta)
}
