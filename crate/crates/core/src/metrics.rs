//! Ensemble evaluation (posterior-predictive accuracy, calibration) and the
//! analytic oracles used by the convergence suites.

use std::io::Write;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_unchecked, MlpShape};
use crate::numerics::{cholesky, cholesky_inverse, cholesky_log_det, sq_dist, Matrix};
use crate::par::Exec;

pub const DEFAULT_BINS: usize = 10;
pub const FIT_JITTER: f64 = 1e-6;

fn check_ensemble(particles: &Matrix, shape: &MlpShape) -> Result<()> {
    if particles.rows() == 0 {
        return Err(Error::EmptyInput("particle ensemble"));
    }
    for row in particles.row_iter() {
        shape.check_theta(row)?;
    }
    Ok(())
}

fn check_input(x: &[f64], shape: &MlpShape) -> Result<()> {
    if x.len() != shape.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "input of length {} for input_dim {}",
            x.len(),
            shape.input_dim
        )));
    }
    Ok(())
}

fn mixture(particles: &Matrix, shape: &MlpShape, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; shape.classes];
    for theta in particles.row_iter() {
        for (o, p) in out.iter_mut().zip(forward_unchecked(shape, theta, x)) {
            *o += p;
        }
    }
    let inv = 1.0 / particles.rows() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Uniform mixture `(1/N) sum_i forward(theta_i, x)`.
pub fn predict_ensemble(particles: &Matrix, x: &[f64], shape: &MlpShape) -> Result<Vec<f64>> {
    check_ensemble(particles, shape)?;
    check_input(x, shape)?;
    Ok(mixture(particles, shape, x))
}

/// Predictive distributions for every sample, in dataset order.
pub fn predict_dataset(particles: &Matrix, data: &Dataset, shape: &MlpShape, exec: Exec) -> Result<Vec<Vec<f64>>> {
    check_ensemble(particles, shape)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset"));
    }
    check_input(data.sample(0).0, shape)?;
    Ok(exec.map_range(data.len(), |i| mixture(particles, shape, data.sample(i).0)))
}

/// First index of the maximum.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bin {
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReliabilityBins {
    pub bin_edges: Vec<f64>,
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,count,mean_conf,mean_acc")?;
        for (b, edge) in self.bins.iter().zip(self.bin_edges.windows(2)) {
            writeln!(
                out,
                "{},{},{},{},{}",
                edge[0], edge[1], b.count, b.mean_confidence, b.mean_accuracy
            )?;
        }
        Ok(())
    }
}

/// ECE from per-sample `(confidence, correct)` pairs with `bins` equal-width
/// bins over `[0, 1]`; a confidence of exactly 1 falls in the last bin.
pub fn calibration(samples: &[(f64, bool)], bins: usize) -> Result<(f64, ReliabilityBins)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("calibration samples"));
    }
    if bins == 0 {
        return Err(Error::config("bins", "must be >= 1"));
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for &(c, correct) in samples {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::NonFinite("confidence outside [0, 1]"));
        }
        let b = ((c * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(correct);
    }
    let total = samples.len() as f64;
    let mut ece = 0.0;
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let n = counts[b];
        let (mean_confidence, mean_accuracy) = if n == 0 {
            (0.0, 0.0)
        } else {
            (conf_sum[b] / n as f64, hits[b] as f64 / n as f64)
        };
        if n > 0 {
            ece += n as f64 / total * (mean_accuracy - mean_confidence).abs();
        }
        out.push(Bin {
            count: n,
            mean_confidence,
            mean_accuracy,
        });
    }
    let bin_edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok((ece, ReliabilityBins { bin_edges, bins: out }))
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub ece: f64,
    pub reliability: ReliabilityBins,
}

pub fn evaluate_predictions(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<Evaluation> {
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let samples: Vec<(f64, bool)> = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let k = argmax(p);
            (p[k].clamp(0.0, 1.0), k == y)
        })
        .collect();
    let (ece, reliability) = calibration(&samples, bins)?;
    let accuracy = samples.iter().filter(|s| s.1).count() as f64 / samples.len() as f64;
    Ok(Evaluation {
        accuracy,
        ece,
        reliability,
    })
}

/// Accuracy and calibration from a single pass of predictions.
pub fn evaluate(particles: &Matrix, data: &Dataset, shape: &MlpShape, exec: Exec) -> Result<Evaluation> {
    let probs = predict_dataset(particles, data, shape, exec)?;
    evaluate_predictions(&probs, data.labels(), DEFAULT_BINS)
}

pub fn accuracy(particles: &Matrix, data: &Dataset, shape: &MlpShape) -> Result<f64> {
    Ok(evaluate(particles, data, shape, Exec::Sequential)?.accuracy)
}

pub fn ece(particles: &Matrix, data: &Dataset, shape: &MlpShape, bins: usize) -> Result<(f64, ReliabilityBins)> {
    let probs = predict_dataset(particles, data, shape, Exec::Sequential)?;
    let e = evaluate_predictions(&probs, data.labels(), bins)?;
    Ok((e.ece, e.reliability))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CovarianceFit {
    #[default]
    Full,
    /// Off-diagonal sample covariances dropped; usable when `N <= M`.
    Diagonal,
}

/// KL(fit || N(true_mean, true_cov)) where the fit uses the sample mean and
/// the `1/N` sample covariance plus [`FIT_JITTER`] on the diagonal.
pub fn gaussian_fit_kl(particles: &Matrix, true_mean: &[f64], true_cov: &Matrix) -> Result<f64> {
    gaussian_fit_kl_with(particles, true_mean, true_cov, CovarianceFit::Full)
}

pub fn gaussian_fit_kl_with(particles: &Matrix, true_mean: &[f64], true_cov: &Matrix, fit: CovarianceFit) -> Result<f64> {
    let (n, m) = particles.shape();
    if n == 0 {
        return Err(Error::EmptyInput("particle ensemble"));
    }
    if true_mean.len() != m || true_cov.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "target of dim {} / {:?} for particles in dim {m}",
            true_mean.len(),
            true_cov.shape()
        )));
    }
    let mut mean = vec![0.0; m];
    for row in particles.row_iter() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v / n as f64;
        }
    }
    let mut cov = Matrix::zeros(m, m);
    for row in particles.row_iter() {
        for a in 0..m {
            for b in 0..m {
                if fit == CovarianceFit::Diagonal && a != b {
                    continue;
                }
                let v = cov.get(a, b) + (row[a] - mean[a]) * (row[b] - mean[b]) / n as f64;
                cov.set(a, b, v);
            }
        }
    }
    for a in 0..m {
        cov.set(a, a, cov.get(a, a) + FIT_JITTER);
    }
    gaussian_kl(&mean, &cov, true_mean, true_cov)
}

/// Closed-form KL(N(mu0, s0) || N(mu1, s1)).
pub fn gaussian_kl(mu0: &[f64], s0: &Matrix, mu1: &[f64], s1: &Matrix) -> Result<f64> {
    let m = mu0.len();
    let l0 = cholesky(s0)?;
    let l1 = cholesky(s1)?;
    let p1 = cholesky_inverse(&l1);
    let mut trace = 0.0;
    for a in 0..m {
        for b in 0..m {
            trace += p1.get(a, b) * s0.get(b, a);
        }
    }
    let d: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
    let mut quad = 0.0;
    for a in 0..m {
        for b in 0..m {
            quad += d[a] * p1.get(a, b) * d[b];
        }
    }
    Ok(0.5 * (trace + quad - m as f64 + cholesky_log_det(&l1) - cholesky_log_det(&l0)))
}

/// W2 from the empirical measure of `particles` to the Dirac mass at `point`.
pub fn w2_to_point(particles: &Matrix, point: &[f64]) -> Result<f64> {
    if particles.rows() == 0 {
        return Err(Error::EmptyInput("particle ensemble"));
    }
    if point.len() != particles.cols() {
        return Err(Error::DimensionMismatch(format!(
            "point of dim {} for particles in dim {}",
            point.len(),
            particles.cols()
        )));
    }
    let total: f64 = particles.row_iter().map(|r| sq_dist(r, point)).sum();
    Ok((total / particles.rows() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, FlatParams};
    use crate::numerics::SeededRng;
    use crate::ot::w2_distance;

    fn shape() -> MlpShape {
        MlpShape::new(2, 3, 3).unwrap()
    }

    /// Network whose logits are `scale * (x0, x1, 0)` via an identity-ish hidden layer.
    fn scaled_net(scale: f64) -> Vec<f64> {
        let mut layers = FlatParams::zeros(shape()).unflatten();
        layers.w1 = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        layers.w2 = vec![vec![scale, 0.0, 0.0], vec![0.0, scale, 0.0], vec![0.0, 0.0, 0.0]];
        FlatParams::flatten(shape(), &layers).unwrap().theta().to_vec()
    }

    #[test]
    fn ensemble_prediction() {
        let mut rng = SeededRng::new(8);
        let s = shape();
        let a = rng.normal_matrix(1, s.flat_len(), 0.0, 1.0);
        let b = rng.normal_matrix(1, s.flat_len(), 0.0, 1.0);
        let x = [0.4, 0.9];
        let pa = forward(&s, a.row(0), &x).unwrap();
        let pb = forward(&s, b.row(0), &x).unwrap();
        assert_eq!(predict_ensemble(&a, &x, &s).unwrap(), pa);
        let both = Matrix::from_rows(&[a.row(0), b.row(0)]).unwrap();
        let mix = predict_ensemble(&both, &x, &s).unwrap();
        for ((m, p), q) in mix.iter().zip(&pa).zip(&pb) {
            assert!((m - 0.5 * (p + q)).abs() < 1e-15);
        }
        assert!((mix.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let twice = Matrix::from_rows(&[a.row(0), a.row(0)]).unwrap();
        let same = predict_ensemble(&twice, &x, &s).unwrap();
        for (u, v) in same.iter().zip(&pa) {
            assert!((u - v).abs() < 1e-15);
        }
        assert!(predict_ensemble(&a, &[1.0], &s).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let s = shape();
        let p = Matrix::from_rows(&[scaled_net(5.0)]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.0, 3.0]]).unwrap();
        let right = Dataset::new(x.clone(), vec![0, 1, 0, 1], 3).unwrap();
        assert_eq!(accuracy(&p, &right, &s).unwrap(), 1.0);
        let wrong = Dataset::new(x.clone(), vec![2, 2, 1, 0], 3).unwrap();
        assert_eq!(accuracy(&p, &wrong, &s).unwrap(), 0.0);
        let three = Dataset::new(x, vec![0, 1, 0, 2], 3).unwrap();
        assert_eq!(accuracy(&p, &three, &s).unwrap(), 0.75);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.5, 0.25]), 1);
        assert_eq!(argmax(&[0.4, 0.2, 0.4]), 0);
        // x = 0 gives equal logits, so class 0 wins
        let s = shape();
        let p = Matrix::from_rows(&[scaled_net(5.0)]).unwrap();
        let d = Dataset::new(Matrix::from_rows(&[[0.0, 0.0]]).unwrap(), vec![0], 3).unwrap();
        assert_eq!(accuracy(&p, &d, &s).unwrap(), 1.0);
    }

    #[test]
    fn calibration_examples() {
        let (e, bins) = calibration(&[(0.9, true)], 10).unwrap();
        assert!((e - 0.1).abs() < 1e-15);
        assert_eq!(bins.bins[9].count, 1);
        // bin 6: confs 0.65, 0.65, one hit -> |0.5 - 0.65| = 0.15
        // bin 9: confs 0.95, 1.0, two hits -> |1 - 0.975| = 0.025
        let (e, bins) = calibration(&[(0.65, true), (0.65, false), (0.95, true), (1.0, true)], 10).unwrap();
        assert!((e - (0.5 * 0.15 + 0.5 * 0.025)).abs() < 1e-15);
        assert_eq!(bins.total(), 4);
        assert_eq!(bins.bin_edges.len(), 11);
        assert!(bins.bin_edges.windows(2).all(|w| w[0] < w[1]));
        // calibrated: bin 7 at conf 0.75 with 3 of 4 right
        let (e, _) = calibration(&[(0.75, true), (0.75, true), (0.75, true), (0.75, false)], 10).unwrap();
        assert_eq!(e, 0.0);
        assert!(calibration(&[], 10).is_err());
    }

    #[test]
    fn one_hot_always_correct_has_zero_ece() {
        let s = shape();
        let p = Matrix::from_rows(&[scaled_net(1e4)]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let d = Dataset::new(x, vec![0, 1], 3).unwrap();
        let (e, _) = ece(&p, &d, &s, 10).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn ece_in_unit_interval_and_csv() {
        let mut rng = SeededRng::new(12);
        let s = shape();
        let p = rng.normal_matrix(3, s.flat_len(), 0.0, 2.0);
        let x = rng.normal_matrix(40, 2, 0.0, 1.0);
        let labels = (0..40).map(|i| i % 3).collect();
        let d = Dataset::new(x, labels, 3).unwrap();
        let ev = evaluate(&p, &d, &s, Exec::Sequential).unwrap();
        assert!((0.0..=1.0).contains(&ev.ece));
        assert_eq!(ev.reliability.total(), 40);
        let par = evaluate(&p, &d, &s, Exec::Parallel).unwrap();
        assert_eq!(par.ece, ev.ece);
        let mut buf = Vec::new();
        ev.reliability.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("bin_low,bin_high,count,mean_conf,mean_acc\n0,0.1,"));
    }

    #[test]
    fn kl_examples() {
        // particles {-1, 1} + shift: mean shift, population variance 1
        let sigma2 = 1.0 + FIT_JITTER;
        let cov = Matrix::from_rows(&[[sigma2]]).unwrap();
        let exact = Matrix::from_rows(&[[-1.0], [1.0]]).unwrap();
        assert!(gaussian_fit_kl(&exact, &[0.0], &cov).unwrap().abs() < 1e-9);
        let shifted = exact.shifted(&[0.5]).unwrap();
        let k1 = gaussian_fit_kl(&shifted, &[0.0], &cov).unwrap();
        assert!((k1 - 0.25 / (2.0 * sigma2)).abs() < 1e-12);
        let k2 = gaussian_fit_kl(&exact.shifted(&[1.0]).unwrap(), &[0.0], &cov).unwrap();
        assert!((k2 - 4.0 * k1).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_2d_moments() {
        // four points with mean (1, 2) and population covariance diag(1, 4)
        let p = Matrix::from_rows(&[[0.0, 2.0], [2.0, 2.0], [1.0, 0.0], [1.0, 4.0]]).unwrap();
        let cov = Matrix::from_rows(&[[0.5, 0.0], [0.0, 2.0]]).unwrap();
        let cov = Matrix::from_rows(&[[cov.get(0, 0) + FIT_JITTER, 0.0], [0.0, cov.get(1, 1) + FIT_JITTER]]).unwrap();
        assert!(gaussian_fit_kl(&p, &[1.0, 2.0], &cov).unwrap().abs() < 1e-9);
        assert!(gaussian_fit_kl_with(&p, &[1.0, 2.0], &cov, CovarianceFit::Diagonal).unwrap().abs() < 1e-9);
    }

    #[test]
    fn w2_to_point_examples() {
        let p = Matrix::from_rows(&[[0.0], [2.0]]).unwrap();
        assert_eq!(w2_to_point(&p, &[1.0]).unwrap(), 1.0);
        let q = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(w2_to_point(&q, &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(w2_to_point(&Matrix::zeros(3, 2), &[0.0, 0.0]).unwrap(), 0.0);
        assert!(w2_to_point(&q, &[0.0]).is_err());
    }

    #[test]
    fn w2_to_point_agrees_with_transport() {
        let mut rng = SeededRng::new(6);
        for _ in 0..20 {
            let p = rng.normal_matrix(5, 3, 0.0, 1.0);
            let point = [0.3, -0.2, 1.0];
            let cloud = Matrix::from_rows(&vec![point; 5]).unwrap();
            assert_eq!(w2_to_point(&p, &point).unwrap(), w2_distance(&p, &cloud).unwrap());
        }
    }
}
