//! Single-hidden-layer ReLU MLP with a softmax output, its categorical
//! log-likelihood and the hand-written backward pass.
//!
//! A particle is the flat vector `[W1 (hidden x input), b1, W2 (classes x hidden), b2]`,
//! weights stored row-major.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
}

impl MlpShape {
    pub fn new(input_dim: usize, hidden_dim: usize, classes: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || classes == 0 {
            return Err(Error::config("model", "input_dim, hidden_dim and classes must be >= 1"));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            classes,
        })
    }

    pub fn flat_len(&self) -> usize {
        self.input_dim * self.hidden_dim + self.hidden_dim + self.hidden_dim * self.classes + self.classes
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.input_dim * self.hidden_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.hidden_dim * self.classes;
        (b1, w2, b2)
    }

    pub(crate) fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.flat_len() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector of length {} for flat_len {}",
                theta.len(),
                self.flat_len()
            )));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyInput("likelihood batch"));
        }
        if data.dim() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "features of dim {} for input_dim {}",
                data.dim(),
                self.input_dim
            )));
        }
        if let Some(&label) = data.labels().iter().find(|&&l| l >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }
}

/// Owned, validated parameter vector for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams {
    shape: MlpShape,
    theta: Vec<f64>,
}

/// The four parameter blocks of an [`MlpShape`], unflattened.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayers {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

impl FlatParams {
    pub fn new(shape: MlpShape, theta: Vec<f64>) -> Result<Self> {
        shape.check_theta(&theta)?;
        Ok(Self { shape, theta })
    }

    pub fn zeros(shape: MlpShape) -> Self {
        Self {
            shape,
            theta: vec![0.0; shape.flat_len()],
        }
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn unflatten(&self) -> MlpLayers {
        let s = self.shape;
        let (b1, w2, b2) = s.offsets();
        MlpLayers {
            w1: self.theta[..b1].chunks(s.input_dim).map(<[f64]>::to_vec).collect(),
            b1: self.theta[b1..w2].to_vec(),
            w2: self.theta[w2..b2].chunks(s.hidden_dim).map(<[f64]>::to_vec).collect(),
            b2: self.theta[b2..].to_vec(),
        }
    }

    pub fn flatten(shape: MlpShape, layers: &MlpLayers) -> Result<Self> {
        let mut theta = Vec::with_capacity(shape.flat_len());
        if layers.w1.len() != shape.hidden_dim || layers.w2.len() != shape.classes {
            return Err(Error::DimensionMismatch("layer row counts".into()));
        }
        for row in &layers.w1 {
            theta.extend_from_slice(row);
        }
        theta.extend_from_slice(&layers.b1);
        for row in &layers.w2 {
            theta.extend_from_slice(row);
        }
        theta.extend_from_slice(&layers.b2);
        Self::new(shape, theta)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward(&self.shape, &self.theta, x)
    }

    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        log_likelihood(&self.shape, &self.theta, data)
    }

    pub fn grad_log_likelihood(&self, data: &Dataset) -> Result<Vec<f64>> {
        grad_log_likelihood(&self.shape, &self.theta, data)
    }
}

struct Activations {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn nonzero_inputs(x: &[f64]) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter_map(|(i, &v)| (v != 0.0).then_some(i))
        .collect()
}

fn activations(shape: &MlpShape, theta: &[f64], x: &[f64], nz: &[usize]) -> Activations {
    let (b1_off, w2_off, b2_off) = shape.offsets();
    let mut pre = theta[b1_off..w2_off].to_vec();
    for (j, p) in pre.iter_mut().enumerate() {
        let row = &theta[j * shape.input_dim..(j + 1) * shape.input_dim];
        *p += nz.iter().map(|&i| row[i] * x[i]).sum::<f64>();
    }
    let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let mut logits = theta[b2_off..].to_vec();
    for (c, l) in logits.iter_mut().enumerate() {
        let row = &theta[w2_off + c * shape.hidden_dim..w2_off + (c + 1) * shape.hidden_dim];
        *l += crate::numerics::dot(row, &hidden);
    }
    Activations { pre, hidden, logits }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[label] - lse
}

/// Class probabilities `softmax(W2 relu(W1 x + b1) + b2)`.
pub fn forward(shape: &MlpShape, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    shape.check_theta(theta)?;
    if x.len() != shape.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "input of length {} for input_dim {}",
            x.len(),
            shape.input_dim
        )));
    }
    Ok(forward_unchecked(shape, theta, x))
}

/// [`forward`] for callers that validated `theta` and `x` once up front.
pub(crate) fn forward_unchecked(shape: &MlpShape, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let nz = nonzero_inputs(x);
    let mut probs = activations(shape, theta, x, &nz).logits;
    softmax_in_place(&mut probs);
    probs
}

pub fn log_likelihood(shape: &MlpShape, theta: &[f64], data: &Dataset) -> Result<f64> {
    shape.check_theta(theta)?;
    shape.check_data(data)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        let nz = nonzero_inputs(x);
        total += log_softmax_at(&activations(shape, theta, x, &nz).logits, y);
    }
    Ok(total)
}

/// Exact gradient of [`log_likelihood`] over the whole batch.
pub fn grad_log_likelihood(shape: &MlpShape, theta: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    shape.check_theta(theta)?;
    shape.check_data(data)?;
    let mut grad = vec![0.0; shape.flat_len()];
    for i in 0..data.len() {
        accumulate_sample_grad(shape, theta, data, i, 1.0, &mut grad);
    }
    Ok(grad)
}

/// `scale * sum_{i in indices} grad log p(y_i | x_i)`; the minibatch
/// estimator uses `scale = |D| / |indices|`.
pub fn grad_log_likelihood_indices(
    shape: &MlpShape,
    theta: &[f64],
    data: &Dataset,
    indices: &[usize],
    scale: f64,
) -> Result<Vec<f64>> {
    shape.check_theta(theta)?;
    shape.check_data(data)?;
    let mut grad = vec![0.0; shape.flat_len()];
    for &i in indices {
        if i >= data.len() {
            return Err(Error::DimensionMismatch(format!("sample index {i} of {}", data.len())));
        }
        accumulate_sample_grad(shape, theta, data, i, scale, &mut grad);
    }
    Ok(grad)
}

fn accumulate_sample_grad(
    shape: &MlpShape,
    theta: &[f64],
    data: &Dataset,
    i: usize,
    scale: f64,
    grad: &mut [f64],
) {
    let (b1_off, w2_off, b2_off) = shape.offsets();
    let (x, y) = data.sample(i);
    let nz = nonzero_inputs(x);
    let Activations { pre, hidden, logits } = activations(shape, theta, x, &nz);
    let mut delta = logits;
    softmax_in_place(&mut delta);
    // d log p_y / d logits = onehot(y) - p
    for (c, d) in delta.iter_mut().enumerate() {
        *d = (if c == y { 1.0 } else { 0.0 }) - *d;
        *d *= scale;
    }

    let h = shape.hidden_dim;
    let mut dh = vec![0.0; h];
    for (c, &dc) in delta.iter().enumerate() {
        grad[b2_off + c] += dc;
        let w_row = &theta[w2_off + c * h..w2_off + (c + 1) * h];
        let g_row = &mut grad[w2_off + c * h..w2_off + (c + 1) * h];
        for j in 0..h {
            g_row[j] += dc * hidden[j];
            dh[j] += w_row[j] * dc;
        }
    }
    for j in 0..h {
        // relu subgradient at 0 is 0
        if pre[j] <= 0.0 || dh[j] == 0.0 {
            continue;
        }
        grad[b1_off + j] += dh[j];
        let g_row = &mut grad[j * shape.input_dim..(j + 1) * shape.input_dim];
        for &k in &nz {
            g_row[k] += dh[j] * x[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, SeededRng};

    fn dataset(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> Dataset {
        Dataset::new(Matrix::from_rows(rows).unwrap(), labels.to_vec(), classes).unwrap()
    }

    #[test]
    fn zero_params_give_uniform() {
        let shape = MlpShape::new(3, 4, 5).unwrap();
        let p = FlatParams::zeros(shape);
        let probs = p.forward(&[0.3, -1.0, 2.0]).unwrap();
        for v in probs {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_logits_give_half() {
        let shape = MlpShape::new(2, 2, 2).unwrap();
        let mut layers = FlatParams::zeros(shape).unflatten();
        layers.w1 = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        layers.w2 = vec![vec![0.7, 0.3], vec![0.7, 0.3]];
        layers.b2 = vec![1.5, 1.5];
        let p = FlatParams::flatten(shape, &layers).unwrap();
        let probs = p.forward(&[0.4, 0.9]).unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-15 && (probs[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_built_two_two_two() {
        // W1 = [[1, -1], [0.5, 2]], b1 = [0, -0.25]; x = (1, 0)
        // pre = (1, 0.25) -> h = (1, 0.25)
        // W2 = [[2, 0], [0, 4]], b2 = [0, 0.5] -> logits = (2, 1.5)
        // softmax = (1/(1+e^-0.5), e^-0.5/(1+e^-0.5))
        let shape = MlpShape::new(2, 2, 2).unwrap();
        let layers = MlpLayers {
            w1: vec![vec![1.0, -1.0], vec![0.5, 2.0]],
            b1: vec![0.0, -0.25],
            w2: vec![vec![2.0, 0.0], vec![0.0, 4.0]],
            b2: vec![0.0, 0.5],
        };
        let p = FlatParams::flatten(shape, &layers).unwrap();
        let probs = p.forward(&[1.0, 0.0]).unwrap();
        let e = (-0.5f64).exp();
        assert!((probs[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((probs[1] - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn forward_errors() {
        let shape = MlpShape::new(2, 2, 2).unwrap();
        let p = FlatParams::zeros(shape);
        assert!(matches!(p.forward(&[1.0]), Err(Error::DimensionMismatch(_))));
        let mut theta = vec![0.0; shape.flat_len()];
        theta[0] = f64::NAN;
        assert!(matches!(forward(&shape, &theta, &[1.0, 1.0]), Err(Error::NonFinite(_))));
        assert!(FlatParams::new(shape, vec![0.0; 3]).is_err());
    }

    #[test]
    fn log_likelihood_examples() {
        let shape = MlpShape::new(2, 3, 10).unwrap();
        let zero = FlatParams::zeros(shape);
        let one = dataset(&[vec![0.5, 0.5]], &[4], 10);
        assert!((zero.log_likelihood(&one).unwrap() - (0.1f64).ln()).abs() < 1e-12);

        // a large bias on the true class forces p_y -> 1 (log p = 0 in floating point)
        let mut theta = vec![0.0; shape.flat_len()];
        let b2 = shape.flat_len() - shape.classes;
        theta[b2 + 4] = 800.0;
        assert_eq!(log_likelihood(&shape, &theta, &one).unwrap(), 0.0);

        let mut rng = SeededRng::new(2);
        let theta = rng.normal_matrix(1, shape.flat_len(), 0.0, 0.5).into_vec();
        let two = dataset(&[vec![0.1, 0.9], vec![0.7, 0.2]], &[1, 8], 10);
        let expected: f64 = (0..2)
            .map(|i| {
                let (x, y) = two.sample(i);
                forward(&shape, &theta, x).unwrap()[y].ln()
            })
            .sum();
        let got = log_likelihood(&shape, &theta, &two).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(got <= 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let shape = MlpShape::new(1, 1, 2).unwrap();
        let d = Dataset::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![2], 3).unwrap();
        assert!(matches!(
            log_likelihood(&shape, &vec![0.0; shape.flat_len()], &d),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn gradient_is_linear_in_the_batch() {
        let shape = MlpShape::new(3, 4, 3).unwrap();
        let mut rng = SeededRng::new(11);
        let theta = rng.normal_matrix(1, shape.flat_len(), 0.0, 0.7).into_vec();
        let a = dataset(&[vec![0.2, 0.0, 0.9]], &[2], 3);
        let b = dataset(&[vec![0.5, 0.4, 0.1]], &[0], 3);
        let ab = dataset(&[vec![0.2, 0.0, 0.9], vec![0.5, 0.4, 0.1]], &[2, 0], 3);
        let aa = dataset(&[vec![0.2, 0.0, 0.9], vec![0.2, 0.0, 0.9]], &[2, 2], 3);
        let ga = grad_log_likelihood(&shape, &theta, &a).unwrap();
        let gb = grad_log_likelihood(&shape, &theta, &b).unwrap();
        let gab = grad_log_likelihood(&shape, &theta, &ab).unwrap();
        let gaa = grad_log_likelihood(&shape, &theta, &aa).unwrap();
        for k in 0..ga.len() {
            assert!((gab[k] - (ga[k] + gb[k])).abs() < 1e-14);
            assert_eq!(gaa[k], 2.0 * ga[k]);
        }
        let gi = grad_log_likelihood_indices(&shape, &theta, &ab, &[0, 0], 0.5).unwrap();
        for k in 0..ga.len() {
            assert!((gi[k] - ga[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let shape = MlpShape::new(3, 2, 4).unwrap();
        let theta: Vec<f64> = (0..shape.flat_len()).map(|i| i as f64 * 0.25 - 3.0).collect();
        let p = FlatParams::new(shape, theta).unwrap();
        assert_eq!(FlatParams::flatten(shape, &p.unflatten()).unwrap(), p);
        assert_eq!(shape.flat_len(), 3 * 2 + 2 + 2 * 4 + 4);
    }
}
