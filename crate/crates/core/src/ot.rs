//! Exact 2-Wasserstein transport between two uniform clouds of equal size.
//!
//! With both marginals uniform over `N` atoms, an optimal vertex of the
//! transport polytope is a permutation matrix scaled by `1/N`, so the LP is
//! solved as a min-cost assignment (shortest augmenting paths with dual
//! potentials, `O(N^3)`).

use crate::error::{Error, Result};
use crate::numerics::{pairwise_sq_dists, Matrix};

/// Coupling between two uniform `N`-atom measures.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `assignment[i]` is the target atom receiving source atom `i`'s mass.
    pub assignment: Vec<usize>,
    pub entries: Matrix,
}

impl TransportPlan {
    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        let n = assignment.len();
        let mut seen = vec![false; n];
        for &j in &assignment {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::DimensionMismatch(format!("{assignment:?} is not a permutation")));
            }
        }
        let mut entries = Matrix::zeros(n, n);
        for (i, &j) in assignment.iter().enumerate() {
            entries.set(i, j, 1.0 / n as f64);
        }
        Ok(Self { assignment, entries })
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.n();
        (0..n).map(|j| (0..n).map(|i| self.entries.get(i, j)).sum()).collect()
    }

    /// `<cost, T>_F`
    pub fn cost(&self, cost: &Matrix) -> Result<f64> {
        if cost.shape() != self.entries.shape() {
            return Err(Error::DimensionMismatch(format!(
                "cost {:?} for plan {:?}",
                cost.shape(),
                self.entries.shape()
            )));
        }
        Ok(cost
            .as_slice()
            .iter()
            .zip(self.entries.as_slice())
            .map(|(c, t)| c * t)
            .sum())
    }
}

/// `M[i][j] = ||source_i - target_j||^2`.
pub fn cost_matrix(source: &Matrix, target: &Matrix) -> Result<Matrix> {
    if source.shape() != target.shape() {
        return Err(Error::DimensionMismatch(format!(
            "clouds of shape {:?} and {:?}",
            source.shape(),
            target.shape()
        )));
    }
    pairwise_sq_dists(source, target)
}

/// Min-cost perfect matching on a square cost matrix; `result[row] = col`.
/// Rows are inserted in increasing index order, which fixes the tie-breaking.
pub fn min_cost_assignment(cost: &Matrix) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::DimensionMismatch(format!("assignment on a {:?} cost matrix", cost.shape())));
    }
    if n == 0 {
        return Err(Error::EmptyInput("transport cost matrix"));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("transport cost matrix"));
    }
    // 1-based potentials; column 0 is the virtual root of each augmentation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost.get(r - 1, col - 1) - u[r] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            row_of_col[col0] = row_of_col[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[row_of_col[col] - 1] = col - 1;
    }
    Ok(assignment)
}

/// Optimal uniform-marginal plan and its objective `<M, T>_F` (the squared W2).
pub fn solve_exact(cost: &Matrix) -> Result<(TransportPlan, f64)> {
    let assignment = min_cost_assignment(cost)?;
    let n = assignment.len() as f64;
    let objective = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum::<f64>()
        / n;
    Ok((TransportPlan::from_assignment(assignment)?, objective))
}

pub fn w2_distance(source: &Matrix, target: &Matrix) -> Result<f64> {
    let cost = cost_matrix(source, target)?;
    let (_, objective) = solve_exact(&cost)?;
    Ok(objective.max(0.0).sqrt())
}

/// Brute-force oracle: minimum of `(1/N) sum_i cost[i][sigma(i)]` over all
/// `N!` permutations (Heap's algorithm). Intended for `N <= 8`.
pub fn brute_force_objective(cost: &Matrix) -> Result<f64> {
    let n = cost.rows();
    if cost.cols() != n || n == 0 {
        return Err(Error::DimensionMismatch(format!("brute force on {:?}", cost.shape())));
    }
    let eval = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = eval(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}
