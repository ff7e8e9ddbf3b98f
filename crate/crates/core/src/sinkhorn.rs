//! Log-domain Sinkhorn iteration for entropic-regularized optimal transport
//! between discrete distributions, returning the sharp transport cost
//! `<P*, C>` and the dual potentials.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// Entropic OT configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct OTConfig {
    /// Entropic regularization strength (> 0).
    pub epsilon: f64,
    /// Hard cap on Sinkhorn iterations.
    pub max_iterations: usize,
    /// Stop once the summed L1 violation of both marginals drops below this.
    pub tolerance: f64,
    /// Divide squared bin-center distances by the squared grid diagonal.
    pub normalize_cost: bool,
}

impl Default for OTConfig {
    fn default() -> Self {
        OTConfig {
            epsilon: 0.05,
            max_iterations: 100,
            tolerance: 1e-6,
            normalize_cost: true,
        }
    }
}

impl OTConfig {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "entropic regularization must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(CoreError::InvalidConfig(
                "sinkhorn needs at least one iteration".into(),
            ));
        }
        Ok(())
    }
}

/// Converged (or iteration-capped) solution of one entropic OT problem.
#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    /// Sharp transport cost `<P*, C>`.
    pub cost: f64,
    /// Dual potential over the source atoms (`-inf` on empty atoms).
    pub u: Vec<f64>,
    /// Dual potential over the target atoms.
    pub v: Vec<f64>,
    pub iterations: usize,
    /// Summed L1 violation of both marginals at the last iterate.
    pub marginal_error: f64,
}

impl SinkhornSolution {
    /// Entropic transport plan `P_ij = exp((u_i + v_j - C_ij) / eps)`.
    pub fn plan(&self, cost: &CostGrid, epsilon: f64) -> Vec<f64> {
        let (n, m) = (self.u.len(), self.v.len());
        let mut p = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let e = (self.u[i] + self.v[j] - cost.at(i, j)) / epsilon;
                let val = e.exp();
                p[i * m + j] = if val.is_finite() { val } else { 0.0 };
            }
        }
        p
    }

    /// Dual objective `<u,a> + <v,b> - eps * sum_ij exp((u_i+v_j-C_ij)/eps)`,
    /// the value function whose gradient in `a` is exactly `u`.
    pub fn entropic_objective(&self, a: &[f64], b: &[f64], cost: &CostGrid, epsilon: f64) -> f64 {
        let mut val = 0.0;
        for (ui, ai) in self.u.iter().zip(a) {
            if *ai > 0.0 {
                val += ui * ai;
            }
        }
        for (vj, bj) in self.v.iter().zip(b) {
            if *bj > 0.0 {
                val += vj * bj;
            }
        }
        let mut mass = 0.0;
        for i in 0..a.len() {
            for j in 0..b.len() {
                let e = ((self.u[i] + self.v[j] - cost.at(i, j)) / epsilon).exp();
                if e.is_finite() {
                    mass += e;
                }
            }
        }
        val - epsilon * mass
    }
}

/// Dense pairwise cost between `rows` source atoms and `cols` target atoms.
#[derive(Debug, Clone)]
pub struct CostGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CostGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(CoreError::Shape(format!(
                "cost grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        for (idx, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NanCost {
                    row: idx / cols,
                    col: idx % cols,
                });
            }
        }
        Ok(CostGrid { rows, cols, values })
    }

    /// Squared Euclidean distance between the cell centers of an `h x w`
    /// grid, flattened row-major on both sides; optionally divided by the
    /// squared grid diagonal so costs live in `[0, 1]`.
    pub fn squared_distance(h: usize, w: usize, normalize: bool) -> Self {
        let n = h * w;
        let diag2 = if normalize && n > 1 {
            ((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64
        } else {
            1.0
        };
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            let (yi, xi) = ((i / w) as f64, (i % w) as f64);
            for j in 0..n {
                let (yj, xj) = ((j / w) as f64, (j % w) as f64);
                let d2 = (yi - yj) * (yi - yj) + (xi - xj) * (xi - xj);
                values[i * n + j] = d2 / diag2.max(1.0);
            }
        }
        CostGrid {
            rows: n,
            cols: n,
            values,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn transpose(&self) -> CostGrid {
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.at(i, j);
            }
        }
        CostGrid {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Entropic OT between histograms `a` and `b` (each nonnegative, summing to
/// one within 1e-9) under the pairwise `cost`. Log-domain updates; empty
/// atoms get `-inf` potentials and carry no mass.
pub fn sinkhorn_ot(a: &[f64], b: &[f64], cost: &CostGrid, config: &OTConfig) -> Result<SinkhornSolution> {
    config.validate()?;
    if a.len() != cost.rows || b.len() != cost.cols {
        return Err(CoreError::Shape(format!(
            "marginals ({}, {}) do not match cost grid {}x{}",
            a.len(),
            b.len(),
            cost.rows,
            cost.cols
        )));
    }
    let sum_a: f64 = a.iter().sum();
    let sum_b: f64 = b.iter().sum();
    if (sum_a - 1.0).abs() > 1e-9 || (sum_b - 1.0).abs() > 1e-9 {
        return Err(CoreError::NotNormalized { sum_a, sum_b });
    }
    if a.iter().chain(b.iter()).any(|&x| x < 0.0) {
        return Err(CoreError::DegenerateInput(
            "marginals must be nonnegative".into(),
        ));
    }

    let eps = config.epsilon;
    let log_a: Vec<f64> = a.iter().map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect();
    let log_b: Vec<f64> = b.iter().map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect();
    let (n, m) = (a.len(), b.len());
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;

    while iterations < config.max_iterations {
        iterations += 1;
        for i in 0..n {
            let lse = logsumexp((0..m).map(|j| (v[j] - cost.at(i, j)) / eps));
            u[i] = eps * log_a[i] - eps * lse;
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| (u[i] - cost.at(i, j)) / eps));
            v[j] = eps * log_b[j] - eps * lse;
        }
        // marginal violation of the current plan
        let mut row_err = 0.0;
        let mut col_sums = vec![0.0; m];
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..m {
                let p = ((u[i] + v[j] - cost.at(i, j)) / eps).exp();
                let p = if p.is_finite() { p } else { 0.0 };
                row += p;
                col_sums[j] += p;
            }
            row_err += (row - a[i]).abs();
        }
        let col_err: f64 = col_sums.iter().zip(b).map(|(s, bj)| (s - bj).abs()).sum();
        marginal_error = row_err + col_err;
        if marginal_error < config.tolerance {
            break;
        }
    }

    let mut sharp = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = ((u[i] + v[j] - cost.at(i, j)) / eps).exp();
            if p.is_finite() {
                sharp += p * cost.at(i, j);
            }
        }
    }
    Ok(SinkhornSolution {
        cost: sharp,
        u,
        v,
        iterations,
        marginal_error,
    })
}
