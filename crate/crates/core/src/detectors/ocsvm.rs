//! One-class SVM with an RBF kernel. The dual
//! `min 1/2 a'Ka  s.t.  0 <= a_i <= 1/(nu n), sum a = 1`
//! is solved by pairwise coordinate steps on the maximal violating pair.

use serde::{Deserialize, Serialize};

use crate::linalg::sq_dist;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneClassSvm {
    pub gamma: f64,
    pub nu: f64,
    pub rho: f64,
    pub support: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    /// Final maximal KKT violation.
    pub kkt_residual: f64,
    pub iterations: usize,
}

pub const KKT_TOLERANCE: f64 = 1e-6;
const MAX_ITERS: usize = 1_000_000;

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

/// Full solution including zero multipliers, for inspection in tests.
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub grad: Vec<f64>,
    pub rho: f64,
    pub residual: f64,
    pub iterations: usize,
}

pub fn solve_dual(kernel: &[Vec<f64>], nu: f64, tol: f64) -> DualSolution {
    let n = kernel.len();
    let c = 1.0 / (nu * n as f64);
    // Feasible start: fill multipliers to the box bound in order.
    let mut alpha = vec![0.0; n];
    let mut left: f64 = 1.0;
    for a in alpha.iter_mut() {
        let v = left.min(c);
        *a = v;
        left -= v;
        if left <= 0.0 {
            break;
        }
    }
    let mut grad: Vec<f64> = (0..n).map(|i| (0..n).map(|j| kernel[i][j] * alpha[j]).sum()).collect();
    let mut iterations = 0;
    let mut residual;
    loop {
        // i: can grow and has the smallest gradient; j: can shrink, largest.
        let mut i = usize::MAX;
        let mut gi = f64::INFINITY;
        let mut j = usize::MAX;
        let mut gj = f64::NEG_INFINITY;
        for t in 0..n {
            if alpha[t] < c && grad[t] < gi {
                gi = grad[t];
                i = t;
            }
            if alpha[t] > 0.0 && grad[t] > gj {
                gj = grad[t];
                j = t;
            }
        }
        residual = if i == usize::MAX || j == usize::MAX { 0.0 } else { gj - gi };
        if residual <= tol || iterations >= MAX_ITERS {
            break;
        }
        let curv = (kernel[i][i] + kernel[j][j] - 2.0 * kernel[i][j]).max(1e-12);
        let step = ((gj - gi) / curv).min(c - alpha[i]).min(alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        if alpha[j] < 1e-15 {
            alpha[j] = 0.0;
        }
        if c - alpha[i] < 1e-15 {
            alpha[i] = c;
        }
        for (t, g) in grad.iter_mut().enumerate() {
            *g += step * (kernel[t][i] - kernel[t][j]);
        }
        iterations += 1;
    }
    let free: Vec<f64> = (0..n)
        .filter(|&t| alpha[t] > 0.0 && alpha[t] < c)
        .map(|t| grad[t])
        .collect();
    let rho = if free.is_empty() {
        let lo = (0..n).filter(|&t| alpha[t] < c).map(|t| grad[t]).fold(f64::INFINITY, f64::min);
        let hi = (0..n).filter(|&t| alpha[t] > 0.0).map(|t| grad[t]).fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    DualSolution {
        alpha,
        grad,
        rho,
        residual,
        iterations,
    }
}

impl OneClassSvm {
    pub fn fit(points: &[Vec<f64>], nu: f64, gamma: f64) -> Self {
        let kernel: Vec<Vec<f64>> = points
            .iter()
            .map(|a| points.iter().map(|b| rbf(gamma, a, b)).collect())
            .collect();
        let sol = solve_dual(&kernel, nu, KKT_TOLERANCE);
        let (support, alpha) = points
            .iter()
            .zip(&sol.alpha)
            .filter(|(_, &a)| a > 0.0)
            .map(|(p, &a)| (p.clone(), a))
            .unzip();
        Self {
            gamma,
            nu,
            rho: sol.rho,
            support,
            alpha,
            kkt_residual: sol.residual,
            iterations: sol.iterations,
        }
    }

    /// `sum a_i K(s_i, x) - rho`; positive inside the learned region.
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.alpha)
            .map(|(s, a)| a * rbf(self.gamma, s, x))
            .sum::<f64>()
            - self.rho
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        -self.decision(x)
    }
}
