//! Per-eigendirection contraction of gradient descent with a per-step
//! fusion coefficient, checked on exact quadratics.
//!
//! The iterate is simulated in a randomly rotated basis so the check is not
//! a restatement of the recursion: each step's deviation is projected back
//! onto the eigenvectors and compared against `(1 − η ξ_t λ_i) α_i^t`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadraticProblem {
    /// Ascending positive curvatures.
    pub eigenvalues: Vec<f64>,
    /// Defaults to the origin.
    pub minimizer: Option<Vec<f64>>,
    pub alpha0: Vec<f64>,
    pub eta: f64,
    /// Coefficient per step, cycled when shorter than the run.
    pub xi_schedule: Vec<f64>,
    /// Seed of the random eigenbasis; `None` uses the standard basis.
    pub basis_seed: Option<u64>,
}

impl Default for QuadraticProblem {
    fn default() -> Self {
        Self {
            eigenvalues: vec![1.0, 10.0],
            minimizer: None,
            alpha0: vec![1.0, 1.0],
            eta: 0.05,
            xi_schedule: vec![0.5],
            basis_seed: Some(0),
        }
    }
}

impl QuadraticProblem {
    pub fn validate(&self) -> Result<()> {
        let d = self.eigenvalues.len();
        if d == 0 || self.alpha0.len() != d {
            return Err(Error::Config("eigenvalues and alpha0 must be non-empty and equally long".into()));
        }
        if self.eigenvalues.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("eigenvalues must be positive".into()));
        }
        if self.eigenvalues.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("eigenvalues must be sorted ascending".into()));
        }
        if self.minimizer.as_ref().is_some_and(|m| m.len() != d) {
            return Err(Error::Config("minimizer dimension mismatch".into()));
        }
        if !(self.eta > 0.0) || self.xi_schedule.is_empty() || self.xi_schedule.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Config("eta and every xi must be positive; schedule must be non-empty".into()));
        }
        Ok(())
    }

    pub fn xi_at(&self, t: usize) -> f64 {
        self.xi_schedule[t % self.xi_schedule.len()]
    }

    /// `max_t η ξ_t λ_max < 2`.
    pub fn is_stable(&self) -> bool {
        let xi_max = self.xi_schedule.iter().copied().fold(0.0, f64::max);
        self.eta * xi_max * self.eigenvalues.last().unwrap() < 2.0
    }

    fn basis(&self) -> DMatrix<f64> {
        let d = self.eigenvalues.len();
        match self.basis_seed {
            None => DMatrix::identity(d, d),
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
                g.qr().q()
            }
        }
    }
}

/// How the modulated step compares with the unmodulated one along a direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCase {
    Smaller,
    Equal,
    Larger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub steps: usize,
    pub stable: bool,
    /// `alpha[t][i]` for `t = 0..=steps`.
    pub alpha: Vec<Vec<f64>>,
    /// `‖Δ_t‖` for `t = 0..=steps`.
    pub deviation_norm: Vec<f64>,
    pub max_residual: f64,
    /// Per step: `η ξ_t λ_i` versus `η λ_i` (identical across directions).
    pub step_cases: Vec<StepCase>,
    pub tolerance: f64,
    pub passed: bool,
    pub diverged: bool,
}

pub const CONTRACTION_TOLERANCE: f64 = 1e-10;

pub fn step_case(eta: f64, xi: f64, lambda: f64) -> StepCase {
    let (modulated, plain) = (eta * xi * lambda, eta * lambda);
    match modulated.partial_cmp(&plain) {
        Some(std::cmp::Ordering::Less) => StepCase::Smaller,
        Some(std::cmp::Ordering::Equal) => StepCase::Equal,
        _ => StepCase::Larger,
    }
}

/// Simulates `W ← W − η ξ_t ∇L(W)` and checks the recursion at every step.
pub fn verify_contraction(problem: &QuadraticProblem, steps: usize) -> Result<ContractionReport> {
    problem.validate()?;
    let d = problem.eigenvalues.len();
    let q = problem.basis();
    let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&problem.eigenvalues));
    let hessian = &q * lambda * q.transpose();
    let w_star = DVector::from_column_slice(problem.minimizer.as_deref().unwrap_or(&vec![0.0; d]));
    let mut w = &w_star + &q * DVector::from_column_slice(&problem.alpha0);

    let project = |w: &DVector<f64>| -> Vec<f64> { (q.transpose() * (w - &w_star)).iter().copied().collect() };
    let mut alpha = vec![project(&w)];
    let mut deviation_norm = vec![(&w - &w_star).norm()];
    let mut max_residual: f64 = 0.0;
    let mut step_cases = Vec::with_capacity(steps);
    let mut diverged = false;

    for t in 0..steps {
        let xi = problem.xi_at(t);
        let grad = &hessian * (&w - &w_star);
        w -= problem.eta * xi * grad;
        let next = project(&w);
        for i in 0..d {
            let predicted = (1.0 - problem.eta * xi * problem.eigenvalues[i]) * alpha[t][i];
            let scale = alpha[t][i].abs().max(1.0);
            max_residual = max_residual.max((next[i] - predicted).abs() / scale);
        }
        step_cases.push(step_case(problem.eta, xi, problem.eigenvalues[0]));
        let norm = (&w - &w_star).norm();
        if !norm.is_finite() || norm > 1e100 {
            diverged = true;
        }
        deviation_norm.push(norm);
        alpha.push(next);
        if diverged {
            break;
        }
    }
    let stable = problem.is_stable();
    Ok(ContractionReport {
        steps,
        stable,
        alpha,
        deviation_norm,
        max_residual,
        step_cases,
        tolerance: CONTRACTION_TOLERANCE,
        passed: !diverged && max_residual <= CONTRACTION_TOLERANCE,
        diverged: diverged || !stable,
    })
}
