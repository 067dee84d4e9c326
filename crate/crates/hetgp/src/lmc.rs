//! Linear model of coregionalization: mixing of latent sparse GPs into task
//! outputs, and the per-point likelihood term of the variational objective.
//!
//! Each task output is a linear combination of `Q` shared latent GPs plus
//! task-specific Gaussian noise:
//!
//! ```text
//! y^t(x) = sum_q a[t][q] * f_q(x) + eps^t,   eps^t ~ N(0, noise_t)
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{softplus, softplus_inv};

/// Task-by-latent mixing coefficients `a[t][q]`. Unconstrained.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub a: DMatrix<f64>,
}

impl MixingMatrix {
    /// All-ones initialization of size `tasks x latents`.
    pub fn ones(tasks: usize, latents: usize) -> Self {
        MixingMatrix {
            a: DMatrix::from_element(tasks, latents, 1.0),
        }
    }

    pub fn tasks(&self) -> usize {
        self.a.nrows()
    }

    pub fn latents(&self) -> usize {
        self.a.ncols()
    }
}

/// Per-task observation noise variances, stored unconstrained.
#[derive(Debug, Clone)]
pub struct TaskNoise {
    pub noise_raw: DVector<f64>,
}

impl TaskNoise {
    pub fn with_variance(tasks: usize, variance: f64) -> Result<Self> {
        if variance <= 0.0 {
            return Err(Error::contract("noise variance must be positive"));
        }
        Ok(TaskNoise {
            noise_raw: DVector::from_element(tasks, softplus_inv(variance)),
        })
    }

    /// Constrained noise variance of one task.
    pub fn variance(&self, task: usize) -> f64 {
        softplus(self.noise_raw[task])
    }

    pub fn tasks(&self) -> usize {
        self.noise_raw.len()
    }
}

/// One data point's contribution to the expected log likelihood:
///
/// ```text
/// log N(y | sum_q a_q * mean_q, noise) - 1/(2*noise) * sum_q a_q^2 * var_q
/// ```
///
/// `per_q_moments` holds the `(mean, variance)` of each latent posterior at
/// the point, from deterministic or expectation-collapsed uncertain moments.
pub fn elbo_likelihood_term(
    mix: &MixingMatrix,
    noise: &TaskNoise,
    task: usize,
    y_i: f64,
    per_q_moments: &[(f64, f64)],
) -> Result<f64> {
    if task >= mix.tasks() || task >= noise.tasks() {
        return Err(Error::contract(format!("task index {task} out of range")));
    }
    if per_q_moments.len() != mix.latents() {
        return Err(Error::contract("per-latent moment count must equal Q"));
    }
    let nv = noise.variance(task);
    if nv <= 0.0 {
        return Err(Error::contract("noise variance must be positive"));
    }
    let mut mean = 0.0;
    let mut var_penalty = 0.0;
    for (q, &(mu, var)) in per_q_moments.iter().enumerate() {
        let a = mix.a[(task, q)];
        mean += a * mu;
        var_penalty += a * a * var;
    }
    let r = y_i - mean;
    let log_lik = -0.5 * ((2.0 * std::f64::consts::PI * nv).ln() + r * r / nv);
    Ok(log_lik - var_penalty / (2.0 * nv))
}

/// Combines per-latent predictive moments into the task-level predictive
/// distribution: `mean = sum_q a_q mu_q`, `var = sum_q a_q^2 v_q + noise`.
pub fn combine_prediction(
    mix: &MixingMatrix,
    noise: &TaskNoise,
    task: usize,
    per_q_moments: &[(f64, f64)],
) -> Result<(f64, f64)> {
    if task >= mix.tasks() || task >= noise.tasks() {
        return Err(Error::contract(format!("task index {task} out of range")));
    }
    let mut mean = 0.0;
    let mut var = noise.variance(task);
    for (q, &(mu, v)) in per_q_moments.iter().enumerate() {
        let a = mix.a[(task, q)];
        mean += a * mu;
        var += a * a * v;
    }
    Ok((mean, var))
}
