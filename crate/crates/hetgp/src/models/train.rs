//! Adam training loop with per-step fresh minibatches.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

use super::elbo::{elbo, gradient, BatchSel};
use super::ModelState;

/// Optimizer settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Per-task minibatch cap; tasks at or below it run full batch.
    pub batch_size: Option<usize>,
    /// Objective-trace recording interval in steps.
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            iterations: 5000,
            batch_size: Some(512),
            trace_every: 50,
        }
    }
}

/// Adam accumulators over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: usize,
    m: DVector<f64>,
    v: DVector<f64>,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
        }
    }

    /// One ascent step along `grad`.
    pub fn update(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>) {
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] += self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Objective estimates recorded during training.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub steps: Vec<usize>,
    pub estimates: Vec<f64>,
    /// Full-data objective after the final step.
    pub final_elbo: f64,
}

fn sample_batches(model: &ModelState, cap: Option<usize>, rng: &mut ChaCha12Rng) -> BatchSel {
    let indices = model
        .tasks
        .iter()
        .map(|task| {
            let n = task.len();
            match cap {
                Some(b) if b < n => {
                    let mut idx = rand::seq::index::sample(rng, n, b).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..n).collect(),
            }
        })
        .collect();
    BatchSel { indices }
}

/// Runs Adam for the configured number of iterations, drawing fresh
/// minibatches each step. Deterministic given the model's seed. Aborts with
/// a parameter snapshot if the objective turns non-finite.
pub fn train(model: &mut ModelState, cfg: &TrainConfig) -> Result<TrainTrace> {
    if cfg.iterations > 0 && cfg.trace_every == 0 {
        return Err(Error::contract("trace_every must be positive"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(super::derived_seed(model.seed, 400));
    let mut adam = AdamState::new(model.num_params(), cfg.learning_rate);
    let mut steps = Vec::new();
    let mut estimates = Vec::new();

    for step in 0..cfg.iterations {
        let batches = sample_batches(model, cfg.batch_size, &mut rng);
        let (value, grad) = gradient(model, &batches)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteObjective {
                step,
                snapshot: model.flatten().as_slice().to_vec().into_boxed_slice(),
            });
        }
        if step % cfg.trace_every == 0 {
            steps.push(step);
            estimates.push(value);
        }
        let mut flat = model.flatten();
        adam.update(&mut flat, &grad);
        model.set_from_flat(&flat);
    }

    let final_elbo = elbo(model, &BatchSel::full(model))?;
    Ok(TrainTrace {
        steps,
        estimates,
        final_elbo,
    })
}
