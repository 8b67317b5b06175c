//! Differentially private optimization: Poisson subsampling, per-record
//! clipping, the Gaussian mechanism on the clipped sum, and DP-Adam.
//!
//! Each step draws a Poisson batch, computes one gradient per selected
//! record, clips each to `C`, sums in index order, adds `N(0, σ²C²I)`, and
//! divides by the *expected* batch size `B`. The Adam update is then applied
//! to that noised mean.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::seed;

/// Slack allowed on the clip bound when checking sensitivity.
pub const CLIP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpOptimConfig {
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub noise_multiplier: f64,
    pub expected_batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_clip() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl DpOptimConfig {
    pub fn new(expected_batch_size: usize, learning_rate: f64) -> Self {
        DpOptimConfig {
            clip_norm: default_clip(),
            noise_multiplier: 0.0,
            expected_batch_size,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: 0,
        }
    }

    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("optim.clip_norm", "must be positive"));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::config(
                "optim.noise_multiplier",
                "must be finite and non-negative",
            ));
        }
        if self.expected_batch_size == 0 || self.expected_batch_size > dataset_size {
            return Err(Error::config(
                "optim.expected_batch_size",
                format!("{} is not in [1, {dataset_size}]", self.expected_batch_size),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("optim.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta", "decay rates must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Poisson sampling rate `B / n`.
    pub fn sampling_rate(&self, dataset_size: usize) -> f64 {
        self.expected_batch_size as f64 / dataset_size as f64
    }
}

/// Indices in `0..n`, each included independently with probability `q`.
pub fn poisson_sample(n: usize, q: f64, seed: u64, step: u64) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    if q <= 0.0 {
        return Vec::new();
    }
    let mut rng = seed::stream(seed, "poisson", step);
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `g · min(1, C / ‖g‖₂)`.
pub fn clip(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip_norm);
    out
}

pub fn clip_in_place(g: &mut [f64], clip_norm: f64) {
    let norm = l2_norm(g);
    if norm > clip_norm {
        let s = clip_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

/// `(Σ clipped + z) / B` with `z ~ N(0, (σC)² I)`. With `σ = 0` no noise is
/// drawn. `dim` is needed for the empty-batch case.
pub fn noised_sum(
    clipped: &[Vec<f64>],
    dim: usize,
    clip_norm: f64,
    noise_multiplier: f64,
    expected_batch_size: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    for g in clipped {
        if g.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: g.len(),
            });
        }
        let norm = l2_norm(g);
        if norm > clip_norm + CLIP_TOLERANCE {
            return Err(Error::Unclipped { norm, clip: clip_norm });
        }
        for (s, x) in sum.iter_mut().zip(g) {
            *s += x;
        }
    }
    if noise_multiplier > 0.0 {
        let std = noise_multiplier * clip_norm;
        for s in sum.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *s += std * z;
        }
    }
    for s in sum.iter_mut() {
        *s /= expected_batch_size;
    }
    Ok(sum)
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        OptimizerState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` along `grad`.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let dim = params.len();
    if grad.len() != dim || state.m.len() != dim || state.v.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: grad.len(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..dim {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("parameters after Adam update".into()));
    }
    Ok(())
}

/// DP-Adam update on an already noised, averaged gradient.
pub fn dp_adam_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    noised_grad: &[f64],
    cfg: &DpOptimConfig,
) -> Result<()> {
    adam_step(
        state,
        params,
        noised_grad,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    )
}

/// Statistics of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub batch_size: usize,
    /// Fraction of per-record gradients that were scaled down.
    pub clipped_fraction: f64,
}

/// Stateful DP-Adam driver with separate sampling and noise streams.
#[derive(Debug, Clone)]
pub struct DpTrainer {
    cfg: DpOptimConfig,
    dataset_size: usize,
    state: OptimizerState,
    noise: ChaCha8Rng,
    steps: u64,
}

impl DpTrainer {
    pub fn new(cfg: DpOptimConfig, dataset_size: usize, dim: usize) -> Result<Self> {
        cfg.validate(dataset_size)?;
        let noise = seed::stream(cfg.seed, "gradient-noise", 0);
        Ok(DpTrainer {
            cfg,
            dataset_size,
            state: OptimizerState::new(dim),
            noise,
            steps: 0,
        })
    }

    pub fn config(&self) -> &DpOptimConfig {
        &self.cfg
    }

    pub fn sampling_rate(&self) -> f64 {
        self.cfg.sampling_rate(self.dataset_size)
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Draw the next batch and return its noised mean gradient.
    ///
    /// `grad_of(i)` must return the unclipped gradient of record `i`.
    pub fn noisy_gradient<F>(&mut self, grad_of: F) -> Result<(Vec<f64>, StepStats)>
    where
        F: Fn(usize) -> Result<Vec<f64>> + Sync + Send,
    {
        let batch = poisson_sample(self.dataset_size, self.sampling_rate(), self.cfg.seed, self.steps);
        let c = self.cfg.clip_norm;
        let grads: Vec<Result<(Vec<f64>, bool)>> = parallel::map_slice(&batch, |&i| {
            let mut g = grad_of(i)?;
            let was_clipped = l2_norm(&g) > c;
            clip_in_place(&mut g, c);
            Ok((g, was_clipped))
        });
        let mut clipped = Vec::with_capacity(grads.len());
        let mut n_clipped = 0usize;
        for r in grads {
            let (g, was) = r?;
            n_clipped += was as usize;
            clipped.push(g);
        }
        let dim = self.state.m.len();
        let noised = noised_sum(
            &clipped,
            dim,
            c,
            self.cfg.noise_multiplier,
            self.cfg.expected_batch_size as f64,
            &mut self.noise,
        )?;
        let stats = StepStats {
            batch_size: batch.len(),
            clipped_fraction: if batch.is_empty() {
                0.0
            } else {
                n_clipped as f64 / batch.len() as f64
            },
        };
        Ok((noised, stats))
    }

    /// Apply the Adam update for a gradient from [`noisy_gradient`](Self::noisy_gradient).
    pub fn apply(&mut self, params: &mut [f64], noised: &[f64]) -> Result<()> {
        dp_adam_step(&mut self.state, params, noised, &self.cfg)?;
        self.steps += 1;
        Ok(())
    }
}

/// Plain (non-private) Adam on mean unclipped minibatch gradients.
#[derive(Debug, Clone)]
pub struct AdamTrainer {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: OptimizerState,
}

impl AdamTrainer {
    pub fn new(learning_rate: f64, dim: usize) -> Self {
        AdamTrainer {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            state: OptimizerState::new(dim),
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Mean of `grad_of(i)` over `batch`, summed in batch order.
    pub fn mean_gradient<F>(&self, batch: &[usize], grad_of: F) -> Result<Vec<f64>>
    where
        F: Fn(usize) -> Result<Vec<f64>> + Sync + Send,
    {
        let dim = self.state.m.len();
        let grads = parallel::map_slice(batch, |&i| grad_of(i));
        let mut sum = vec![0.0; dim];
        for g in grads {
            let g = g?;
            for (s, x) in sum.iter_mut().zip(&g) {
                *s += x;
            }
        }
        let n = batch.len().max(1) as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        Ok(sum)
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        adam_step(
            &mut self.state,
            params,
            grad,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.eps,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_extremes() {
        assert_eq!(poisson_sample(7, 1.0, 0, 0), (0..7).collect::<Vec<_>>());
        assert!(poisson_sample(1000, 0.0, 0, 0).is_empty());
        assert_eq!(poisson_sample(100, 0.3, 4, 2), poisson_sample(100, 0.3, 4, 2));
        assert_ne!(poisson_sample(100, 0.3, 4, 2), poisson_sample(100, 0.3, 4, 3));
    }

    #[test]
    fn clip_cases() {
        assert_eq!(clip(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
        let g = clip(&[6.0, 8.0], 5.0);
        assert!((l2_norm(&g) - 5.0).abs() < 1e-12);
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
        assert_eq!(clip(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
    }

    #[test]
    fn noised_sum_rejects_unclipped() {
        let mut rng = seed::stream(0, "t", 0);
        let r = noised_sum(&[vec![3.0, 4.0]], 2, 1.0, 1.0, 1.0, &mut rng);
        assert!(matches!(r, Err(Error::Unclipped { .. })));
    }

    #[test]
    fn noised_sum_without_noise() {
        let mut rng = seed::stream(0, "t", 0);
        let out = noised_sum(&[vec![0.6, 0.8], vec![0.0, 1.0]], 2, 1.0, 0.0, 2.0, &mut rng).unwrap();
        assert_eq!(out, vec![0.3, 0.9]);
        let opp = noised_sum(&[vec![0.6, 0.8], vec![-0.6, -0.8]], 2, 1.0, 0.0, 2.0, &mut rng).unwrap();
        assert_eq!(opp, vec![0.0, 0.0]);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = OptimizerState::new(3);
        let mut p = vec![1.0, -2.0, 3.0];
        adam_step(&mut s, &mut p, &[0.0; 3], 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_constant_gradient_moves_by_learning_rate() {
        let mut s = OptimizerState::new(2);
        let mut p = vec![0.0, 0.0];
        let g = [0.5, -2.0];
        for _ in 0..200 {
            let before = p.clone();
            adam_step(&mut s, &mut p, &g, 0.01, 0.9, 0.999, 1e-8).unwrap();
            assert!(p[0] < before[0] && p[1] > before[1]);
            assert!(((before[0] - p[0]) - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_rejects_dimension_mismatch() {
        let mut s = OptimizerState::new(2);
        let mut p = vec![0.0; 2];
        assert!(adam_step(&mut s, &mut p, &[1.0], 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = DpOptimConfig::new(10, 1e-3);
        assert!(c.validate(100).is_ok());
        assert!(c.validate(5).is_err());
        c.clip_norm = 0.0;
        assert!(c.validate(100).is_err());
    }
}
