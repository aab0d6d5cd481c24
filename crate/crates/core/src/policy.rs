//! Learnable motion threshold.
//!
//! `τ = sigmoid(u)` with `u ~ N(μ, σ²)`, `σ = exp(log σ)`. The two parameters
//! are trained with REINFORCE against an exponential-moving-average baseline,
//! and deployment uses the Monte-Carlo mean of `τ` under the learned policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Scalar;

pub const INIT_MU: f64 = 0.01;
pub const INIT_LOG_SIGMA: f64 = -1.0;
pub const DEFAULT_STEP_SIZE: f64 = 1e-2;
pub const LOG_SIGMA_MIN: f64 = -5.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;
/// `b ← 0.9·b + 0.1·R`
pub const BASELINE_DECAY: f64 = 0.9;
pub const BASELINE_GAIN: f64 = 0.1;
/// Monte-Carlo sample count for the deployment threshold.
pub const DEFAULT_MC_SAMPLES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("threshold {0} outside the open interval (0, 1)")]
    TauOutOfRange(f64),
    #[error("reward {0} is not finite")]
    NonFiniteReward(f64),
    #[error("Monte-Carlo estimate needs at least one sample")]
    NoSamples,
}

pub fn sigmoid<S: Scalar>(u: S) -> S {
    if u >= S::zero() {
        S::one() / (S::one() + (-u).exp())
    } else {
        let e = u.exp();
        e / (S::one() + e)
    }
}

pub fn logit<S: Scalar>(tau: S) -> S {
    tau.ln() - (-tau).ln_1p()
}

/// One draw from the policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicySample<S> {
    pub u: S,
    pub tau: S,
    pub log_density: S,
}

/// Diagnostics of one REINFORCE step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyUpdate<S> {
    pub advantage: S,
    pub grad_mu: S,
    pub grad_log_sigma: S,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdPolicy<S> {
    pub mu: S,
    log_sigma: S,
    pub baseline: S,
    pub step_size: S,
}

impl<S: Scalar> Default for ThresholdPolicy<S> {
    fn default() -> Self {
        Self::new(S::lit(INIT_MU), S::lit(INIT_LOG_SIGMA))
    }
}

impl<S: Scalar> ThresholdPolicy<S> {
    pub fn new(mu: S, log_sigma: S) -> Self {
        Self {
            mu,
            log_sigma: Self::clamp(log_sigma),
            baseline: S::zero(),
            step_size: S::lit(DEFAULT_STEP_SIZE),
        }
    }

    pub fn with_step_size(mut self, step_size: S) -> Self {
        self.step_size = step_size;
        self
    }

    fn clamp(log_sigma: S) -> S {
        log_sigma.max(S::lit(LOG_SIGMA_MIN)).min(S::lit(LOG_SIGMA_MAX))
    }

    pub fn log_sigma(&self) -> S {
        self.log_sigma
    }

    pub fn set_log_sigma(&mut self, v: S) {
        self.log_sigma = Self::clamp(v);
    }

    pub fn sigma(&self) -> S {
        self.log_sigma.exp()
    }

    /// Largest `|u|` for which `sigmoid(u)` is still strictly inside `(0, 1)`.
    fn latent_bound() -> S {
        -S::epsilon().ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PolicySample<S> {
        let eps: f64 = StandardNormal.sample(rng);
        let bound = Self::latent_bound();
        let u = (self.mu + self.sigma() * S::lit(eps)).max(-bound).min(bound);
        let tau = sigmoid(u);
        let log_density = self.log_density(tau).expect("bounded latent keeps tau inside (0, 1)");
        PolicySample { u, tau, log_density }
    }

    fn check_tau(tau: S) -> Result<(), PolicyError> {
        if tau > S::zero() && tau < S::one() {
            Ok(())
        } else {
            Err(PolicyError::TauOutOfRange(tau.f64()))
        }
    }

    /// `log N(logit τ; μ, σ²) − log τ − log(1 − τ)`
    pub fn log_density(&self, tau: S) -> Result<S, PolicyError> {
        Self::check_tau(tau)?;
        let z = (logit(tau) - self.mu) / self.sigma();
        let half = S::lit(0.5);
        let log_normal = -half * z * z - self.log_sigma - half * S::lit(2.0 * std::f64::consts::PI).ln();
        Ok(log_normal - tau.ln() - (-tau).ln_1p())
    }

    /// `(∂/∂μ, ∂/∂log σ)` of [`Self::log_density`]: `(z/σ, z² − 1)`.
    pub fn grad_log_density(&self, tau: S) -> Result<(S, S), PolicyError> {
        Self::check_tau(tau)?;
        let sigma = self.sigma();
        let z = (logit(tau) - self.mu) / sigma;
        Ok((z / sigma, z * z - S::one()))
    }

    /// One REINFORCE step `θ ← θ + η·(R − b)·∇θ log π(τ)`, then the baseline
    /// moves toward `R` and `log σ` is clamped.
    pub fn reinforce_update(&mut self, sample: &PolicySample<S>, reward: S) -> Result<PolicyUpdate<S>, PolicyError> {
        if !reward.is_finite() {
            return Err(PolicyError::NonFiniteReward(reward.f64()));
        }
        let (grad_mu, grad_log_sigma) = self.grad_log_density(sample.tau)?;
        let advantage = reward - self.baseline;
        self.mu += self.step_size * advantage * grad_mu;
        self.log_sigma = Self::clamp(self.log_sigma + self.step_size * advantage * grad_log_sigma);
        self.baseline = S::lit(BASELINE_DECAY) * self.baseline + S::lit(BASELINE_GAIN) * reward;
        Ok(PolicyUpdate {
            advantage,
            grad_mu,
            grad_log_sigma,
        })
    }

    /// `(1/K)·Σ sigmoid(μ + σ·ε_k)` with `ε_k` drawn from a generator seeded by `seed`.
    pub fn deterministic_threshold(&self, samples: usize, seed: u64) -> Result<S, PolicyError> {
        if samples == 0 {
            return Err(PolicyError::NoSamples);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = self.sigma();
        let total: S = (0..samples)
            .map(|_| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                sigmoid(self.mu + sigma * S::lit(eps))
            })
            .sum();
        Ok(total / S::from_usize(samples).unwrap())
    }
}
