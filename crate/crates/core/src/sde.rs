//! Variance-preserving diffusion coefficients and Euler-Maruyama stepping.
//!
//! Time always runs in diffusion time: sampling integrates from `t = 1`
//! (noise) down to a small cutoff `eps` (data). The forward noising SDE is
//! `dX = -½β(t) X dt + √β(t) dW`, so that `X_t = α(t) X_0 + σ(t) ε` with
//! `α(t)² + σ(t)² = 1`.

use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;

/// Linear β schedule on diffusion time `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0 }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
            bail!(Config, "need 0 < beta_min <= beta_max, got {beta_min}, {beta_max}");
        }
        Ok(Self { beta_min, beta_max })
    }

    #[inline]
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `∫₀ᵗ β(s) ds`.
    #[inline]
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// Diffusion coefficient `g(t) = √β(t)`.
    #[inline]
    pub fn diffusion(&self, t: f64) -> f64 {
        math::sqrt(self.beta(t))
    }

    /// `(α(t), σ(t))` of the perturbation kernel.
    pub fn marginal_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        Ok(self.coeffs_unchecked(t))
    }

    #[inline]
    pub(crate) fn coeffs_unchecked(&self, t: f64) -> (f64, f64) {
        let b = self.integrated_beta(t);
        let alpha = math::exp(-0.5 * b);
        // σ² = 1 - exp(-∫β), via expm1 so that small t keeps precision.
        let sigma = math::sqrt(-math::expm1(-b));
        (alpha, sigma)
    }

    /// Forward drift coefficient: `f(x, t) = -½β(t)x`.
    pub fn forward_drift(&self, x: &[f64], t: f64) -> Vec<f64> {
        let c = -0.5 * self.beta(t);
        x.iter().map(|v| c * v).collect()
    }

    /// Reverse-time drift `-f(x,t) + g(t)²·score = ½β x + β·score`.
    pub fn reverse_drift(&self, x: &[f64], t: f64, score: &[f64]) -> Result<Vec<f64>> {
        if x.len() != score.len() {
            bail!(Shape, "state has dim {}, score has dim {}", x.len(), score.len());
        }
        if !(t > 0.0 && t <= 1.0) {
            bail!(Domain, "reverse drift needs t in (0, 1], got {t}");
        }
        let beta = self.beta(t);
        Ok(reverse_drift_with_beta(x, score, beta))
    }
}

#[inline]
pub(crate) fn reverse_drift_with_beta(x: &[f64], score: &[f64], beta: f64) -> Vec<f64> {
    let half = 0.5 * beta;
    x.iter().zip(score).map(|(xv, sv)| half * xv + beta * sv).collect()
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        bail!(Domain, "diffusion time must lie in [0, 1], got {t}");
    }
    Ok(())
}

/// One Euler-Maruyama step `x + drift·dt + g·√dt·noise`.
///
/// The standard-normal `noise` is supplied by the caller so that runs stay
/// reproducible under a fixed [`crate::noise::NoiseStream`].
pub fn em_step(x: &[f64], dt: f64, drift: &[f64], g: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if drift.len() != x.len() || noise.len() != x.len() {
        bail!(Shape, "em_step: x {}, drift {}, noise {}", x.len(), drift.len(), noise.len());
    }
    if !(dt > 0.0) || !dt.is_finite() {
        bail!(Domain, "em_step needs a positive finite dt, got {dt}");
    }
    if !g.is_finite() || !math::all_finite(x) || !math::all_finite(drift) || !math::all_finite(noise) {
        bail!(Numeric, "em_step received non-finite input");
    }
    let sd = g * math::sqrt(dt);
    Ok(x.iter()
        .zip(drift)
        .zip(noise)
        .map(|((xv, dv), nv)| xv + dv * dt + sd * nv)
        .collect())
}

/// Decreasing time grid `1 = t₀ > t₁ > … > t_{K-1} = eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    eps: f64,
}

impl TimeGrid {
    pub fn linear(steps: usize, eps: f64) -> Result<Self> {
        if steps < 2 {
            bail!(Config, "time grid needs at least 2 points, got {steps}");
        }
        if !(eps > 0.0 && eps < 1.0) {
            bail!(Config, "cutoff eps must lie in (0, 1), got {eps}");
        }
        let h = (1.0 - eps) / (steps - 1) as f64;
        let mut times: Vec<f64> = (0..steps).map(|k| 1.0 - h * k as f64).collect();
        times[steps - 1] = eps;
        Ok(Self { times, eps })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `Δt_k = t_k - t_{k+1}` for `k = 0..K-1`.
    pub fn step(&self, k: usize) -> f64 {
        self.times[k] - self.times[k + 1]
    }

    /// Iterator over `(t_k, Δt_k)` for the `K - 1` integration steps.
    pub fn steps(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.times.windows(2).enumerate().map(|(k, w)| (k, w[0], w[0] - w[1]))
    }
}

/// `N` agent states of common dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiAgentState {
    agents: Vec<Vec<f64>>,
    dim: usize,
}

impl MultiAgentState {
    pub fn new(agents: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = agents.first() else {
            bail!(Shape, "a multi-agent state needs at least one agent");
        };
        let dim = first.len();
        if agents.iter().any(|a| a.len() != dim) {
            bail!(Shape, "agent states must share one dimension");
        }
        if agents.iter().any(|a| !math::all_finite(a)) {
            return Err(Error::Numeric("agent state contains non-finite entries".into()));
        }
        Ok(Self { agents, dim })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.agents[i]
    }

    pub fn agents(&self) -> &[Vec<f64>] {
        &self.agents
    }
}
