//! Discrete forward-process noise schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the terminal cumulative signal level. Schedules that do not
/// drive `alpha_bar[T]` below this are not close enough to pure noise.
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 1e-3;

/// Forward corruption schedule over timesteps `1..=T`.
///
/// `alpha_bar[0] == 1` is the clean-data endpoint; `beta[s - 1]` is the
/// variance increment applied when stepping from `s - 1` to `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_steps: usize,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// DDPM linear schedule: betas interpolated from `beta_start` to `beta_end`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "num_steps must be at least 2, got {num_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let last = (num_steps - 1) as f64;
        let beta = (0..num_steps)
            .map(|i| beta_start + (beta_end - beta_start) * (i as f64 / last))
            .collect();
        Self::from_betas(beta)
    }

    /// Builds a schedule from explicit per-step betas (`beta[s - 1]` for step `s`).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        let num_steps = beta.len();
        if num_steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "num_steps must be at least 2, got {num_steps}"
            )));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "beta at step {} is {b}, outside (0, 1)",
                    i + 1
                )));
            }
        }
        if let Some(i) = beta.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::InvalidSchedule(format!(
                "betas must be non-decreasing; step {} has {} after {}",
                i + 2,
                beta[i + 1],
                beta[i]
            )));
        }
        let alpha_bar = cumulative_alpha_bar(&beta);
        let terminal = alpha_bar[num_steps];
        if terminal >= MAX_TERMINAL_ALPHA_BAR {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar[{num_steps}] = {terminal:e} is not below {MAX_TERMINAL_ALPHA_BAR:e}; \
                 the schedule does not reach the pure-noise regime"
            )));
        }
        Ok(Self {
            num_steps,
            alpha_bar,
            beta,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Cumulative signal level at every timestep, `0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `alpha_bar[t]`, panicking when `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub(crate) fn check_timestep(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.num_steps {
            return Err(Error::TimestepOutOfRange {
                t,
                min,
                max: self.num_steps,
            });
        }
        Ok(())
    }

    /// Maps an integer timestep onto `[0, 1]`.
    pub fn normalized(&self, t: usize) -> f64 {
        t as f64 / self.num_steps as f64
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)` for `1 <= t <= T`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_timestep(t, 1)?;
        let ab = self.alpha_bar[t];
        Ok(ab / (1.0 - ab))
    }

    /// Samples `x_t` given clean `x0` and injected noise `eps`:
    /// `sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_timestep(t, 0)?;
        if x0.len() != eps.len() {
            return Err(Error::DimensionMismatch {
                expected: x0.len(),
                actual: eps.len(),
            });
        }
        let ab = self.alpha_bar[t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// Noise estimate consistent with a clean-sample estimate at `x_t`.
    pub fn x0_to_eps(&self, x0hat: &[f64], xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_timestep(t, 1)?;
        check_same_dim(x0hat, xt)?;
        let ab = self.alpha_bar[t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(xt
            .iter()
            .zip(x0hat)
            .map(|(x, x0)| (x - a * x0) / s)
            .collect())
    }

    /// Clean-sample estimate consistent with a noise estimate at `x_t`.
    pub fn eps_to_x0(&self, epshat: &[f64], xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_timestep(t, 1)?;
        check_same_dim(epshat, xt)?;
        let ab = self.alpha_bar[t];
        if ab <= 0.0 {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar[{t}] underflowed to zero; x0 is not recoverable"
            )));
        }
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(xt
            .iter()
            .zip(epshat)
            .map(|(x, e)| (x - s * e) / a)
            .collect())
    }
}

fn cumulative_alpha_bar(beta: &[f64]) -> Vec<f64> {
    let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for &b in beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    alpha_bar
}

fn check_same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: b.len(),
            actual: a.len(),
        });
    }
    Ok(())
}
