use std::collections::BTreeMap;

use super::Denoiser;
use crate::data::{sq_dist, Condition, PointDataset};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// The loss-minimizing denoiser for a finite dataset: the posterior mean of
/// `x0` given `x_t`, a Gaussian-weighted average of the support points.
///
/// Class conditions restrict the posterior to that class's points; the
/// unconditional tag uses the whole support.
#[derive(Debug, Clone)]
pub struct ClosedFormDenoiser {
    support: PointDataset,
    by_class: BTreeMap<usize, PointDataset>,
    schedule: NoiseSchedule,
}

impl ClosedFormDenoiser {
    pub fn new(support: PointDataset, schedule: NoiseSchedule) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        let mut by_class = BTreeMap::new();
        if support.labels().is_some() {
            for c in 0..support.num_classes() {
                if let Some(subset) = support.class_subset(c) {
                    by_class.insert(c, subset);
                }
            }
        }
        Ok(Self {
            support,
            by_class,
            schedule,
        })
    }

    pub fn support(&self) -> &PointDataset {
        &self.support
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn support_for(&self, cond: Condition) -> Result<&PointDataset> {
        match cond {
            Condition::Unconditional => Ok(&self.support),
            Condition::Class(c) => self.by_class.get(&c).ok_or(Error::UnknownCondition {
                index: c,
                classes: self.support.num_classes(),
            }),
        }
    }

    /// Posterior weights over the support points, normalized by subtracting
    /// the largest log-weight before exponentiating.
    pub fn posterior_weights(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.weights_over(&self.support, xt, t)
    }

    fn weights_over(&self, support: &PointDataset, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.schedule.check_timestep(t, 1)?;
        if xt.len() != support.dim() {
            return Err(Error::DimensionMismatch {
                expected: support.dim(),
                actual: xt.len(),
            });
        }
        if xt.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("noisy input to the ideal denoiser".into()));
        }
        let ab = self.schedule.alpha_bar(t);
        let scale = ab.sqrt();
        let denom = 2.0 * (1.0 - ab);
        let mut logw: Vec<f64> = support
            .iter()
            .map(|x0| {
                let d: f64 = xt
                    .iter()
                    .zip(x0)
                    .map(|(a, b)| (a - scale * b) * (a - scale * b))
                    .sum();
                -d / denom
            })
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for w in logw.iter_mut() {
            *w = (*w - max).exp();
            total += *w;
        }
        logw.iter_mut().for_each(|w| *w /= total);
        Ok(logw)
    }

    /// `E[x0 | x_t]` under the empirical data distribution.
    pub fn ideal_denoise(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.denoise_given(Condition::Unconditional, xt, t)
    }

    pub fn denoise_given(&self, cond: Condition, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        let support = self.support_for(cond)?;
        let w = self.weights_over(support, xt, t)?;
        let mut out = vec![0.0; support.dim()];
        for (wi, x0) in w.iter().zip(support.iter()) {
            for (o, v) in out.iter_mut().zip(x0) {
                *o += wi * v;
            }
        }
        Ok(out)
    }

    /// Support point nearest to `x` (ties resolve to the lowest index).
    pub fn nearest_support_point(&self, x: &[f64]) -> &[f64] {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in self.support.iter().enumerate() {
            let d = sq_dist(p, x);
            if d < best.0 {
                best = (d, i);
            }
        }
        self.support.point(best.1)
    }
}

impl Denoiser for ClosedFormDenoiser {
    fn dim(&self) -> usize {
        self.support.dim()
    }

    fn predict_eps(&self, xt: &[f64], t: usize, cond: Condition, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        if !xt.len().is_multiple_of(d) || out.len() != xt.len() {
            return Err(Error::DimensionMismatch {
                expected: xt.len(),
                actual: out.len(),
            });
        }
        for (x, o) in xt.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let x0 = self.denoise_given(cond, x, t)?;
            o.copy_from_slice(&self.schedule.x0_to_eps(&x0, x, t)?);
        }
        Ok(())
    }
}
