//! Reverse-process samplers: DDPM ancestral, deterministic DDIM, classifier-free
//! guidance, and the hybrid sampler that switches denoisers part-way through.

use serde::{Deserialize, Serialize};

use crate::data::{Condition, PointDataset};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{self, fill_standard_normal, standard_normal, StreamRng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    Ddpm,
    Ddim,
}

impl SamplerMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMethod::Ddpm => "ddpm",
            SamplerMethod::Ddim => "ddim",
        }
    }
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ddpm" => Ok(SamplerMethod::Ddpm),
            "ddim" => Ok(SamplerMethod::Ddim),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    /// Length of the timestep sub-sequence; capped at `T`.
    pub num_steps: usize,
    /// Guidance weight `w` in `(1 + w) eps_c - w eps_u`.
    pub cfg_weight: f64,
    pub seed: u64,
    /// Predicted clean samples are clamped to `[-clip, clip]` when set.
    pub clip: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::Ddim,
            num_steps: 50,
            cfg_weight: 0.0,
            seed: 0,
            clip: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return Err(Error::Config(format!(
                "cfg weight must be nonnegative, got {}",
                self.cfg_weight
            )));
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!(
                    "clip bound must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// `(1 + w) * eps_cond - w * eps_uncond`, evaluated as
/// `eps_cond + w * (eps_cond - eps_uncond)` so equal branches pass through
/// unchanged.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::DimensionMismatch {
            expected: eps_cond.len(),
            actual: eps_uncond.len(),
        });
    }
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| c + w * (c - u))
        .collect())
}

/// Descending timesteps visited by an `num_steps`-step sampler: a uniform
/// stride over `1..=T` that keeps both endpoints.
pub fn timestep_sequence(num_steps: usize, schedule_steps: usize) -> Vec<usize> {
    let s = num_steps.min(schedule_steps);
    if s <= 1 {
        return vec![schedule_steps];
    }
    let span = (schedule_steps - 1) as f64;
    let mut ts: Vec<usize> = (0..s)
        .map(|i| 1 + (span * i as f64 / (s - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Number of leading (high-noise) steps handled by the fine-tuned model when
/// a fraction `p` of the `total` steps is handed to the pre-trained model.
pub fn switch_index(p: f64, total: usize) -> usize {
    let k = ((1.0 - p) * total as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(total)
}

/// Per-step record of a sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// States entering the step (`n x d`, row-major).
    pub xt: Vec<f64>,
    /// Predicted clean samples at this step.
    pub x0: Vec<f64>,
}

fn guided_eps(
    denoiser: &dyn Denoiser,
    xt: &[f64],
    t: usize,
    cond: Condition,
    w: f64,
    out: &mut [f64],
) -> Result<()> {
    match cond {
        Condition::Class(_) if w != 0.0 => {
            let mut uncond = vec![0.0; out.len()];
            denoiser.predict_eps(xt, t, cond, out)?;
            denoiser.predict_eps(xt, t, Condition::Unconditional, &mut uncond)?;
            for (c, u) in out.iter_mut().zip(&uncond) {
                *c += w * (*c - u);
            }
            Ok(())
        }
        _ => denoiser.predict_eps(xt, t, cond, out),
    }
}

fn run_chains(
    pick: &dyn Fn(usize) -> usize,
    denoisers: &[&dyn Denoiser],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    n: usize,
    cond: Condition,
    mut trace: Option<&mut Vec<StepRecord>>,
) -> Result<PointDataset> {
    config.validate()?;
    let d = denoisers[0].dim();
    if denoisers.iter().any(|m| m.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: denoisers
                .iter()
                .map(|m| m.dim())
                .find(|&x| x != d)
                .unwrap_or(d),
        });
    }
    if n == 0 {
        return Err(Error::InvalidDataset(
            "sample count must be at least 1".into(),
        ));
    }
    let ts = timestep_sequence(config.num_steps, schedule.num_steps());
    let mut rngs: Vec<StreamRng> = (0..n)
        .map(|c| rng::stream(config.seed, &[rng::label::SAMPLER, c as u64]))
        .collect();
    let mut x = vec![0.0; n * d];
    for (chain, r) in x.chunks_exact_mut(d).zip(rngs.iter_mut()) {
        fill_standard_normal(r, chain);
    }
    let mut eps = vec![0.0; n * d];
    let mut x0 = vec![0.0; n * d];
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        guided_eps(denoisers[pick(k)], &x, t, cond, config.cfg_weight, &mut eps)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in 0..n * d {
            let mut v = (x[i] - s1 * eps[i]) / sa;
            if let Some(c) = config.clip {
                v = v.clamp(-c, c);
            }
            x0[i] = v;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(StepRecord {
                t,
                xt: x.clone(),
                x0: x0.clone(),
            });
        }
        match config.method {
            SamplerMethod::Ddim => {
                let (pa, ps) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                for i in 0..n * d {
                    x[i] = pa * x0[i] + ps * eps[i];
                }
            }
            SamplerMethod::Ddpm => {
                let alpha = ab / ab_prev;
                let beta = 1.0 - alpha;
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
                for (c, r) in rngs.iter_mut().enumerate() {
                    for j in 0..d {
                        let i = c * d + j;
                        let mut v = c0 * x0[i] + ct * x[i];
                        if t_prev > 0 {
                            v += sigma * standard_normal(r);
                        }
                        x[i] = v;
                    }
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSamplerState { step: k, t });
        }
    }
    PointDataset::new(d, x)
}

/// Draws `n` samples by running the reverse process from pure noise.
pub fn sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    n: usize,
    cond: Condition,
) -> Result<PointDataset> {
    run_chains(&|_| 0, &[denoiser], schedule, config, n, cond, None)
}

/// As [`sample`], also returning the per-step states and clean predictions.
pub fn sample_with_trace(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    n: usize,
    cond: Condition,
) -> Result<(PointDataset, Vec<StepRecord>)> {
    let mut trace = Vec::new();
    let out = run_chains(
        &|_| 0,
        &[denoiser],
        schedule,
        config,
        n,
        cond,
        Some(&mut trace),
    )?;
    Ok((out, trace))
}

/// Runs the first `ceil((1 - p) * S)` steps with `finetuned` and the remaining
/// low-noise steps with `pretrained`.
pub fn hybrid_sample(
    finetuned: &dyn Denoiser,
    pretrained: &dyn Denoiser,
    switch_fraction: f64,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    n: usize,
    cond: Condition,
) -> Result<PointDataset> {
    if !(0.0..=1.0).contains(&switch_fraction) {
        return Err(Error::Config(format!(
            "switch fraction must lie in [0, 1], got {switch_fraction}"
        )));
    }
    let total = timestep_sequence(config.num_steps, schedule.num_steps()).len();
    let switch = switch_index(switch_fraction, total);
    run_chains(
        &|k| usize::from(k >= switch),
        &[finetuned, pretrained],
        schedule,
        config,
        n,
        cond,
        None,
    )
}
