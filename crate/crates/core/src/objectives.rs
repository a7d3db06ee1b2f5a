//! Training objectives: the plain denoising loss, knowledge retention on
//! memory-bank samples, knowledge reconsolidation on downstream data, and the
//! trainer that descends their sum.
//!
//! Timestep weighting is realised by sampling: rather than multiplying each
//! per-example loss by `xi(t)` or `psi(t)`, timesteps are drawn from the
//! categorical distribution proportional to those coefficients and the
//! unweighted squared error is used.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Condition, MemoryBank, PointDataset};
use crate::denoiser::{Adam, AdamState, Batch, Denoiser, MlpDenoiser, PretrainedSnapshot};
use crate::error::{Error, Result};
use crate::rng::{self, fill_standard_normal, StreamRng};
use crate::schedule::NoiseSchedule;

/// Reconsolidation coefficient family; the retention coefficient is always
/// `1 - psi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CoefficientSchedule {
    /// `psi(t) = t^tau` on normalized time; `tau = 0` means `psi == 1`.
    Power { tau: f64 },
    /// `psi(t) = 1 / (1 + SNR(t))` on the discrete schedule.
    SnrBased,
}

impl Default for CoefficientSchedule {
    fn default() -> Self {
        CoefficientSchedule::Power { tau: 1.0 }
    }
}

impl CoefficientSchedule {
    pub fn power(tau: f64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!(
                "power exponent must be finite and nonnegative, got {tau}"
            )));
        }
        Ok(CoefficientSchedule::Power { tau })
    }

    /// Reconsolidation coefficient at normalized time `t` in `[0, 1]`.
    pub fn psi(&self, t: f64, schedule: &NoiseSchedule) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match *self {
            CoefficientSchedule::Power { tau: 0.0 } => 1.0,
            CoefficientSchedule::Power { tau } => t.powf(tau),
            CoefficientSchedule::SnrBased => {
                let step = (t * schedule.num_steps() as f64).round() as usize;
                // 1 / (1 + ab / (1 - ab)) == 1 - ab, and 0 at the clean endpoint.
                1.0 - schedule.alpha_bar(step)
            }
        }
    }

    /// Retention coefficient `1 - psi`.
    pub fn xi(&self, t: f64, schedule: &NoiseSchedule) -> f64 {
        1.0 - self.psi(t, schedule)
    }
}

/// Which losses a fine-tuning run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain denoising loss on downstream data, uniform timesteps.
    StandardFt,
    /// Retention weighted by `xi` plus reconsolidation weighted by `psi`.
    DiffTuning,
    /// Retention with `xi = 1 - psi`, adaptation with `psi == 1`.
    RetentionOnly,
    /// No retention, adaptation weighted by `psi`.
    ReconsolidationOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::StandardFt,
        Variant::DiffTuning,
        Variant::RetentionOnly,
        Variant::ReconsolidationOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::StandardFt => "standard_ft",
            Variant::DiffTuning => "diff_tuning",
            Variant::RetentionOnly => "retention_only",
            Variant::ReconsolidationOnly => "reconsolidation_only",
        }
    }

    pub fn requires_retention(self) -> bool {
        matches!(self, Variant::RetentionOnly)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Timestep masses over `1..=T` for the retention and adaptation halves.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepMasses {
    pub retention: Vec<f64>,
    pub adaptation: Vec<f64>,
}

impl TimestepMasses {
    pub fn new(variant: Variant, coeffs: CoefficientSchedule, schedule: &NoiseSchedule) -> Self {
        let t_max = schedule.num_steps();
        let over = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
            (1..=t_max).map(|t| f(schedule.normalized(t))).collect()
        };
        let psi = |t| coeffs.psi(t, schedule);
        let xi = |t| coeffs.xi(t, schedule);
        let zero = |_| 0.0;
        let one = |_| 1.0;
        match variant {
            Variant::StandardFt => Self {
                retention: over(&zero),
                adaptation: over(&one),
            },
            Variant::DiffTuning => Self {
                retention: over(&xi),
                adaptation: over(&psi),
            },
            Variant::RetentionOnly => Self {
                retention: over(&xi),
                adaptation: over(&one),
            },
            Variant::ReconsolidationOnly => Self {
                retention: over(&zero),
                adaptation: over(&psi),
            },
        }
    }
}

/// Categorical sampler over timesteps `1..=T`.
#[derive(Debug, Clone)]
pub enum TimestepSampler {
    /// Equal mass on every step; draws with `random_range(1..=T)`.
    Uniform(usize),
    Weighted(WeightedIndex<f64>),
}

impl TimestepSampler {
    /// Normalizes `masses` (index `i` is timestep `i + 1`). Fails when every
    /// mass is zero.
    pub fn new(masses: &[f64], what: &'static str) -> Result<Self> {
        if masses.is_empty() || masses.iter().all(|&m| m == 0.0) {
            return Err(Error::EmptyCategorical(what));
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Config(format!(
                "{what} timestep masses must be finite and nonnegative"
            )));
        }
        if masses.iter().all(|&m| m == masses[0]) {
            return Ok(TimestepSampler::Uniform(masses.len()));
        }
        WeightedIndex::new(masses)
            .map(TimestepSampler::Weighted)
            .map_err(|e| Error::Config(format!("{what} timestep masses: {e}")))
    }

    pub fn uniform(num_steps: usize) -> Self {
        TimestepSampler::Uniform(num_steps)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            TimestepSampler::Uniform(t_max) => rng.random_range(1..=*t_max),
            TimestepSampler::Weighted(w) => w.sample(rng) + 1,
        }
    }
}

/// How condition tags are assigned to drawn examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionPolicy {
    /// Every example uses the unconditional tag (retention branch).
    Unconditional,
    /// True labels, each replaced by the unconditional tag with this probability.
    LabelsWithDropout(f64),
}

/// Draws `count` noisy training examples from `source`: a uniformly chosen
/// point, a timestep from `timesteps`, standard normal noise, and a
/// condition tag. Draw order per example is fixed (index, timestep, noise,
/// dropout) so two callers sharing a stream produce identical batches.
pub fn draw_examples(
    source: &PointDataset,
    count: usize,
    timesteps: &TimestepSampler,
    conditions: ConditionPolicy,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<Batch> {
    let d = source.dim();
    let mut batch = Batch::default();
    let mut eps = vec![0.0; d];
    for _ in 0..count {
        let i = rng.random_range(0..source.len());
        let t = timesteps.sample(rng);
        fill_standard_normal(rng, &mut eps);
        let cond = match conditions {
            ConditionPolicy::Unconditional => Condition::Unconditional,
            ConditionPolicy::LabelsWithDropout(p) => {
                let drop = rng.random::<f64>() < p;
                match source.label(i) {
                    Some(c) if !drop => Condition::Class(c),
                    _ => Condition::Unconditional,
                }
            }
        };
        let xt = schedule.forward_diffuse(source.point(i), t, &eps)?;
        batch.push(&xt, t, cond, &eps);
    }
    Ok(batch)
}

/// Mean over examples of `|eps - f(x_t, t)|^2`, each example evaluated at
/// its own timestep.
pub fn mean_squared_eps_error<D: Denoiser + ?Sized>(model: &D, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    let d = model.dim();
    let mut pred = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..batch.len() {
        model.predict_eps(
            &batch.xt[i * d..(i + 1) * d],
            batch.t[i],
            batch.cond[i],
            &mut pred,
        )?;
        total += pred
            .iter()
            .zip(&batch.target[i * d..(i + 1) * d])
            .map(|(p, e)| (e - p) * (e - p))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// The standard denoising loss on a freshly drawn batch: uniform timesteps,
/// standard normal noise.
pub fn ddpm_loss<D: Denoiser + ?Sized>(
    model: &D,
    data: &PointDataset,
    batch_size: usize,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<f64> {
    let batch = draw_examples(
        data,
        batch_size,
        &TimestepSampler::uniform(schedule.num_steps()),
        ConditionPolicy::Unconditional,
        schedule,
        rng,
    )?;
    mean_squared_eps_error(model, &batch)
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub cfg_dropout: f64,
    pub coefficients: CoefficientSchedule,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            iterations: 2000,
            seed: 0,
            cfg_dropout: 0.1,
            coefficients: CoefficientSchedule::default(),
            variant: Variant::DiffTuning,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(Error::Config(format!(
                "cfg dropout must lie in [0, 1], got {}",
                self.cfg_dropout
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let CoefficientSchedule::Power { tau } = self.coefficients {
            CoefficientSchedule::power(tau)?;
        }
        Ok(())
    }
}

/// Per-step plan derived from a variant and its coefficient schedule.
#[derive(Debug, Clone)]
pub struct StepPlan {
    retention: Option<TimestepSampler>,
    adaptation: TimestepSampler,
    cfg_dropout: f64,
    batch_size: usize,
}

impl StepPlan {
    pub fn new(config: &TrainConfig, schedule: &NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let masses = TimestepMasses::new(config.variant, config.coefficients, schedule);
        let retention =
            if config.variant.requires_retention() || masses.retention.iter().any(|&m| m > 0.0) {
                Some(TimestepSampler::new(&masses.retention, "retention")?)
            } else {
                None
            };
        Ok(Self {
            retention,
            adaptation: TimestepSampler::new(&masses.adaptation, "adaptation")?,
            cfg_dropout: config.cfg_dropout,
            batch_size: config.batch_size,
        })
    }

    pub fn uses_retention(&self) -> bool {
        self.retention.is_some()
    }

    /// Downstream examples per step: half the batch with retention, all of it
    /// without.
    pub fn adaptation_count(&self) -> usize {
        if self.uses_retention() {
            self.batch_size / 2
        } else {
            self.batch_size
        }
    }

    pub fn retention_count(&self) -> usize {
        if self.uses_retention() {
            self.batch_size / 2
        } else {
            0
        }
    }

    pub fn retention_sampler(&self) -> Option<&TimestepSampler> {
        self.retention.as_ref()
    }

    pub fn adaptation_sampler(&self) -> &TimestepSampler {
        &self.adaptation
    }
}

/// The two half-batches of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatches {
    pub retention: Option<Batch>,
    pub adaptation: Batch,
}

/// Draws one step's batches. Retention draws come from the bank with the
/// unconditional tag; adaptation draws come from the downstream data with
/// labels subject to cfg dropout. The two halves use separate streams.
pub fn draw_step_batches(
    plan: &StepPlan,
    downstream: &PointDataset,
    bank: Option<&MemoryBank>,
    schedule: &NoiseSchedule,
    adaptation_rng: &mut StreamRng,
    retention_rng: &mut StreamRng,
) -> Result<StepBatches> {
    let adaptation = draw_examples(
        downstream,
        plan.adaptation_count(),
        &plan.adaptation,
        ConditionPolicy::LabelsWithDropout(plan.cfg_dropout),
        schedule,
        adaptation_rng,
    )?;
    let retention = match &plan.retention {
        None => None,
        Some(sampler) => {
            let bank = bank.ok_or_else(|| {
                Error::Config("this variant needs a memory bank for retention".into())
            })?;
            if bank.dim() != downstream.dim() {
                return Err(Error::DimensionMismatch {
                    expected: downstream.dim(),
                    actual: bank.dim(),
                });
            }
            Some(draw_examples(
                &bank.samples,
                plan.retention_count(),
                sampler,
                ConditionPolicy::Unconditional,
                schedule,
                retention_rng,
            )?)
        }
    };
    Ok(StepBatches {
        retention,
        adaptation,
    })
}

/// Retention and adaptation losses of one step with the gradient of their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub retention: Option<f64>,
    pub adaptation: f64,
}

/// Mean simple-form losses of both halves and the gradient of their sum.
pub fn diff_tuning_step_losses(
    model: &MlpDenoiser,
    batches: &StepBatches,
) -> Result<(StepLosses, Vec<f64>)> {
    let mean_weights = |b: &Batch| vec![1.0 / b.len() as f64; b.len()];
    let (adaptation, mut grad) =
        model.loss_and_gradient(&batches.adaptation, &mean_weights(&batches.adaptation))?;
    let retention = match &batches.retention {
        None => None,
        Some(b) => {
            let (loss, g) = model.loss_and_gradient(b, &mean_weights(b))?;
            grad.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            Some(loss)
        }
    };
    Ok((
        StepLosses {
            retention,
            adaptation,
        },
        grad,
    ))
}

/// Owns the parameters and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: MlpDenoiser,
    snapshot: PretrainedSnapshot,
    optimizer: Adam,
    state: AdamState,
    plan: StepPlan,
    schedule: NoiseSchedule,
    seed: u64,
    iteration: u64,
}

impl Trainer {
    /// Starts from `model`, which also becomes the frozen snapshot.
    pub fn new(model: MlpDenoiser, schedule: NoiseSchedule, config: &TrainConfig) -> Result<Self> {
        let plan = StepPlan::new(config, &schedule)?;
        Ok(Self {
            snapshot: PretrainedSnapshot::new(model.params()),
            state: AdamState::new(model.params().len()),
            optimizer: Adam::with_learning_rate(config.learning_rate),
            model,
            plan,
            schedule,
            seed: config.seed,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &MlpDenoiser {
        &self.model
    }

    pub fn into_model(self) -> MlpDenoiser {
        self.model
    }

    pub fn snapshot(&self) -> &PretrainedSnapshot {
        &self.snapshot
    }

    pub fn plan(&self) -> &StepPlan {
        &self.plan
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// One optimizer step on freshly drawn batches.
    pub fn step(
        &mut self,
        downstream: &PointDataset,
        bank: Option<&MemoryBank>,
    ) -> Result<StepLosses> {
        let mut adaptation_rng = rng::stream(
            self.seed,
            &[rng::label::TRAIN, self.iteration, rng::label::ADAPTATION],
        );
        let mut retention_rng = rng::stream(
            self.seed,
            &[rng::label::TRAIN, self.iteration, rng::label::RETENTION],
        );
        let batches = draw_step_batches(
            &self.plan,
            downstream,
            bank,
            &self.schedule,
            &mut adaptation_rng,
            &mut retention_rng,
        )?;
        let (losses, grad) = diff_tuning_step_losses(&self.model, &batches)?;
        self.optimizer
            .step(self.model.params_mut(), &grad, &mut self.state)?;
        self.iteration += 1;
        Ok(losses)
    }
}
