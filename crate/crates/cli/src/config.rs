//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers. Every key has a default, so an empty file is a valid config;
//! unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use difftune_core::objectives::{CoefficientSchedule, TrainConfig, Variant};
use difftune_core::sampler::SamplerMethod;
use difftune_core::{DistributionKind, DistributionSpec, MlpArch, NoiseSchedule};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

/// Parsed but untyped configuration text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| CliError::Syntax {
                    line: line_no,
                    message: format!("unterminated section header `{line}`"),
                })?;
                section = Some(name.trim().to_string());
                raw.sections.entry(name.trim().to_string()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Syntax {
                line: line_no,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let sec = section.clone().ok_or_else(|| CliError::Syntax {
                line: line_no,
                message: "key outside of any [section]".into(),
            })?;
            let previous = raw
                .sections
                .entry(sec.clone())
                .or_default()
                .insert(k.trim().to_string(), v.trim().to_string());
            if previous.is_some() {
                return Err(CliError::Syntax {
                    line: line_no,
                    message: format!("duplicate key `{sec}.{}`", k.trim()),
                });
            }
        }
        Ok(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// Applies a `section.key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
        let (section, key) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| CliError::Config(format!("override key `{key}` is not section.key")))?;
        self.set(section, key, value.trim());
        Ok(())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    /// Sorted, comment-free rendering used for hashing.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (name, keys) in &self.sections {
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in keys {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

/// Reads typed values out of one section, remembering which keys were used.
struct Section<'a> {
    name: &'static str,
    keys: Option<&'a BTreeMap<String, String>>,
    used: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn new(raw: &'a RawConfig, name: &'static str) -> Self {
        Self {
            name,
            keys: raw.sections.get(name),
            used: Vec::new(),
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a str> {
        self.used.push(key);
        self.keys.and_then(|k| k.get(key)).map(String::as_str)
    }

    fn bad(&self, key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
        CliError::Config(format!("{}.{key} = `{value}`: {why}", self.name))
    }

    fn opt<T: FromStr>(&mut self, key: &'static str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| self.bad(key, v, e)),
        }
    }

    fn get<T: FromStr>(&mut self, key: &'static str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&mut self, key: &'static str, sep: char) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(sep)
                .map(|item| item.trim().parse().map_err(|e| self.bad(key, v, e)))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(keys) = self.keys {
            if let Some(k) = keys.keys().find(|k| !self.used.contains(&k.as_str())) {
                return Err(CliError::Config(format!("unknown key `{}.{k}`", self.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Pretrain,
    MakeBank,
    Finetune,
    ForgettingSweep,
    TauSweep,
    BankSizeSweep,
    Eval,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Pretrain,
        ExperimentKind::MakeBank,
        ExperimentKind::Finetune,
        ExperimentKind::ForgettingSweep,
        ExperimentKind::TauSweep,
        ExperimentKind::BankSizeSweep,
        ExperimentKind::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Pretrain => "pretrain",
            ExperimentKind::MakeBank => "make_bank",
            ExperimentKind::Finetune => "finetune",
            ExperimentKind::ForgettingSweep => "forgetting_sweep",
            ExperimentKind::TauSweep => "tau_sweep",
            ExperimentKind::BankSizeSweep => "bank_size_sweep",
            ExperimentKind::Eval => "eval",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim().replace('-', "_");
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown experiment kind `{s}`"))
    }
}

/// How evaluation and bank samples are conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleConditioning {
    /// Every sample uses the unconditional tag.
    Unconditional,
    /// Samples split evenly over the model's classes.
    PerClass,
}

impl FromStr for SampleConditioning {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "uncond" | "unconditional" => Ok(SampleConditioning::Unconditional),
            "per_class" => Ok(SampleConditioning::PerClass),
            other => Err(format!("expected `uncond` or `per_class`, found `{other}`")),
        }
    }
}

/// A number, or `none`/`median` for an absent value.
struct OptionalF64(Option<f64>);

impl FromStr for OptionalF64 {
    type Err = std::num::ParseFloatError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "none" | "median" => Ok(OptionalF64(None)),
            v => v.parse().map(|x| OptionalF64(Some(x))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataParams {
    pub spec: DistributionSpec,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleParams {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(
            self.num_steps,
            self.beta_start,
            self.beta_end,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelParams {
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub cond_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainParams {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cfg_dropout: f64,
    pub log_interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainParams {
    pub variant: Variant,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cfg_dropout: f64,
    pub coefficients: CoefficientSchedule,
    /// Iterations between validation evaluations; 0 disables them.
    pub validation_interval: usize,
    pub validation_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerParams {
    pub method: SamplerMethod,
    pub steps: usize,
    pub cfg_weight: f64,
    /// Bound applied to predicted clean samples; `None` disables clipping.
    /// `auto` resolves to 1.1 times the largest coordinate magnitude of the
    /// source and target training sets.
    pub clip: Option<f64>,
    pub conditioning: SampleConditioning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalParams {
    pub samples: usize,
    pub reference_samples: usize,
    pub projections: usize,
    /// RBF bandwidth; `None` selects the median heuristic. The default
    /// matches the component width of the default mixtures.
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepParams {
    pub taus: Vec<f64>,
    pub bank_sizes: Vec<usize>,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IoParams {
    pub out_dir: PathBuf,
    pub pretrained: PathBuf,
    pub finetuned: PathBuf,
    pub bank: PathBuf,
}

/// Fully typed experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub source: DataParams,
    pub target: DataParams,
    pub model: ModelParams,
    pub pretrain: PretrainParams,
    pub train: TrainParams,
    pub sampler: SamplerParams,
    pub bank_size: usize,
    pub eval: EvalParams,
    pub sweep: SweepParams,
    pub io: IoParams,
    pub config_hash: String,
}

fn distribution(raw: &RawConfig, name: &'static str, default: &DataParams) -> Result<DataParams> {
    let mut s = Section::new(raw, name);
    let samples = s.get("samples", default.samples)?;
    let kind = match s.raw("kind") {
        None => {
            // Keep the default distribution; only the sample count may change.
            s.finish()?;
            return Ok(DataParams {
                spec: default.spec.clone(),
                samples,
            });
        }
        Some(k) => DistributionKind::from_str(k).map_err(|e| s.bad("kind", k, e))?,
    };
    let spec = match kind {
        DistributionKind::GaussianMixture => {
            let std = s.get("std", 0.1)?;
            let weights = s.list::<f64>("weights", ',')?;
            let means = match s.raw("means") {
                Some(m) => m
                    .split(';')
                    .map(|row| {
                        row.split(',')
                            .map(|v| v.trim().parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| s.bad("means", m, e))?,
                None => {
                    let modes = s.get("modes", 4usize)?;
                    let radius = s.get("radius", 2.0)?;
                    let rotation_deg = s.get("rotation_deg", 0.0f64)?;
                    let center = s.list::<f64>("center", ',')?.unwrap_or(vec![0.0, 0.0]);
                    if center.len() != 2 {
                        return Err(s.bad("center", "", "expected two coordinates"));
                    }
                    match DistributionSpec::mixture_on_circle(
                        modes,
                        radius,
                        std,
                        rotation_deg.to_radians(),
                        [center[0], center[1]],
                    ) {
                        DistributionSpec::GaussianMixture { means, .. } => means,
                        _ => unreachable!(),
                    }
                }
            };
            DistributionSpec::GaussianMixture {
                means,
                std,
                weights,
            }
        }
        DistributionKind::Ring => {
            let center = s.list::<f64>("center", ',')?.unwrap_or(vec![0.0, 0.0]);
            if center.len() != 2 {
                return Err(s.bad("center", "", "expected two coordinates"));
            }
            DistributionSpec::Ring {
                radius: s.get("radius", 2.0)?,
                std: s.get("std", 0.1)?,
                center: [center[0], center[1]],
            }
        }
        DistributionKind::TwoSpirals => DistributionSpec::TwoSpirals {
            turns: s.get("turns", 1.5)?,
            scale: s.get("scale", 2.0)?,
            std: s.get("std", 0.05)?,
        },
        DistributionKind::Checkerboard => DistributionSpec::Checkerboard {
            cells: s.get("cells", 4)?,
            half_width: s.get("half_width", 2.0)?,
        },
    };
    s.finish()?;
    Ok(DataParams { spec, samples })
}

fn coefficients(s: &mut Section<'_>, default: CoefficientSchedule) -> Result<CoefficientSchedule> {
    let default_tau = match default {
        CoefficientSchedule::Power { tau } => tau,
        CoefficientSchedule::SnrBased => 1.0,
    };
    let tau = s.get("tau", default_tau)?;
    match s.raw("coefficients") {
        None => match default {
            CoefficientSchedule::SnrBased => Ok(default),
            CoefficientSchedule::Power { .. } => Ok(CoefficientSchedule::power(tau)?),
        },
        Some("power") => Ok(CoefficientSchedule::power(tau)?),
        Some("snr") | Some("snr_based") => Ok(CoefficientSchedule::SnrBased),
        Some(other) => Err(s.bad("coefficients", other, "expected `power` or `snr`")),
    }
}

impl ExperimentConfig {
    /// Source: four modes on a circle. Target: the same layout rotated and
    /// shifted, observed through a small training set.
    pub fn default_source() -> DataParams {
        DataParams {
            spec: DistributionSpec::mixture_on_circle(4, 2.0, 0.25, 0.0, [0.0, 0.0]),
            samples: 5000,
        }
    }

    pub fn default_target() -> DataParams {
        DataParams {
            spec: DistributionSpec::mixture_on_circle(4, 2.0, 0.25, 30f64.to_radians(), [0.5, 0.0]),
            samples: 16,
        }
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        for name in raw.sections.keys() {
            const KNOWN: [&str; 12] = [
                "experiment",
                "schedule",
                "source",
                "target",
                "model",
                "pretrain",
                "train",
                "sampler",
                "bank",
                "eval",
                "sweep",
                "io",
            ];
            if !KNOWN.contains(&name.as_str()) {
                return Err(CliError::Config(format!("unknown section `[{name}]`")));
            }
        }

        let mut s = Section::new(raw, "experiment");
        let kind = s.get("kind", ExperimentKind::Finetune)?;
        let seed: u64 = s
            .opt("seed")?
            .ok_or_else(|| CliError::Config("experiment.seed is mandatory".into()))?;
        s.finish()?;

        let mut s = Section::new(raw, "schedule");
        let schedule = ScheduleParams {
            num_steps: s.get("num_steps", 1000)?,
            beta_start: s.get("beta_start", 1e-4)?,
            beta_end: s.get("beta_end", 0.02)?,
        };
        s.finish()?;

        let source = distribution(raw, "source", &Self::default_source())?;
        let target = distribution(raw, "target", &Self::default_target())?;

        let mut s = Section::new(raw, "model");
        let hidden = match s.raw("hidden") {
            None => vec![128; 3],
            Some(h) => h
                .split('x')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| s.bad("hidden", h, e))?,
        };
        let model = ModelParams {
            hidden,
            time_freqs: s.get("time_freqs", 16)?,
            cond_dim: s.get("cond_dim", 8)?,
        };
        s.finish()?;

        let mut s = Section::new(raw, "pretrain");
        let pretrain = PretrainParams {
            iterations: s.get("iterations", 5000)?,
            batch_size: s.get("batch_size", 256)?,
            learning_rate: s.get("learning_rate", 1e-3)?,
            cfg_dropout: s.get("cfg_dropout", 0.1)?,
            log_interval: s.get("log_interval", 100)?,
        };
        s.finish()?;

        let mut s = Section::new(raw, "train");
        let train = TrainParams {
            variant: s.get("variant", Variant::DiffTuning)?,
            iterations: s.get("iterations", 2000)?,
            batch_size: s.get("batch_size", 256)?,
            learning_rate: s.get("learning_rate", 1e-3)?,
            cfg_dropout: s.get("cfg_dropout", 0.1)?,
            coefficients: coefficients(&mut s, CoefficientSchedule::Power { tau: 1.0 })?,
            validation_interval: s.get("validation_interval", 100)?,
            validation_samples: s.get("validation_samples", 256)?,
        };
        s.finish()?;

        let mut s = Section::new(raw, "sampler");
        let clip = match s.raw("clip") {
            None | Some("auto") => None,
            Some(v) => Some(v.parse::<OptionalF64>().map_err(|e| s.bad("clip", v, e))?.0),
        };
        let sampler = SamplerParams {
            method: s.get("method", SamplerMethod::Ddim)?,
            steps: s.get("steps", 50)?,
            cfg_weight: s.get("cfg_weight", 0.0)?,
            clip: None,
            conditioning: s.get("conditioning", SampleConditioning::PerClass)?,
        };
        s.finish()?;

        let mut s = Section::new(raw, "bank");
        let bank_size = s.get("size", 2000)?;
        s.finish()?;

        let mut s = Section::new(raw, "eval");
        let eval = EvalParams {
            samples: s.get("samples", 2000)?,
            reference_samples: s.get("reference_samples", 2000)?,
            projections: s.get("projections", 128)?,
            bandwidth: s.get("bandwidth", OptionalF64(Some(0.25)))?.0,
        };
        s.finish()?;

        let mut s = Section::new(raw, "sweep");
        let sweep = SweepParams {
            taus: s
                .list("taus", ',')?
                .unwrap_or(vec![0.0, 0.3, 0.5, 0.7, 1.0, 1.5]),
            bank_sizes: s
                .list("bank_sizes", ',')?
                .unwrap_or(vec![250, 500, 1000, 2000, 4000]),
            fractions: s
                .list("fractions", ',')?
                .unwrap_or((0..=10).map(|k| k as f64 / 10.0).collect()),
        };
        s.finish()?;

        let mut s = Section::new(raw, "io");
        let out_dir: PathBuf = s.get("out_dir", PathBuf::from("results"))?;
        let io = IoParams {
            pretrained: s.get("pretrained", out_dir.join("pretrained.ckpt"))?,
            finetuned: s.get("finetuned", out_dir.join("finetuned.ckpt"))?,
            bank: s.get("bank", out_dir.join("bank.csv"))?,
            out_dir,
        };
        s.finish()?;

        let mut config = Self {
            kind,
            seed,
            schedule,
            source,
            target,
            model,
            pretrain,
            train,
            sampler,
            bank_size,
            eval,
            sweep,
            io,
            config_hash: raw.hash(),
        };
        config.sampler.clip = match clip {
            Some(explicit) => explicit,
            None => Some(1.1 * crate::runner::data_bound(&config)?),
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks everything that can be checked before any side effect.
    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.train_config(&self.train, self.seed).validate()?;
        TrainConfig {
            batch_size: self.pretrain.batch_size,
            learning_rate: self.pretrain.learning_rate,
            cfg_dropout: self.pretrain.cfg_dropout,
            variant: Variant::StandardFt,
            ..TrainConfig::default()
        }
        .validate()?;
        let src_dim = self.source_dim();
        let tgt_dim = dim_of(&self.target.spec);
        if src_dim != tgt_dim {
            return Err(CliError::Config(format!(
                "source dimension {src_dim} differs from target dimension {tgt_dim}"
            )));
        }
        if self.target.spec.num_classes() > self.source.spec.num_classes().max(1)
            && self.source.spec.num_classes() > 0
        {
            return Err(CliError::Config(format!(
                "target has {} classes but the model is built with {}",
                self.target.spec.num_classes(),
                self.source.spec.num_classes()
            )));
        }
        for (name, n) in [
            ("source.samples", self.source.samples),
            ("target.samples", self.target.samples),
            ("eval.samples", self.eval.samples),
            ("eval.reference_samples", self.eval.reference_samples),
            ("bank.size", self.bank_size),
            ("sampler.steps", self.sampler.steps),
            ("eval.projections", self.eval.projections),
        ] {
            if n == 0 {
                return Err(CliError::Config(format!("{name} must be positive")));
            }
        }
        if let Some(b) = self.eval.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return Err(CliError::Config(format!(
                    "eval.bandwidth must be positive, got {b}"
                )));
            }
        }
        if let Some(c) = self.sampler.clip {
            if c.is_nan() || c <= 0.0 {
                return Err(CliError::Config(format!(
                    "sampler.clip must be positive, got {c}"
                )));
            }
        }
        if self.eval.samples < 2 || self.eval.reference_samples < 2 {
            return Err(CliError::Config(
                "evaluation needs at least two samples on each side".into(),
            ));
        }
        let mut fractions = self.sweep.fractions.clone();
        if fractions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CliError::Config(
                "sweep.fractions must lie in [0, 1]".into(),
            ));
        }
        fractions.sort_by(f64::total_cmp);
        if fractions != self.sweep.fractions {
            return Err(CliError::Config("sweep.fractions must be sorted".into()));
        }
        for tau in &self.sweep.taus {
            CoefficientSchedule::power(*tau)?;
        }
        if self.sweep.bank_sizes.contains(&0) {
            return Err(CliError::Config("sweep.bank_sizes must be positive".into()));
        }
        self.check_inputs()
    }

    fn check_inputs(&self) -> Result<()> {
        let need = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "{} needs {what} at {}, which does not exist",
                    self.kind.as_str(),
                    p.display()
                )))
            }
        };
        match self.kind {
            ExperimentKind::Pretrain => Ok(()),
            ExperimentKind::MakeBank | ExperimentKind::BankSizeSweep => {
                need(&self.io.pretrained, "a pre-trained checkpoint")
            }
            ExperimentKind::Finetune => {
                need(&self.io.pretrained, "a pre-trained checkpoint")?;
                if self.needs_bank(&self.train) {
                    need(&self.io.bank, "a memory bank")?;
                }
                Ok(())
            }
            ExperimentKind::TauSweep => {
                need(&self.io.pretrained, "a pre-trained checkpoint")?;
                need(&self.io.bank, "a memory bank")
            }
            ExperimentKind::ForgettingSweep => {
                need(&self.io.pretrained, "a pre-trained checkpoint")?;
                need(&self.io.finetuned, "a fine-tuned checkpoint")
            }
            ExperimentKind::Eval => need(&self.io.finetuned, "a checkpoint to evaluate"),
        }
    }

    /// Whether a training setup draws retention examples.
    pub fn needs_bank(&self, train: &TrainParams) -> bool {
        match self.schedule.build() {
            Ok(s) => difftune_core::objectives::StepPlan::new(&self.train_config(train, 0), &s)
                .map(|p| p.uses_retention())
                .unwrap_or(true),
            Err(_) => true,
        }
    }

    pub fn source_dim(&self) -> usize {
        dim_of(&self.source.spec)
    }

    pub fn arch(&self) -> MlpArch {
        MlpArch {
            dim: self.source_dim(),
            hidden: self.model.hidden.clone(),
            time_freqs: self.model.time_freqs,
            cond_dim: self.model.cond_dim,
            num_classes: self.source.spec.num_classes(),
        }
    }

    pub fn train_config(&self, train: &TrainParams, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            iterations: train.iterations,
            seed,
            cfg_dropout: train.cfg_dropout,
            coefficients: train.coefficients,
            variant: train.variant,
        }
    }

    /// Header line embedded in every CSV artifact.
    pub fn provenance_line(&self) -> String {
        format!(
            "# config_hash={},seed={},kind={}",
            self.config_hash,
            self.seed,
            self.kind.as_str()
        )
    }
}

fn dim_of(spec: &DistributionSpec) -> usize {
    match spec {
        DistributionSpec::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
        _ => 2,
    }
}
