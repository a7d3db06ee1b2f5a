//! Executes one experiment kind and writes its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use difftune_core::data::{format_f64, make_distribution, save_memory_bank};
use difftune_core::metrics::{ewc_l2, EvalSettings, ForgettingRow, MetricReport};
use difftune_core::rng::{derive_seed, label};
use difftune_core::{
    hybrid_sample, load_checkpoint, load_memory_bank, save_checkpoint, CoefficientSchedule,
    Condition, MemoryBank, MlpDenoiser, NoiseSchedule, PointDataset, Provenance, SamplerConfig,
    Trainer, Variant,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind, SampleConditioning, TrainParams};
use crate::error::{io_err, CliError, Result};

/// Stream labels local to the runner; disjoint from the core labels.
mod stream {
    pub const SOURCE: u64 = 101;
    pub const TARGET: u64 = 102;
    pub const REFERENCE: u64 = 103;
    pub const VALIDATION: u64 = 104;
    pub const CELL: u64 = 105;
}

/// What a run produced.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub artifacts: Vec<PathBuf>,
    /// Named evaluation results in emission order.
    pub reports: Vec<(String, MetricReport)>,
}

/// Final state of one fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: MlpDenoiser,
    pub report: MetricReport,
    pub ewc: f64,
}

pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    fs::create_dir_all(&config.io.out_dir).map_err(io_err(&config.io.out_dir))?;
    match config.kind {
        ExperimentKind::Pretrain => pretrain(config),
        ExperimentKind::MakeBank => make_bank(config),
        ExperimentKind::Finetune => finetune(config),
        ExperimentKind::ForgettingSweep => forgetting_sweep(config),
        ExperimentKind::TauSweep => tau_sweep(config),
        ExperimentKind::BankSizeSweep => bank_size_sweep(config),
        ExperimentKind::Eval => eval(config),
    }
}

pub fn source_data(config: &ExperimentConfig) -> Result<PointDataset> {
    Ok(make_distribution(
        &config.source.spec,
        config.source.samples,
        derive_seed(config.seed, &[stream::SOURCE]),
    )?)
}

/// The small downstream training set.
pub fn target_data(config: &ExperimentConfig) -> Result<PointDataset> {
    Ok(make_distribution(
        &config.target.spec,
        config.target.samples,
        derive_seed(config.seed, &[stream::TARGET]),
    )?)
}

/// Largest coordinate magnitude over the source and target training sets.
pub fn data_bound(config: &ExperimentConfig) -> Result<f64> {
    Ok(source_data(config)?
        .bound()
        .max(target_data(config)?.bound()))
}

/// Fresh target samples used only for evaluation.
pub fn reference_data(config: &ExperimentConfig) -> Result<PointDataset> {
    Ok(make_distribution(
        &config.target.spec,
        config.eval.reference_samples,
        derive_seed(config.seed, &[stream::REFERENCE]),
    )?)
}

pub fn eval_settings(config: &ExperimentConfig, reference: &PointDataset) -> Result<EvalSettings> {
    Ok(EvalSettings {
        bandwidth: config.eval.bandwidth,
        num_projections: config.eval.projections,
        seed: derive_seed(config.seed, &[label::PROJECTIONS]),
    }
    .resolved(reference)?)
}

fn sampler_config(config: &ExperimentConfig, seed: u64) -> SamplerConfig {
    SamplerConfig {
        method: config.sampler.method,
        num_steps: config.sampler.steps,
        cfg_weight: config.sampler.cfg_weight,
        seed,
        clip: config.sampler.clip,
    }
}

/// Draws `n` samples, split evenly over classes under per-class conditioning.
/// Class `c` uses the stream derived from `(seed, c)`.
fn generate_with(
    config: &ExperimentConfig,
    num_classes: usize,
    n: usize,
    seed: u64,
    draw: &dyn Fn(&SamplerConfig, usize, Condition) -> difftune_core::Result<PointDataset>,
) -> difftune_core::Result<PointDataset> {
    if config.sampler.conditioning == SampleConditioning::Unconditional || num_classes == 0 {
        return draw(&sampler_config(config, seed), n, Condition::Unconditional);
    }
    let mut flat = Vec::with_capacity(n * config.source_dim());
    for c in 0..num_classes {
        let count = n / num_classes + usize::from(c < n % num_classes);
        if count == 0 {
            continue;
        }
        let sc = sampler_config(config, derive_seed(seed, &[c as u64]));
        flat.extend_from_slice(draw(&sc, count, Condition::Class(c))?.as_flat());
    }
    PointDataset::new(config.source_dim(), flat)
}

pub fn generate(
    config: &ExperimentConfig,
    model: &MlpDenoiser,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> difftune_core::Result<PointDataset> {
    generate_with(config, model.arch().num_classes, n, seed, &|sc, n, cond| {
        difftune_core::sample(model, schedule, sc, n, cond)
    })
}

fn write_file(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

fn csv(config: &ExperimentConfig, header: &str, rows: &[String]) -> String {
    let mut out = format!("{}\n{header}\n", config.provenance_line());
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    out
}

fn pretrain(config: &ExperimentConfig) -> Result<RunOutcome> {
    let schedule = config.schedule.build()?;
    let source = source_data(config)?;
    let model = MlpDenoiser::new(config.arch(), derive_seed(config.seed, &[label::INIT]))?;
    let train = TrainParams {
        variant: Variant::StandardFt,
        iterations: config.pretrain.iterations,
        batch_size: config.pretrain.batch_size,
        learning_rate: config.pretrain.learning_rate,
        cfg_dropout: config.pretrain.cfg_dropout,
        coefficients: CoefficientSchedule::Power { tau: 0.0 },
        validation_interval: 0,
        validation_samples: 0,
    };
    let train_config = config.train_config(&train, derive_seed(config.seed, &[label::TRAIN]));
    let mut trainer = Trainer::new(model, schedule, &train_config)?;
    let log_path = config.io.out_dir.join("pretrain_log.csv");
    let mut rows = Vec::new();
    let interval = config.pretrain.log_interval.max(1);
    let mut running = 0.0;
    let mut seen = 0usize;
    for it in 0..train.iterations {
        match trainer.step(&source, None) {
            Ok(losses) => {
                running += losses.adaptation;
                seen += 1;
            }
            Err(e) => {
                rows.push(format!("# incomplete: iteration {it}: {e}"));
                write_file(&log_path, &csv(config, "iteration,loss", &rows))?;
                return Err(CliError::Aborted {
                    context: format!("pretrain iteration {it}"),
                    source: e,
                });
            }
        }
        if (it + 1) % interval == 0 || it + 1 == train.iterations {
            rows.push(format!("{},{}", it + 1, format_f64(running / seen as f64)));
            running = 0.0;
            seen = 0;
        }
    }
    let mut outcome = RunOutcome::default();
    outcome.artifacts.push(write_file(
        &log_path,
        &csv(config, "iteration,loss", &rows),
    )?);
    save_checkpoint(trainer.model(), &config.io.pretrained)?;
    outcome.artifacts.push(config.io.pretrained.clone());
    Ok(outcome)
}

fn file_tag(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().replace([',', '=', '\n', '\r'], "_"))
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "checkpoint".into())
}

/// Samples a retention bank of `size` points from the pre-trained model.
pub fn build_bank(
    config: &ExperimentConfig,
    pretrained: &MlpDenoiser,
    schedule: &NoiseSchedule,
    size: usize,
    seed: u64,
) -> Result<MemoryBank> {
    let sc = sampler_config(config, seed);
    let samples = difftune_core::sample(pretrained, schedule, &sc, size, Condition::Unconditional)?;
    Ok(MemoryBank::new(
        samples,
        Provenance {
            model: file_tag(&config.io.pretrained),
            sampler: config.sampler.method.as_str().into(),
            steps: config.sampler.steps,
            seed,
        },
    ))
}

fn make_bank(config: &ExperimentConfig) -> Result<RunOutcome> {
    let schedule = config.schedule.build()?;
    let pretrained = load_pretrained(config)?;
    let bank = build_bank(
        config,
        &pretrained,
        &schedule,
        config.bank_size,
        derive_seed(config.seed, &[label::BANK]),
    )?;
    if let Some(parent) = config.io.bank.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_memory_bank(&bank, &config.io.bank)?;
    Ok(RunOutcome {
        artifacts: vec![config.io.bank.clone()],
        reports: Vec::new(),
    })
}

fn load_pretrained(config: &ExperimentConfig) -> Result<MlpDenoiser> {
    let model = load_checkpoint(&config.io.pretrained)?;
    check_arch(config, &model, &config.io.pretrained)?;
    Ok(model)
}

fn check_arch(config: &ExperimentConfig, model: &MlpDenoiser, path: &Path) -> Result<()> {
    if *model.arch() != config.arch() {
        return Err(CliError::Config(format!(
            "checkpoint {} has architecture `{}` but the config describes `{}`",
            path.display(),
            model.arch().descriptor(),
            config.arch().descriptor()
        )));
    }
    Ok(())
}

pub const FINETUNE_LOG_HEADER: &str = "iteration,retention_loss,adaptation_loss,ewc,eval_mmd";

/// Runs one fine-tuning job and writes its per-iteration log to `log_path`.
/// On a numerical failure the log is kept and flagged incomplete.
pub fn finetune_once(
    config: &ExperimentConfig,
    train: &TrainParams,
    pretrained: &MlpDenoiser,
    bank: Option<&MemoryBank>,
    seed: u64,
    log_path: &Path,
) -> Result<FinetuneResult> {
    let schedule = config.schedule.build()?;
    let downstream = target_data(config)?;
    let reference = reference_data(config)?;
    let settings = eval_settings(config, &reference)?;
    let train_config = config.train_config(train, derive_seed(seed, &[label::TRAIN]));
    let mut trainer = Trainer::new(pretrained.clone(), schedule.clone(), &train_config)?;
    let bank = if trainer.plan().uses_retention() {
        Some(bank.ok_or_else(|| {
            CliError::Config(format!(
                "variant {} needs a memory bank",
                train.variant.as_str()
            ))
        })?)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(train.iterations);
    for it in 0..train.iterations {
        let step = trainer.step(&downstream, bank).and_then(|losses| {
            let ewc = ewc_l2(trainer.model().params(), trainer.snapshot())?.total;
            let validate = train.validation_interval > 0
                && ((it + 1) % train.validation_interval == 0 || it + 1 == train.iterations);
            let mmd = if validate {
                let generated = generate(
                    config,
                    trainer.model(),
                    &schedule,
                    train.validation_samples.max(2),
                    derive_seed(seed, &[stream::VALIDATION]),
                )?;
                Some(MetricReport::evaluate(&generated, &reference, &settings, None)?.mmd)
            } else {
                None
            };
            Ok((losses, ewc, mmd))
        });
        match step {
            Ok((losses, ewc, mmd)) => rows.push(format!(
                "{},{},{},{},{}",
                it + 1,
                losses.retention.map(format_f64).unwrap_or_default(),
                format_f64(losses.adaptation),
                format_f64(ewc),
                mmd.map(format_f64).unwrap_or_default()
            )),
            Err(e) => {
                rows.push(format!("# incomplete: iteration {}: {e}", it + 1));
                write_file(log_path, &csv(config, FINETUNE_LOG_HEADER, &rows))?;
                return Err(CliError::Aborted {
                    context: format!("fine-tuning iteration {}", it + 1),
                    source: e,
                });
            }
        }
    }
    write_file(log_path, &csv(config, FINETUNE_LOG_HEADER, &rows))?;

    let ewc = ewc_l2(trainer.model().params(), trainer.snapshot())?.total;
    let model = trainer.into_model();
    let generated = generate(
        config,
        &model,
        &schedule,
        config.eval.samples,
        derive_seed(seed, &[label::EVAL]),
    )?;
    let report = MetricReport::evaluate(&generated, &reference, &settings, Some(ewc))?;
    Ok(FinetuneResult { model, report, ewc })
}

fn load_bank_if_needed(
    config: &ExperimentConfig,
    train: &TrainParams,
) -> Result<Option<MemoryBank>> {
    if !config.needs_bank(train) {
        return Ok(None);
    }
    let bank = load_memory_bank(&config.io.bank)?;
    if bank.dim() != config.source_dim() {
        return Err(CliError::Config(format!(
            "bank {} has dimension {} but the model expects {}",
            config.io.bank.display(),
            bank.dim(),
            config.source_dim()
        )));
    }
    Ok(Some(bank))
}

fn finetune(config: &ExperimentConfig) -> Result<RunOutcome> {
    // The bank is loaded in full before the first update.
    let pretrained = load_pretrained(config)?;
    let bank = load_bank_if_needed(config, &config.train)?;
    let log_path = config.io.out_dir.join("finetune_log.csv");
    let result = finetune_once(
        config,
        &config.train,
        &pretrained,
        bank.as_ref(),
        config.seed,
        &log_path,
    )?;
    if let Some(parent) = config.io.finetuned.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_checkpoint(&result.model, &config.io.finetuned)?;
    let report_path = config.io.out_dir.join("finetune_report.csv");
    write_file(
        &report_path,
        &csv(config, MetricReport::CSV_HEADER, &[result.report.csv_row()]),
    )?;
    Ok(RunOutcome {
        artifacts: vec![log_path, config.io.finetuned.clone(), report_path],
        reports: vec![(config.train.variant.as_str().into(), result.report)],
    })
}

/// Rows of the forgetting table: fraction `p` hands the final `p` share of
/// the sampling steps to the pre-trained model.
pub fn forgetting_rows(
    config: &ExperimentConfig,
    finetuned: &MlpDenoiser,
    pretrained: &MlpDenoiser,
    schedule: &NoiseSchedule,
    reference: &PointDataset,
    settings: &EvalSettings,
) -> Result<Vec<ForgettingRow>> {
    let ewc = ewc_l2(
        finetuned.params(),
        &difftune_core::PretrainedSnapshot::new(pretrained.params()),
    )?
    .total;
    let seed = derive_seed(config.seed, &[label::EVAL]);
    config
        .sweep
        .fractions
        .iter()
        .map(|&p| {
            let generated = generate_with(
                config,
                finetuned.arch().num_classes,
                config.eval.samples,
                seed,
                &|sc, n, cond| hybrid_sample(finetuned, pretrained, p, schedule, sc, n, cond),
            )?;
            Ok(ForgettingRow {
                fraction: p,
                report: MetricReport::evaluate(&generated, reference, settings, Some(ewc))?,
            })
        })
        .collect()
}

fn forgetting_sweep(config: &ExperimentConfig) -> Result<RunOutcome> {
    let schedule = config.schedule.build()?;
    let pretrained = load_pretrained(config)?;
    let finetuned = load_checkpoint(&config.io.finetuned)?;
    check_arch(config, &finetuned, &config.io.finetuned)?;
    let reference = reference_data(config)?;
    let settings = eval_settings(config, &reference)?;
    let rows = forgetting_rows(
        config,
        &finetuned,
        &pretrained,
        &schedule,
        &reference,
        &settings,
    )?;
    let path = config.io.out_dir.join("forgetting_sweep.csv");
    let lines: Vec<String> = rows.iter().map(ForgettingRow::csv_row).collect();
    write_file(&path, &csv(config, ForgettingRow::CSV_HEADER, &lines))?;
    Ok(RunOutcome {
        artifacts: vec![path],
        reports: rows
            .into_iter()
            .map(|r| (format!("p={}", format_f64(r.fraction)), r.report))
            .collect(),
    })
}

/// One grid cell of a sweep, run on its own derived seed.
struct Cell {
    name: String,
    key: String,
    train: TrainParams,
    bank_size: Option<usize>,
}

fn run_cells(
    config: &ExperimentConfig,
    sweep: &str,
    key_column: &str,
    cells: Vec<Cell>,
    shared_bank: Option<&MemoryBank>,
) -> Result<RunOutcome> {
    let pretrained = load_pretrained(config)?;
    let schedule = config.schedule.build()?;
    let dir = config.io.out_dir.join(sweep);
    let results: Vec<Result<(PathBuf, MetricReport)>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let seed = derive_seed(config.seed, &[stream::CELL, i as u64]);
            let own_bank = match cell.bank_size {
                Some(m) => Some(build_bank(
                    config,
                    &pretrained,
                    &schedule,
                    m,
                    derive_seed(seed, &[label::BANK]),
                )?),
                None => None,
            };
            let bank = own_bank.as_ref().or(shared_bank);
            let log = dir.join(format!("{}.csv", cell.name));
            let result = finetune_once(config, &cell.train, &pretrained, bank, seed, &log)?;
            Ok((log, result.report))
        })
        .collect();

    let mut outcome = RunOutcome::default();
    let mut rows = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        let (log, report) = result?;
        rows.push(format!("{},{}", cell.key, report.csv_row()));
        outcome.artifacts.push(log);
        outcome.reports.push((cell.key.clone(), report));
    }
    let summary = config.io.out_dir.join(format!("{sweep}.csv"));
    let header = format!("{key_column},{}", MetricReport::CSV_HEADER);
    write_file(&summary, &csv(config, &header, &rows))?;
    outcome.artifacts.insert(0, summary);
    Ok(outcome)
}

fn tau_sweep(config: &ExperimentConfig) -> Result<RunOutcome> {
    let bank = load_memory_bank(&config.io.bank)?;
    let cells = config
        .sweep
        .taus
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            Ok(Cell {
                name: format!("tau_{i}"),
                key: format_f64(tau),
                train: TrainParams {
                    variant: Variant::DiffTuning,
                    coefficients: CoefficientSchedule::power(tau)?,
                    ..config.train.clone()
                },
                bank_size: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run_cells(config, "tau_sweep", "tau", cells, Some(&bank))
}

fn bank_size_sweep(config: &ExperimentConfig) -> Result<RunOutcome> {
    let train = TrainParams {
        variant: Variant::DiffTuning,
        ..config.train.clone()
    };
    let cells = config
        .sweep
        .bank_sizes
        .iter()
        .map(|&m| Cell {
            name: format!("bank_{m}"),
            key: m.to_string(),
            train: train.clone(),
            bank_size: Some(m),
        })
        .collect();
    run_cells(config, "bank_size_sweep", "bank_size", cells, None)
}

#[derive(Serialize)]
struct EvalJson<'a> {
    config_hash: &'a str,
    seed: u64,
    checkpoint: String,
    report: &'a MetricReport,
}

fn eval(config: &ExperimentConfig) -> Result<RunOutcome> {
    let schedule = config.schedule.build()?;
    let model = load_checkpoint(&config.io.finetuned)?;
    check_arch(config, &model, &config.io.finetuned)?;
    let ewc = if config.io.pretrained.is_file() {
        let pretrained = load_pretrained(config)?;
        Some(
            ewc_l2(
                model.params(),
                &difftune_core::PretrainedSnapshot::new(pretrained.params()),
            )?
            .total,
        )
    } else {
        None
    };
    let reference = reference_data(config)?;
    let settings = eval_settings(config, &reference)?;
    let generated = generate(
        config,
        &model,
        &schedule,
        config.eval.samples,
        derive_seed(config.seed, &[label::EVAL]),
    )?;
    let report = MetricReport::evaluate(&generated, &reference, &settings, ewc)?;
    let csv_path = config.io.out_dir.join("eval.csv");
    write_file(
        &csv_path,
        &csv(config, MetricReport::CSV_HEADER, &[report.csv_row()]),
    )?;
    let json_path = config.io.out_dir.join("eval.json");
    let json = serde_json::to_string_pretty(&EvalJson {
        config_hash: &config.config_hash,
        seed: config.seed,
        checkpoint: file_tag(&config.io.finetuned),
        report: &report,
    })
    .map_err(|e| CliError::Config(format!("cannot serialize report: {e}")))?;
    let mut text = json;
    let _ = writeln!(text);
    write_file(&json_path, &text)?;
    Ok(RunOutcome {
        artifacts: vec![csv_path, json_path],
        reports: vec![("eval".into(), report)],
    })
}
