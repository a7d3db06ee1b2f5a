//! Two-sample distribution metrics and forgetting diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::{format_f64, sq_dist, Condition, PointDataset};
use crate::denoiser::{Denoiser, PretrainedSnapshot};
use crate::error::{Error, Result};
use crate::rng::{self, fill_standard_normal};
use crate::sampler::{hybrid_sample, SamplerConfig};
use crate::schedule::NoiseSchedule;

fn check_dims(x: &PointDataset, y: &PointDataset) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            actual: y.dim(),
        });
    }
    Ok(())
}

fn kernel_sum(x: &PointDataset, y: &PointDataset, gamma: f64, skip_diagonal: bool) -> f64 {
    let mut total = 0.0;
    for (i, a) in x.iter().enumerate() {
        let mut row = 0.0;
        for (j, b) in y.iter().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            row += (-gamma * sq_dist(a, b)).exp();
        }
        total += row;
    }
    total
}

/// Orders the pair so the cross-kernel sum is accumulated identically
/// whichever way round the sets were passed.
fn canonical_order<'a>(
    x: &'a PointDataset,
    y: &'a PointDataset,
) -> (&'a PointDataset, &'a PointDataset) {
    let key = |d: &PointDataset| {
        (
            d.len(),
            d.as_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    if key(x) <= key(y) {
        (x, y)
    } else {
        (y, x)
    }
}

/// Median pairwise Euclidean distance over the pooled sets, using at most
/// `max_points` leading points of each.
pub fn median_bandwidth(x: &PointDataset, y: &PointDataset, max_points: usize) -> Result<f64> {
    check_dims(x, y)?;
    let pool: Vec<&[f64]> = x
        .iter()
        .take(max_points)
        .chain(y.iter().take(max_points))
        .collect();
    median_pairwise_distance(&pool)
}

fn median_pairwise_distance(pool: &[&[f64]]) -> Result<f64> {
    let mut dists = Vec::with_capacity(pool.len() * pool.len() / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            dists.push(sq_dist(pool[i], pool[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return Err(Error::InvalidDataset(
            "median heuristic needs at least two points".into(),
        ));
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        Ok(*m)
    } else {
        Err(Error::InvalidDataset(
            "median pairwise distance is zero; pass an explicit bandwidth".into(),
        ))
    }
}

fn resolve_bandwidth(x: &PointDataset, y: &PointDataset, bandwidth: Option<f64>) -> Result<f64> {
    match bandwidth {
        Some(b) if b > 0.0 && b.is_finite() => Ok(b),
        Some(b) => Err(Error::Config(format!(
            "bandwidth must be positive, got {b}"
        ))),
        None => median_bandwidth(x, y, 1000),
    }
}

/// Unbiased squared MMD with kernel `exp(-|x - y|^2 / (2 sigma^2))`, floored at
/// zero. Without a bandwidth the median pairwise distance is used.
pub fn mmd_rbf(x: &PointDataset, y: &PointDataset, bandwidth: Option<f64>) -> Result<f64> {
    check_dims(x, y)?;
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidDataset(
            "the unbiased MMD estimate needs at least two points per set".into(),
        ));
    }
    let sigma = resolve_bandwidth(x, y, bandwidth)?;
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let (x, y) = canonical_order(x, y);
    let (m, n) = (x.len() as f64, y.len() as f64);
    let kxx = kernel_sum(x, x, gamma, true) / (m * (m - 1.0));
    let kyy = kernel_sum(y, y, gamma, true) / (n * (n - 1.0));
    let kxy = kernel_sum(x, y, gamma, false) / (m * n);
    Ok((kxx + kyy - 2.0 * kxy).max(0.0))
}

/// Biased (V-statistic) squared MMD; zero for identical multisets.
pub fn mmd_rbf_biased(x: &PointDataset, y: &PointDataset, bandwidth: f64) -> Result<f64> {
    check_dims(x, y)?;
    let sigma = resolve_bandwidth(x, y, Some(bandwidth))?;
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let (x, y) = canonical_order(x, y);
    let (m, n) = (x.len() as f64, y.len() as f64);
    let kxx = kernel_sum(x, x, gamma, false) / (m * m);
    let kyy = kernel_sum(y, y, gamma, false) / (n * n);
    let kxy = kernel_sum(x, y, gamma, false) / (m * n);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// 2-Wasserstein distance between two empirical measures on the line, given
/// sorted supports. Integrates the squared quantile difference exactly.
pub fn wasserstein2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < m && j < n {
        // Next quantile breakpoint is min((i+1)/m, (j+1)/n), compared exactly.
        let lhs = (i + 1) * n;
        let rhs = (j + 1) * m;
        let next = if lhs <= rhs {
            (i + 1) as f64 / m as f64
        } else {
            (j + 1) as f64 / n as f64
        };
        let diff = a[i] - b[j];
        total += (next - u) * diff * diff;
        u = next;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    total.sqrt()
}

/// Mean over `num_projections` random unit directions of the 1D
/// 2-Wasserstein distance between the projected sets.
pub fn sliced_wasserstein(
    x: &PointDataset,
    y: &PointDataset,
    num_projections: usize,
    seed: u64,
) -> Result<f64> {
    check_dims(x, y)?;
    if num_projections == 0 {
        return Err(Error::Config("need at least one projection".into()));
    }
    let d = x.dim();
    let mut r = rng::stream(seed, &[rng::label::PROJECTIONS]);
    let mut dir = vec![0.0; d];
    let mut px = vec![0.0; x.len()];
    let mut py = vec![0.0; y.len()];
    let mut total = 0.0;
    for _ in 0..num_projections {
        let norm = loop {
            fill_standard_normal(&mut r, &mut dir);
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                break n;
            }
        };
        dir.iter_mut().for_each(|v| *v /= norm);
        project_sorted(x, &dir, &mut px);
        project_sorted(y, &dir, &mut py);
        total += wasserstein2_sorted(&px, &py);
    }
    Ok(total / num_projections as f64)
}

fn project_sorted(ds: &PointDataset, dir: &[f64], out: &mut [f64]) {
    for (o, p) in out.iter_mut().zip(ds.iter()) {
        *o = p.iter().zip(dir).map(|(a, b)| a * b).sum();
    }
    out.sort_unstable_by(f64::total_cmp);
}

/// Mean distance from each generated point to its nearest reference point.
pub fn nearest_sample_mean_dist(generated: &PointDataset, reference: &PointDataset) -> Result<f64> {
    check_dims(generated, reference)?;
    let total: f64 = generated
        .iter()
        .map(|g| {
            reference
                .iter()
                .map(|r| sq_dist(g, r))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok(total / generated.len() as f64)
}

/// Squared parameter distance from the pre-trained snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwcReport {
    pub total: f64,
    pub per_param: f64,
    pub count: usize,
}

pub fn ewc_l2(params: &[f64], snapshot: &PretrainedSnapshot) -> Result<EwcReport> {
    let base = snapshot.params();
    if params.len() != base.len() {
        return Err(Error::DimensionMismatch {
            expected: base.len(),
            actual: params.len(),
        });
    }
    let total: f64 = params
        .iter()
        .zip(base)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let count = params.len();
    Ok(EwcReport {
        total,
        per_param: if count == 0 {
            0.0
        } else {
            total / count as f64
        },
        count,
    })
}

/// Settings shared by every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// RBF bandwidth; `None` selects the median heuristic on the reference set.
    pub bandwidth: Option<f64>,
    pub num_projections: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            bandwidth: None,
            num_projections: 128,
            seed: 0,
        }
    }
}

impl EvalSettings {
    /// Fixes the bandwidth from the reference set alone so that reports
    /// against the same reference are comparable.
    pub fn resolved(&self, reference: &PointDataset) -> Result<Self> {
        let bandwidth = match self.bandwidth {
            Some(b) => b,
            None => {
                let pool: Vec<&[f64]> = reference.iter().take(2000).collect();
                median_pairwise_distance(&pool)?
            }
        };
        Ok(Self {
            bandwidth: Some(bandwidth),
            ..*self
        })
    }
}

/// One evaluation of a generated set against a reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mmd: f64,
    pub sliced_wasserstein: f64,
    pub nearest_sample_mean_dist: f64,
    pub ewc: Option<f64>,
    pub n_generated: usize,
    pub n_reference: usize,
    pub bandwidth: f64,
    pub num_projections: usize,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mmd,sliced_wasserstein,nearest_sample_mean_dist,ewc,n_generated,n_reference,bandwidth,num_projections,seed";

    pub fn evaluate(
        generated: &PointDataset,
        reference: &PointDataset,
        settings: &EvalSettings,
        ewc: Option<f64>,
    ) -> Result<Self> {
        let settings = settings.resolved(reference)?;
        let bandwidth = settings.bandwidth.expect("resolved");
        Ok(Self {
            mmd: mmd_rbf(generated, reference, Some(bandwidth))?,
            sliced_wasserstein: sliced_wasserstein(
                generated,
                reference,
                settings.num_projections,
                settings.seed,
            )?,
            nearest_sample_mean_dist: nearest_sample_mean_dist(generated, reference)?,
            ewc,
            n_generated: generated.len(),
            n_reference: reference.len(),
            bandwidth,
            num_projections: settings.num_projections,
            seed: settings.seed,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            format_f64(self.mmd),
            format_f64(self.sliced_wasserstein),
            format_f64(self.nearest_sample_mean_dist),
            self.ewc.map(format_f64).unwrap_or_default(),
            self.n_generated,
            self.n_reference,
            format_f64(self.bandwidth),
            self.num_projections,
            self.seed
        )
    }
}

/// One row of a forgetting curve: the fraction of final steps handed to the
/// pre-trained model and the resulting sample quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub fraction: f64,
    pub report: MetricReport,
}

impl ForgettingRow {
    pub const CSV_HEADER: &'static str = "fraction,mmd,sliced_wasserstein,nearest_sample_mean_dist,ewc,n_generated,n_reference,bandwidth,num_projections,seed";

    pub fn csv_row(&self) -> String {
        format!("{},{}", format_f64(self.fraction), self.report.csv_row())
    }
}

/// Sweeps the switch fraction of the hybrid sampler, evaluating each set of
/// samples against `reference`.
#[allow(clippy::too_many_arguments)]
pub fn forgetting_curve(
    finetuned: &dyn Denoiser,
    pretrained: &dyn Denoiser,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    fractions: &[f64],
    reference: &PointDataset,
    settings: &EvalSettings,
    num_samples: usize,
    cond: Condition,
) -> Result<Vec<ForgettingRow>> {
    if fractions.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config("fractions must lie in [0, 1]".into()));
    }
    if fractions.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("fractions must be sorted".into()));
    }
    let settings = settings.resolved(reference)?;
    fractions
        .iter()
        .map(|&p| {
            let samples = hybrid_sample(
                finetuned,
                pretrained,
                p,
                schedule,
                sampler,
                num_samples,
                cond,
            )?;
            Ok(ForgettingRow {
                fraction: p,
                report: MetricReport::evaluate(&samples, reference, &settings, None)?,
            })
        })
        .collect()
}
