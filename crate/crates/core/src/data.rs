//! Synthetic point distributions and the persisted memory bank.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, standard_normal};

/// Class conditioning tag. `Unconditional` is the null condition used for
/// classifier-free guidance and for every retention sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Unconditional,
    Class(usize),
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Unconditional => f.write_str("uncond"),
            Condition::Class(c) => write!(f, "{c}"),
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uncond" | "unconditional" | "none" => Ok(Condition::Unconditional),
            other => other
                .parse()
                .map(Condition::Class)
                .map_err(|_| Error::Config(format!("invalid condition `{other}`"))),
        }
    }
}

/// A finite, bounded set of `d`-dimensional points, optionally labelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDataset {
    dim: usize,
    points: Vec<f64>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    bound: f64,
}

impl PointDataset {
    /// Builds a dataset from row-major coordinates. The bound is the largest
    /// absolute coordinate.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        Self::build(dim, points, None, 0)
    }

    pub fn with_labels(
        dim: usize,
        points: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        Self::build(dim, points, Some(labels), num_classes)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidDataset("a dataset needs at least one point".into()))?;
        let mut points = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InvalidDataset(format!(
                    "row {i} has {} coordinates, expected {dim}",
                    r.len()
                )));
            }
            points.extend_from_slice(r);
        }
        Self::new(dim, points)
    }

    fn build(
        dim: usize,
        points: Vec<f64>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDataset("dimension must be positive".into()));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidDataset(format!(
                "{} coordinates do not form a non-empty set of {dim}-dimensional points",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "coordinate {} of point {}",
                i % dim,
                i / dim
            )));
        }
        let n = points.len() / dim;
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "{} labels for {n} points",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
                return Err(Error::InvalidDataset(format!(
                    "label {bad} is not below the class count {num_classes}"
                )));
            }
        }
        let bound = points
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        Ok(Self {
            dim,
            points,
            labels,
            num_classes,
            bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// Row-major coordinates.
    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Every coordinate lies in `[-bound, bound]`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Coordinate-wise mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (a, v) in m.iter_mut().zip(p) {
                *a += v;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Largest pairwise Euclidean distance.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.max(sq_dist(self.point(i), self.point(j)));
            }
        }
        best.sqrt()
    }

    /// Restriction to the points carrying `label`.
    pub fn class_subset(&self, label: usize) -> Option<PointDataset> {
        let labels = self.labels.as_ref()?;
        let points: Vec<f64> = self
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == label)
            .flat_map(|(p, _)| p.iter().copied())
            .collect();
        PointDataset::new(self.dim, points).ok()
    }

    /// The first `n` points (or all of them when `n >= len`).
    pub fn truncated(&self, n: usize) -> Result<PointDataset> {
        let n = n.min(self.len());
        let points = self.points[..n * self.dim].to_vec();
        match &self.labels {
            Some(l) => Self::with_labels(self.dim, points, l[..n].to_vec(), self.num_classes),
            None => Self::new(self.dim, points),
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Names of the supported synthetic distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionKind {
    GaussianMixture,
    Ring,
    TwoSpirals,
    Checkerboard,
}

impl DistributionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistributionKind::GaussianMixture => "gaussian_mixture",
            DistributionKind::Ring => "ring",
            DistributionKind::TwoSpirals => "two_spirals",
            DistributionKind::Checkerboard => "checkerboard",
        }
    }
}

impl std::str::FromStr for DistributionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "gaussian_mixture" => DistributionKind::GaussianMixture,
            "ring" => DistributionKind::Ring,
            "two_spirals" => DistributionKind::TwoSpirals,
            "checkerboard" => DistributionKind::Checkerboard,
            other => return Err(Error::UnknownDistribution(other.to_string())),
        })
    }
}

/// Parameters of a synthetic distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    /// Isotropic Gaussian components with a shared standard deviation.
    GaussianMixture {
        means: Vec<Vec<f64>>,
        std: f64,
        weights: Option<Vec<f64>>,
    },
    /// Points on a circle of `radius` around `center` with radial Gaussian noise.
    Ring {
        radius: f64,
        std: f64,
        center: [f64; 2],
    },
    /// Two interleaved spiral arms, one label per arm.
    TwoSpirals { turns: f64, scale: f64, std: f64 },
    /// Uniform on alternating cells of a `cells x cells` board covering
    /// `[-half_width, half_width]^2`.
    Checkerboard { cells: usize, half_width: f64 },
}

impl DistributionSpec {
    /// `modes` equal-weight components evenly spaced on a circle, rotated by
    /// `rotation` radians and centred on `center`.
    pub fn mixture_on_circle(
        modes: usize,
        radius: f64,
        std: f64,
        rotation: f64,
        center: [f64; 2],
    ) -> Self {
        let means = (0..modes)
            .map(|k| {
                let a = rotation + std::f64::consts::TAU * k as f64 / modes as f64;
                vec![center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            })
            .collect();
        DistributionSpec::GaussianMixture {
            means,
            std,
            weights: None,
        }
    }

    pub fn kind(&self) -> DistributionKind {
        match self {
            DistributionSpec::GaussianMixture { .. } => DistributionKind::GaussianMixture,
            DistributionSpec::Ring { .. } => DistributionKind::Ring,
            DistributionSpec::TwoSpirals { .. } => DistributionKind::TwoSpirals,
            DistributionSpec::Checkerboard { .. } => DistributionKind::Checkerboard,
        }
    }

    pub fn known_kinds() -> &'static [&'static str] {
        &["gaussian_mixture", "ring", "two_spirals", "checkerboard"]
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DistributionSpec::GaussianMixture { means, .. } => means.len(),
            DistributionSpec::TwoSpirals { .. } => 2,
            _ => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::DegenerateParams(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        match self {
            DistributionSpec::GaussianMixture {
                means,
                std,
                weights,
            } => {
                positive("component std", *std)?;
                let d = means
                    .first()
                    .map(Vec::len)
                    .ok_or_else(|| Error::DegenerateParams("mixture has no components".into()))?;
                if d == 0 || means.iter().any(|m| m.len() != d) {
                    return Err(Error::DegenerateParams(
                        "component means must share a positive dimension".into(),
                    ));
                }
                if let Some(w) = weights {
                    if w.len() != means.len()
                        || w.iter().any(|v| !v.is_finite() || *v < 0.0)
                        || w.iter().sum::<f64>() <= 0.0
                    {
                        return Err(Error::DegenerateParams(
                            "mixture weights must be nonnegative, one per component, not all zero"
                                .into(),
                        ));
                    }
                }
                Ok(())
            }
            DistributionSpec::Ring { radius, std, .. } => {
                positive("ring radius", *radius)?;
                positive("ring std", *std)
            }
            DistributionSpec::TwoSpirals { turns, scale, std } => {
                positive("spiral turns", *turns)?;
                positive("spiral scale", *scale)?;
                positive("spiral std", *std)
            }
            DistributionSpec::Checkerboard { cells, half_width } => {
                if *cells < 2 {
                    return Err(Error::DegenerateParams(format!(
                        "checkerboard needs at least 2 cells per side, got {cells}"
                    )));
                }
                positive("checkerboard half width", *half_width)
            }
        }
    }
}

/// Draws `n` points from `spec`. Pure function of `(spec, n, seed)`.
pub fn make_distribution(spec: &DistributionSpec, n: usize, seed: u64) -> Result<PointDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidDataset(
            "sample count must be at least 1".into(),
        ));
    }
    let mut rng = rng::stream(seed, &[rng::label::DATA]);
    match spec {
        DistributionSpec::GaussianMixture {
            means,
            std,
            weights,
        } => {
            let d = means[0].len();
            let w = weights.clone().unwrap_or_else(|| vec![1.0; means.len()]);
            let pick = WeightedIndex::new(&w)
                .map_err(|e| Error::DegenerateParams(format!("mixture weights: {e}")))?;
            let mut points = Vec::with_capacity(n * d);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let k = pick.sample(&mut rng);
                labels.push(k);
                for &m in &means[k] {
                    points.push(m + std * standard_normal(&mut rng));
                }
            }
            PointDataset::with_labels(d, points, labels, means.len())
        }
        DistributionSpec::Ring {
            radius,
            std,
            center,
        } => {
            let mut points = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let a = rng.random::<f64>() * std::f64::consts::TAU;
                let r = radius + std * standard_normal(&mut rng);
                points.push(center[0] + r * a.cos());
                points.push(center[1] + r * a.sin());
            }
            PointDataset::new(2, points)
        }
        DistributionSpec::TwoSpirals { turns, scale, std } => {
            let mut points = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let arm = rng.random_range(0..2usize);
                let u: f64 = rng.random::<f64>().sqrt();
                let a = u * turns * std::f64::consts::TAU + arm as f64 * std::f64::consts::PI;
                let r = scale * u;
                points.push(r * a.cos() + std * standard_normal(&mut rng));
                points.push(r * a.sin() + std * standard_normal(&mut rng));
                labels.push(arm);
            }
            PointDataset::with_labels(2, points, labels, 2)
        }
        DistributionSpec::Checkerboard { cells, half_width } => {
            let cell = 2.0 * half_width / *cells as f64;
            let mut points = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let (i, j) = loop {
                    let i = rng.random_range(0..*cells);
                    let j = rng.random_range(0..*cells);
                    if (i + j) % 2 == 0 {
                        break (i, j);
                    }
                };
                points.push(-half_width + cell * (i as f64 + rng.random::<f64>()));
                points.push(-half_width + cell * (j as f64 + rng.random::<f64>()));
            }
            PointDataset::new(2, points)
        }
    }
}

/// How a memory bank was generated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub sampler: String,
    pub steps: usize,
    pub seed: u64,
}

/// Samples drawn from the pre-trained model before fine-tuning starts.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub samples: PointDataset,
    pub condition: Condition,
    pub provenance: Provenance,
}

impl MemoryBank {
    /// A retention bank: every sample carries the unconditional tag.
    pub fn new(samples: PointDataset, provenance: Provenance) -> Self {
        Self {
            samples: PointDataset {
                labels: None,
                num_classes: 0,
                ..samples
            },
            condition: Condition::Unconditional,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }
}

pub const BANK_MAGIC: &str = "difftune-bank v1";

fn check_header_token(name: &str, v: &str) -> Result<()> {
    if v.is_empty() || v.contains([',', '=', '\n', '\r']) {
        return Err(Error::Config(format!(
            "{name} `{v}` cannot be stored in a bank header (empty or contains `,` `=` or a newline)"
        )));
    }
    Ok(())
}

/// Serializes a bank to its CSV text form.
pub fn format_memory_bank(bank: &MemoryBank) -> Result<String> {
    let p = &bank.provenance;
    check_header_token("model identifier", &p.model)?;
    check_header_token("sampler name", &p.sampler)?;
    let mut out = String::with_capacity(bank.samples.as_flat().len() * 22 + 128);
    out.push_str(BANK_MAGIC);
    out.push('\n');
    let _ = writeln!(
        out,
        "d={},m={},seed={},model={},sampler={},steps={},cond={}",
        bank.dim(),
        bank.len(),
        p.seed,
        p.model,
        p.sampler,
        p.steps,
        bank.condition
    );
    for row in bank.samples.iter() {
        push_row(&mut out, row);
    }
    Ok(out)
}

/// Round-trip exact decimal form of a coordinate.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn push_row(out: &mut String, row: &[f64]) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

pub fn save_memory_bank(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format_memory_bank(bank)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_memory_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_memory_bank(&text).map_err(|message| Error::format(path, message))
}

/// Parses the CSV text form. Errors are plain messages; callers attach the path.
pub fn parse_memory_bank(text: &str) -> std::result::Result<MemoryBank, String> {
    let mut lines = text.lines();
    let magic = match lines.next() {
        None => return Err("empty memory bank".into()),
        Some(l) if l.trim().is_empty() && text.trim().is_empty() => {
            return Err("empty memory bank".into())
        }
        Some(l) => l,
    };
    if magic.trim() != BANK_MAGIC {
        return Err(format!(
            "malformed header: expected `{BANK_MAGIC}`, found `{}`",
            magic.trim()
        ));
    }
    let meta = lines.next().ok_or_else(|| {
        "malformed header: missing `d=<dim>,m=<count>,seed=<seed>` line".to_string()
    })?;
    let mut dim = None;
    let mut count = None;
    let mut seed = None;
    let mut model = String::from("unknown");
    let mut sampler = String::from("unknown");
    let mut steps = 0usize;
    let mut condition = Condition::Unconditional;
    for field in meta.trim().split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| format!("malformed header field `{field}`"))?;
        let bad = |what: &str| format!("malformed header: invalid {what} `{v}`");
        match k.trim() {
            "d" => dim = Some(v.parse::<usize>().map_err(|_| bad("dimension"))?),
            "m" => count = Some(v.parse::<usize>().map_err(|_| bad("count"))?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("seed"))?),
            "model" => model = v.to_string(),
            "sampler" => sampler = v.to_string(),
            "steps" => steps = v.parse().map_err(|_| bad("step count"))?,
            "cond" => condition = v.parse().map_err(|_| bad("condition"))?,
            other => return Err(format!("malformed header: unknown field `{other}`")),
        }
    }
    let (dim, count, seed) = match (dim, count, seed) {
        (Some(d), Some(m), Some(s)) => (d, m, s),
        _ => return Err("malformed header: `d`, `m` and `seed` are required".into()),
    };
    if dim == 0 {
        return Err("malformed header: dimension must be positive".into());
    }
    let mut points = Vec::with_capacity(count * dim);
    let mut rows = 0usize;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let before = points.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| format!("row {rows}: unparsable coordinate `{}`", tok.trim()))?;
            if v.is_nan() {
                return Err(format!("row {rows}: NaN coordinate"));
            }
            if !v.is_finite() {
                return Err(format!("row {rows}: non-finite coordinate"));
            }
            points.push(v);
        }
        let found = points.len() - before;
        if found != dim {
            return Err(format!(
                "row {rows}: expected {dim} coordinates (declared d), found {found}"
            ));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err("empty memory bank".into());
    }
    if rows != count {
        return Err(format!(
            "header declares m={count} rows but {rows} were found"
        ));
    }
    let samples = PointDataset::new(dim, points).map_err(|e| e.to_string())?;
    Ok(MemoryBank {
        samples,
        condition,
        provenance: Provenance {
            model,
            sampler,
            steps,
            seed,
        },
    })
}
