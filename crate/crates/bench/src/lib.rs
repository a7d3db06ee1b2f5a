//! Shared fixtures for the benchmarks.

use difftune_core::{
    make_distribution, Batch, Condition, DistributionSpec, MlpArch, MlpDenoiser, NoiseSchedule,
    PointDataset,
};

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).expect("valid schedule")
}

pub fn mixture(n: usize, seed: u64) -> PointDataset {
    let spec = DistributionSpec::mixture_on_circle(4, 2.0, 0.25, 0.0, [0.0, 0.0]);
    make_distribution(&spec, n, seed).expect("valid mixture")
}

pub fn standard_model() -> MlpDenoiser {
    MlpDenoiser::new(MlpArch::standard(2, 4), 1).expect("valid architecture")
}

/// A batch of `n` labelled examples at spread-out timesteps.
pub fn batch(n: usize) -> Batch {
    let data = mixture(n, 2);
    let mut batch = Batch::default();
    for i in 0..n {
        let cond = match data.label(i) {
            Some(c) if i % 10 != 0 => Condition::Class(c),
            _ => Condition::Unconditional,
        };
        batch.push(data.point(i), 1 + (i * 37) % 1000, cond, &[0.1, -0.2]);
    }
    batch
}
