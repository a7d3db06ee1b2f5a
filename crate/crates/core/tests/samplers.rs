use difftune_core::rng::{self, standard_normal};
use difftune_core::sampler::{sample_with_trace, switch_index, timestep_sequence};
use difftune_core::{
    hybrid_sample, sample, ClosedFormDenoiser, Condition, Denoiser, NoiseSchedule, PointDataset,
    SamplerConfig, SamplerMethod,
};

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(200, 1e-4, 0.1).unwrap()
}

fn config(method: SamplerMethod, steps: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        method,
        num_steps: steps,
        cfg_weight: 0.0,
        seed,
        clip: None,
    }
}

#[test]
fn single_point_support_collapses_to_the_point() {
    let support = PointDataset::new(2, vec![0.7, -1.3]).unwrap();
    let model = ClosedFormDenoiser::new(support, schedule()).unwrap();
    for method in [SamplerMethod::Ddpm, SamplerMethod::Ddim] {
        let out = sample(
            &model,
            &schedule(),
            &config(method, 50, 3),
            100,
            Condition::Unconditional,
        )
        .unwrap();
        for p in out.iter() {
            assert!(
                (p[0] - 0.7).abs() < 1e-6 && (p[1] + 1.3).abs() < 1e-6,
                "{p:?}"
            );
        }
    }
}

#[test]
fn two_component_proportions_match_support_weights() {
    // Three atoms near -2 and one near +2: the left cluster holds 3/4 of the mass.
    let support = PointDataset::new(1, vec![-2.0, -2.1, -1.9, 2.0]).unwrap();
    let model = ClosedFormDenoiser::new(support, schedule()).unwrap();
    let n = 4000;
    for method in [SamplerMethod::Ddpm, SamplerMethod::Ddim] {
        let out = sample(
            &model,
            &schedule(),
            &config(method, 100, 17),
            n,
            Condition::Unconditional,
        )
        .unwrap();
        let left = out.iter().filter(|p| p[0] < 0.0).count() as f64;
        let (p, nf) = (0.75, n as f64);
        let sigma = (nf * p * (1.0 - p)).sqrt();
        assert!(
            (left - nf * p).abs() <= 4.0 * sigma,
            "{}: {left} of {n} on the left",
            method.as_str()
        );
    }
}

#[test]
fn same_seed_same_samples_different_seed_different_samples() {
    let support = PointDataset::new(2, vec![1.0, 0.0, -1.0, 0.5, 0.0, -1.0]).unwrap();
    let model = ClosedFormDenoiser::new(support, schedule()).unwrap();
    for method in [SamplerMethod::Ddpm, SamplerMethod::Ddim] {
        let a = sample(
            &model,
            &schedule(),
            &config(method, 20, 5),
            50,
            Condition::Unconditional,
        )
        .unwrap();
        let b = sample(
            &model,
            &schedule(),
            &config(method, 20, 5),
            50,
            Condition::Unconditional,
        )
        .unwrap();
        let c = sample(
            &model,
            &schedule(),
            &config(method, 20, 6),
            50,
            Condition::Unconditional,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

#[test]
fn chains_are_independent_of_the_sample_count() {
    let support = PointDataset::new(2, vec![1.0, 0.0, -1.0, 0.5]).unwrap();
    let model = ClosedFormDenoiser::new(support, schedule()).unwrap();
    let cfg = config(SamplerMethod::Ddpm, 20, 9);
    let small = sample(&model, &schedule(), &cfg, 5, Condition::Unconditional).unwrap();
    let large = sample(&model, &schedule(), &cfg, 40, Condition::Unconditional).unwrap();
    assert_eq!(small.as_flat(), &large.as_flat()[..10]);
}

#[test]
fn ddim_and_ddpm_agree_on_clean_predictions() {
    let s = schedule();
    let support = PointDataset::new(2, vec![1.0, 0.0, -1.0, 0.5, 0.3, -1.2]).unwrap();
    let model = ClosedFormDenoiser::new(support, s.clone()).unwrap();
    let n = 8;
    for method in [SamplerMethod::Ddpm, SamplerMethod::Ddim] {
        let (_, trace) = sample_with_trace(
            &model,
            &s,
            &config(method, s.num_steps(), 4),
            n,
            Condition::Unconditional,
        )
        .unwrap();
        assert_eq!(trace.len(), s.num_steps());
        // At every step the sampler's clean prediction is the posterior mean
        // of the state it was given.
        for rec in &trace {
            for (xt, x0) in rec.xt.chunks_exact(2).zip(rec.x0.chunks_exact(2)) {
                let mean = model.ideal_denoise(xt, rec.t).unwrap();
                for (a, b) in x0.iter().zip(&mean) {
                    assert!((a - b).abs() < 1e-9, "t={} {a} vs {b}", rec.t);
                }
            }
        }
    }
}

#[test]
fn ddim_is_deterministic_after_the_initial_draw() {
    let s = schedule();
    let support = PointDataset::new(1, vec![-1.0, 1.0]).unwrap();
    let model = ClosedFormDenoiser::new(support, s.clone()).unwrap();
    let (_, trace) = sample_with_trace(
        &model,
        &s,
        &config(SamplerMethod::Ddim, 10, 2),
        1,
        Condition::Unconditional,
    )
    .unwrap();
    // Replaying the update from the traced states reproduces the next state.
    for pair in trace.windows(2) {
        let (cur, next) = (&pair[0], &pair[1]);
        let ab_prev = s.alpha_bar(next.t);
        let mut eps = vec![0.0];
        model
            .predict_eps(&cur.xt, cur.t, Condition::Unconditional, &mut eps)
            .unwrap();
        let x = ab_prev.sqrt() * cur.x0[0] + (1.0 - ab_prev).sqrt() * eps[0];
        assert!((x - next.xt[0]).abs() < 1e-12);
    }
    let first = &trace[0].xt;
    let mut r = rng::stream(2, &[rng::label::SAMPLER, 0]);
    assert_eq!(first[0], standard_normal(&mut r));
}

#[test]
fn hybrid_switches_at_the_ceiling_index() {
    let s = schedule();
    let left =
        ClosedFormDenoiser::new(PointDataset::new(1, vec![-1.0]).unwrap(), s.clone()).unwrap();
    let right =
        ClosedFormDenoiser::new(PointDataset::new(1, vec![1.0]).unwrap(), s.clone()).unwrap();
    let cfg = config(SamplerMethod::Ddim, 10, 1);
    assert_eq!(timestep_sequence(10, 200).len(), 10);
    assert_eq!(switch_index(0.1, 10), 9);
    // The last step belongs to the second model, which pins the output.
    let out = hybrid_sample(&left, &right, 0.1, &s, &cfg, 20, Condition::Unconditional).unwrap();
    assert!(out.iter().all(|p| (p[0] - 1.0).abs() < 1e-9));
    let out = hybrid_sample(&left, &right, 0.0, &s, &cfg, 20, Condition::Unconditional).unwrap();
    assert!(out.iter().all(|p| (p[0] + 1.0).abs() < 1e-9));
}

#[test]
fn guidance_is_inert_for_unconditional_sampling() {
    let s = schedule();
    let support = PointDataset::with_labels(1, vec![-1.0, 1.0], vec![0, 1], 2).unwrap();
    let model = ClosedFormDenoiser::new(support, s.clone()).unwrap();
    let plain = sample(
        &model,
        &s,
        &config(SamplerMethod::Ddpm, 20, 8),
        30,
        Condition::Unconditional,
    )
    .unwrap();
    let guided = sample(
        &model,
        &s,
        &SamplerConfig {
            cfg_weight: 1.5,
            ..config(SamplerMethod::Ddpm, 20, 8)
        },
        30,
        Condition::Unconditional,
    )
    .unwrap();
    assert_eq!(plain, guided);
    let class = sample(
        &model,
        &s,
        &SamplerConfig {
            cfg_weight: 1.5,
            ..config(SamplerMethod::Ddpm, 20, 8)
        },
        30,
        Condition::Class(1),
    )
    .unwrap();
    assert!(class.iter().all(|p| p[0] > 0.0));
}
