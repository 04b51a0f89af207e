use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mcoem_bench::Fixture;
use mcoem_core::engine::{average_stats, m_step};
use mcoem_core::io::Mode;
use mcoem_core::sampler::sample_posterior;
use mcoem_core::{stream_rng, Purpose, SuffStats};

fn design_matrix(c: &mut Criterion) {
    for (name, mode) in [("curve", Mode::Curve), ("image", Mode::Image)] {
        let f = Fixture::new(mode, 1).unwrap();
        let beta = f.config.beta_prior_mean(&f.model);
        c.bench_function(&format!("design_matrix/{name}"), |b| {
            b.iter(|| f.model.design_matrix(black_box(beta.as_slice())).unwrap())
        });
    }
}

fn posterior_chain(c: &mut Criterion) {
    let mut group = c.benchmark_group("posterior_chain");
    group.sample_size(10);
    for (name, mode) in [("curve", Mode::Curve), ("image", Mode::Image)] {
        let f = Fixture::new(mode, 1).unwrap();
        let sampler = f.config.sampler_config();
        let y = &f.observations[0];
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut scales = vec![sampler.initial_scale; f.truth.num_classes()];
                let mut rng = stream_rng(1, Purpose::Chain, 1, 0);
                sample_posterior(&f.truth, &f.model, y, &sampler, 1, &mut scales, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

fn maximization(c: &mut Criterion) {
    for (name, mode) in [("curve", Mode::Curve), ("image", Mode::Image)] {
        let f = Fixture::new(mode, 20).unwrap();
        let sampler = f.config.sampler_config();
        let mut stats = SuffStats::for_params(&f.truth);
        for (k, y) in f.observations.iter().enumerate() {
            let mut scales = vec![sampler.initial_scale; f.truth.num_classes()];
            let mut rng = stream_rng(1, Purpose::Chain, k as u64, 0);
            let draws = sample_posterior(&f.truth, &f.model, y, &sampler, 1, &mut scales, &mut rng).unwrap();
            let s = average_stats(&f.truth, &f.model, y, &draws.samples).unwrap();
            stats.add_scaled(1.0 / f.observations.len() as f64, &s);
        }
        let options = f.config.mstep_options();
        let grid_len = f.model.grid_len();
        c.bench_function(&format!("m_step/{name}"), |b| {
            b.iter(|| m_step(black_box(&stats), &f.truth, grid_len, &options).unwrap())
        });
    }
}

criterion_group!(benches, design_matrix, posterior_chain, maximization);
criterion_main!(benches);
