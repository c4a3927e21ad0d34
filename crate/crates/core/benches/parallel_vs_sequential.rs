//! Ensemble throughput: rayon-parallel member evaluation against the
//! sequential fallback, on the sample-evolve-measure pipeline.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayleigh_core::dynamics::evolve;
use rayleigh_core::ensemble::{sample_initial_state, Perturbation};
use rayleigh_core::exec::{derive_stream, map_indexed, map_indexed_seq};
use rayleigh_core::geom::ScalingParams;
use rayleigh_core::stats::{tagged_empirical_measure, Observable};

fn member(params: &ScalingParams, phi0: &Perturbation, h: &Observable, idx: usize) -> f64 {
    let mut rng = derive_stream(17, "bench-member", idx as u64);
    let init = sample_initial_state(params, phi0, &mut rng).unwrap();
    let (state, _) = evolve(&init, 0.2, params).unwrap();
    tagged_empirical_measure(&state, h, params.lambda).unwrap()
}

fn bench_ensemble(c: &mut Criterion) {
    let params = ScalingParams::new(0.02, 1.0, 2, 5.0).unwrap();
    let phi0 = Perturbation::cosine();
    let h = Observable::cos_x1();
    let members = 16usize;
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", members), |b| {
        b.iter(|| {
            let vals = map_indexed(members, |i| member(&params, &phi0, &h, i));
            vals.iter().sum::<f64>()
        })
    });
    group.bench_function(BenchmarkId::new("sequential", members), |b| {
        b.iter(|| {
            let vals = map_indexed_seq(members, |i| member(&params, &phi0, &h, i));
            vals.iter().sum::<f64>()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_ensemble);
criterion_main!(benches);
