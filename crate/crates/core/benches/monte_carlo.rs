use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmf_online::experiment::normalized_scenario;
use mmf_online::mechanism::{simulate, MechanismKind};
use mmf_online::metrics::cumulative_loss;
use mmf_online::par;

fn run(seed: u64) -> f64 {
    let scn = normalized_scenario(5, 500, seed);
    cumulative_loss(&simulate(&scn, MechanismKind::DetNspBs).expect("valid scenario"))
}

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("monte_carlo");
    g.sample_size(10);
    for runs in [8u64, 32] {
        let seeds: Vec<u64> = (0..runs).collect();
        g.bench_with_input(BenchmarkId::new("par_map", runs), &seeds, |b, s| {
            b.iter(|| par::map(s.clone(), run))
        });
        g.bench_with_input(BenchmarkId::new("sequential", runs), &seeds, |b, s| {
            b.iter(|| par::map_sequential(s.clone(), run))
        });
    }
    g.finish();
}

criterion_group!(benches, monte_carlo);
criterion_main!(benches);
