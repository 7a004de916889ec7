use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use foodchain::hormander::{self, Direction};
use foodchain::lyapunov::{self, CertInputs, ScanPlan};
use foodchain::persistence;
use foodchain::rng::NormalStream;
use foodchain::sim::{self, EnsembleRequest, SimConfig};
use foodchain::{ChainSpec, State};

fn chain(n: usize) -> ChainSpec {
    let death = vec![0.2; n - 1];
    let diag = vec![0.8; n];
    let lower = vec![1.0; n - 1];
    let upper = vec![0.5; n - 1];
    let mut sigma = vec![0.1; n];
    sigma[0] = 0.5;
    ChainSpec::new(2.0, &death, &diag, &lower, &upper, &sigma).unwrap()
}

fn bench_persistence(c: &mut Criterion) {
    let mut g = c.benchmark_group("persistence");
    for n in [2, 4, 8] {
        let spec = chain(n);
        let tilde = spec.tilde();
        g.bench_with_input(BenchmarkId::new("classify", n), &spec, |b, s| b.iter(|| persistence::classify(black_box(s))));
        g.bench_with_input(BenchmarkId::new("exact_delta", n), &tilde, |b, t| {
            b.iter(|| persistence::exact::delta_tilde_all(black_box(t)))
        });
    }
    g.finish();
}

fn bench_brackets(c: &mut Criterion) {
    let mut g = c.benchmark_group("hormander");
    for n in [2, 4, 6] {
        let tilde = chain(n).tilde();
        g.bench_with_input(BenchmarkId::new("bracket_chain", n), &tilde, |b, t| {
            b.iter(|| hormander::bracket_chain(black_box(t), Direction::Bottom).unwrap())
        });
        let bc = hormander::bracket_chain(&tilde, Direction::Bottom).unwrap();
        let x = vec![0.7; n];
        g.bench_with_input(BenchmarkId::new("rank_at", n), &x, |b, x| {
            b.iter(|| bc.rank_at(black_box(x), hormander::DEFAULT_RANK_TOLERANCE).unwrap())
        });
    }
    g.finish();
}

fn bench_lyapunov(c: &mut Criterion) {
    let spec = chain(3);
    let plan = ScanPlan::log_shells(1e-3, 1e3, 10, 100, 0);
    c.bench_function("lyapunov/verify_n3_1000pts", |b| {
        b.iter(|| lyapunov::verify_drift_inequalities(black_box(&spec), &CertInputs::default(), &plan).unwrap())
    });
}

fn bench_sim(c: &mut Criterion) {
    let mut g = c.benchmark_group("sim");
    let tilde = chain(3).tilde();
    let y = [0.1, -0.2, 0.3];
    let xi = [0.5, -1.0, 0.25];
    g.bench_function("step_log_em_n3", |b| b.iter(|| sim::step_log_em(black_box(&tilde), black_box(&y), 1e-3, black_box(&xi))));
    let mut stream = NormalStream::new(1, 0, 4);
    let mut out = [0.0; 4];
    g.bench_function("normal_stream_n4", |b| b.iter(|| stream.fill(black_box(&mut out))));

    let spec = chain(3);
    let x0 = State(vec![1.0, 1.0, 1.0]);
    let cfg = SimConfig::new(10.0, 3).with_dt(1e-2);
    g.bench_function("simulate_1000_steps", |b| b.iter(|| sim::simulate(black_box(&spec), &x0, &cfg).unwrap()));
    let mut req = EnsembleRequest::new(64);
    req.workers = Some(1);
    g.sample_size(20);
    g.bench_function("ensemble_64x1000", |b| b.iter(|| sim::ensemble(black_box(&spec), &x0, &req, &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, bench_persistence, bench_brackets, bench_lyapunov, bench_sim);
criterion_main!(benches);
