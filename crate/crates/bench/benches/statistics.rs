use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jury_bench::{calibration_pairs, integer_pairs};
use jury_core::analysis::same_provider_bias;
use jury_core::calibration::{pava_fit, FitOptions};
use jury_core::metrics::{kendall_tau, offset_rmse, spearman_rho, weighted_kappa};
use jury_core::resampling::{bootstrap_ci, BootstrapSpec};
use jury_core::synth::bias_corpus;
use jury_core::{EvaluatorId, ScoreDimension};

fn metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group("metrics");
    for n in [100, 1000] {
        let pairs = integer_pairs(1, n);
        g.bench_with_input(BenchmarkId::new("offset_rmse", n), &pairs, |b, p| b.iter(|| offset_rmse(p)));
        g.bench_with_input(BenchmarkId::new("spearman", n), &pairs, |b, p| b.iter(|| spearman_rho(p)));
        g.bench_with_input(BenchmarkId::new("kappa", n), &pairs, |b, p| b.iter(|| weighted_kappa(p)));
        g.bench_with_input(BenchmarkId::new("kendall", n), &pairs, |b, p| b.iter(|| kendall_tau(p)));
    }
    g.finish();
}

fn pava(c: &mut Criterion) {
    let judge = EvaluatorId::judge("bench", "bench-co");
    let mut g = c.benchmark_group("pava");
    for n in [300, 3000] {
        let pairs = calibration_pairs(2, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &pairs, |b, p| {
            b.iter(|| pava_fit(p, judge.clone(), ScoreDimension::Dx, FitOptions { allow_constant: true }))
        });
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let pairs = integer_pairs(3, 300);
    let spec = BootstrapSpec {
        n_resamples: 1000,
        seed: 3,
        ..BootstrapSpec::default()
    };
    let offset = |draw: &[&(f64, f64)]| Some(draw.iter().map(|(r, e)| r - e).sum::<f64>() / draw.len() as f64);
    c.bench_function("bootstrap/offset_1000x300", |b| b.iter(|| bootstrap_ci(&pairs, offset, &spec)));
}

fn reml(c: &mut Criterion) {
    let obs = bias_corpus(4, 200, 0.3, 0.7, 0.3);
    c.bench_function("reml/bias_200_cases", |b| b.iter(|| same_provider_bias(&obs)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = metrics, pava, bootstrap, reml
}
criterion_main!(benches);
