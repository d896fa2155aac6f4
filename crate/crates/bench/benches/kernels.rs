use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use dnf_bench::{four_branch_box, four_branch_surrogate};
use dnf_core::autodiff::Tensor;
use dnf_core::darcy::{DarcyConfig, DarcyModel};
use dnf_core::designer::{CriterionKind, DesignCriterion};
use dnf_core::diffnet::{train_surrogate, Dataset, TrainConfig};
use dnf_core::flows::{train_flow, AffineMap, FlowTrainConfig, NormalizingFlow};
use dnf_core::mc::{gaussian_sample, lhs_sample};
use dnf_core::posterior::LimitStatePosterior;
use dnf_core::problems::{four_branch_g, InputDensity};

fn surrogate(c: &mut Criterion) {
    let s = four_branch_surrogate(60, 200);
    let x = Tensor::from_rows(&gaussian_sample(256, 2, 1), 2);
    c.bench_function("surrogate forward, 256 rows", |b| b.iter(|| s.evaluate_batch(black_box(&x)).unwrap()));
    c.bench_function("surrogate value and input gradient, 256 rows", |b| {
        b.iter(|| s.value_and_grad_batch(black_box(&x)).unwrap())
    });
    let mc = Tensor::from_rows(&gaussian_sample(100_000, 2, 2), 2);
    c.bench_function("surrogate Monte Carlo, 1e5 samples", |b| b.iter(|| s.evaluate_batch(&mc).unwrap()));

    let pts = lhs_sample(95, &four_branch_box(), 3);
    let data = Dataset::from_pairs(2, pts.iter().map(|p| (p.clone(), four_branch_g(p)))).unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        ..TrainConfig::default()
    };
    c.bench_function("surrogate training, 95 points x 100 epochs", |b| {
        b.iter(|| train_surrogate(&data, &cfg).unwrap())
    });
}

fn flows(c: &mut Criterion) {
    let domain = four_branch_box();
    let s = four_branch_surrogate(60, 500);
    let post = LimitStatePosterior::new(&s, 0.2, &domain).unwrap();
    let cfg = FlowTrainConfig {
        steps: 10,
        ..FlowTrainConfig::default()
    };
    let mut group = c.benchmark_group("flow");
    group.sample_size(10);
    group.bench_function("training, 10 steps of batch 256", |b| {
        b.iter(|| train_flow(&post, &cfg, AffineMap::from_box(&domain, 3.0)).unwrap())
    });
    let flow = NormalizingFlow::random(2, 8, &[64, 64], 4.0, 5).unwrap();
    group.bench_function("sampling 1024 points", |b| b.iter(|| flow.sample(1024, 9).unwrap()));
    let x = Tensor::from_rows(&gaussian_sample(1024, 2, 4), 2);
    group.bench_function("log density of 1024 points", |b| b.iter(|| flow.log_density_batch(&x).unwrap()));

    let density = InputDensity::StandardNormal { dim: 2 };
    let data: Vec<Vec<f64>> = lhs_sample(60, &domain, 8);
    for kind in CriterionKind::ALL {
        let crit = DesignCriterion::new(kind, 0.5).unwrap();
        group.bench_function(format!("{kind} selection of 5 points"), |b| {
            b.iter_batched(
                || 0u64,
                |seed| crit.select(&flow, &data, 5, &domain, |x| density.log_pdf(x), 1024, seed).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn darcy(c: &mut Criterion) {
    let mut group = c.benchmark_group("darcy");
    group.sample_size(20);
    for m in [31, 63] {
        let model = DarcyModel::new(&DarcyConfig {
            m,
            ..DarcyConfig::default()
        })
        .unwrap();
        group.bench_function(format!("solve, m = {m}"), |b| {
            b.iter(|| model.limit_state(black_box(&[0.4, -1.1, 0.7, 0.2])).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, surrogate, flows, darcy);
criterion_main!(benches);
