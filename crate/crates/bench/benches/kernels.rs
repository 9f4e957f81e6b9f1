use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use koopman_core::dataset::{EmbeddingLayout, Normalization};
use koopman_core::dkn::{latent_step, DknConfig, DknModel};
use koopman_core::model::DynamicsModel;
use koopman_core::mpc::{cem_plan, CemConfig, CostSpec, ModelObjective};
use koopman_core::seed::rng_for;
use koopman_core::training::loss_and_grad;
use ndarray::Array2;
use rand::Rng;

fn model(nt: usize, pairs: usize) -> DknModel {
    let cfg = DknConfig {
        n_pairs: pairs,
        horizon: 10,
        dt: 0.05,
        ..Default::default()
    };
    DknModel::init(
        &cfg,
        EmbeddingLayout::new(nt, 4),
        Normalization::identity(4),
    )
    .unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, "bench", 0);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("training");
    for nt in [1, 50] {
        let m = model(nt, 1);
        let batch = random(128, 4 * nt, 1);
        g.bench_function(format!("encoder forward, batch 128, Nt={nt}"), |b| {
            b.iter(|| m.encoder.predict(&batch).unwrap())
        });
        let shifts: Vec<_> = (0..=10).map(|s| random(128, 4 * nt, s)).collect();
        g.bench_function(
            format!("loss and gradient, batch 128, horizon 10, Nt={nt}"),
            |b| b.iter(|| loss_and_grad(&m, &shifts, &DknConfig::default().loss).unwrap()),
        );
    }
    g.finish();
}

fn latent(c: &mut Criterion) {
    let mut g = c.benchmark_group("latent step");
    for pairs in [1, 9] {
        let m = model(1, pairs);
        let y = random(200, 2 * pairs, 2);
        g.bench_function(format!("200 rows, K={pairs}"), |b| {
            b.iter(|| latent_step(&m, &y).unwrap())
        });
    }
    g.finish();
}

fn planning(c: &mut Criterion) {
    let mut g = c.benchmark_group("cem plan");
    g.sample_size(20);
    for nt in [1, 50] {
        let m = model(nt, 1);
        let history = vec![0.1; m.layout().len()];
        let objective = ModelObjective {
            model: &m,
            history: &history,
            cost: CostSpec::default(),
        };
        let cem = CemConfig::default();
        g.bench_function(format!("default settings, Nt={nt}"), |b| {
            b.iter_batched(
                || rng_for(3, "bench-cem", 0),
                |mut rng| cem_plan(&objective, &cem, &vec![0.0; cem.horizon], &mut rng).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, training, latent, planning);
criterion_main!(benches);
