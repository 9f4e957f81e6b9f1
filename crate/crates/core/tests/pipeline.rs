//! End-to-end contracts: dataset generation, training and control.

use koopman_core::baseline::{fcn_train, FcnModel};
use koopman_core::dataset::{
    generate_dataset, newest_sample, DataGenConfig, DatasetBundle, EmbeddingLayout, Normalization,
    Scenario,
};
use koopman_core::dkn::{train, AuxInput, DknConfig, DknModel, LossWeights};
use koopman_core::model::{predict_embedding, DynamicsModel};
use koopman_core::mpc::{
    cem_plan, run_episode, CemConfig, CostSpec, EpisodeConfig, ModelObjective, SequenceObjective,
};
use koopman_core::seed::rng_for;
use koopman_core::sim::{DuffingSurrogateParams, System};
use koopman_core::training::dataset_losses;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn rigid_preset_training_matrix_shape() {
    let cfg = DataGenConfig::preset(Scenario::Rigid);
    assert_eq!((cfg.n_train, cfg.nt, cfg.dt), (15000, 50, 0.02));
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(b.train.x().dim(), (15000, 150));
    assert_eq!(b.train.x_prime().dim(), (15000, 150));
    assert_eq!(b.validation.len(), 1000);
    assert_eq!(b.evaluation.len(), 3000);
}

fn small_rigid(n_train: usize, horizon: usize, seed: u64) -> DatasetBundle {
    let mut cfg = DataGenConfig::preset(Scenario::Rigid);
    cfg.nt = 1;
    cfg.n_train = n_train;
    cfg.n_validation = 200;
    cfg.n_evaluation = 500;
    cfg.horizon = horizon;
    cfg.steps_per_trajectory = 60;
    cfg.seed = seed;
    generate_dataset(&cfg).unwrap()
}

fn quick_config(epochs: usize) -> DknConfig {
    DknConfig {
        hidden: vec![32, 32],
        aux_input: AuxInput::Radius,
        epochs,
        seed: 3,
        ..Default::default()
    }
}

/// Loss of predicting every state channel of `X'` by its mean, in the
/// normalized units the training losses use.
fn mean_predictor_loss(b: &DatasetBundle) -> f64 {
    let eval = b.evaluation.normalized(&b.normalization);
    let xp = eval.x_prime();
    let layout = eval.layout;
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..layout.len() {
        if layout.is_control(c) {
            continue;
        }
        let col = xp.column(c);
        let m = col.mean().unwrap();
        total += col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
        count += 1;
    }
    total / count as f64
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let b = small_rigid(50, 1, 1);
    let (tr, va) = (
        b.train.normalized(&b.normalization),
        b.validation.normalized(&b.normalization),
    );
    let cfg = quick_config(0);
    let out = train(&cfg, &tr, &va).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best_epoch, None);
    let init = DknModel::init(&cfg, tr.layout, b.normalization.clone()).unwrap();
    assert_eq!(out.model.params(), init.params());

    let out = fcn_train(&cfg, &tr, &va).unwrap();
    assert!(out.log.is_empty());
    let init = FcnModel::init(&cfg, tr.layout, b.normalization.clone()).unwrap();
    assert_eq!(out.model.params(), init.params());
}

#[test]
fn same_seed_trains_identical_parameters() {
    let b = small_rigid(300, 2, 2);
    let (tr, va) = (
        b.train.normalized(&b.normalization),
        b.validation.normalized(&b.normalization),
    );
    let cfg = DknConfig {
        horizon: 2,
        ..quick_config(3)
    };
    let a = train(&cfg, &tr, &va).unwrap();
    let c = train(&cfg, &tr, &va).unwrap();
    assert_eq!(a.model.params(), c.model.params());
    assert_eq!(a.log, c.log);
    let a = fcn_train(&cfg, &tr, &va).unwrap();
    let c = fcn_train(&cfg, &tr, &va).unwrap();
    assert_eq!(a.model.params(), c.model.params());
}

#[test]
fn trained_models_beat_the_mean_predictor() {
    let b = small_rigid(2000, 10, 4);
    let (tr, va) = (
        b.train.normalized(&b.normalization),
        b.validation.normalized(&b.normalization),
    );
    let ev = b.evaluation.normalized(&b.normalization);
    let baseline = mean_predictor_loss(&b);
    let cfg = quick_config(200);
    let w = LossWeights::default();

    let dkn = train(&cfg, &tr, &va).unwrap();
    assert!(dkn.diverged_at.is_none());
    let pred = dataset_losses(&dkn.model, &ev, 1, &w).unwrap().pred;
    assert!(
        pred < baseline,
        "dkn pred {pred} vs mean predictor {baseline}"
    );

    let fcn = fcn_train(&cfg, &tr, &va).unwrap();
    let pred_f = dataset_losses(&fcn.model, &ev, 1, &w).unwrap().pred;
    assert!(
        pred_f < baseline,
        "fcn pred {pred_f} vs mean predictor {baseline}"
    );

    // open-loop angle error over ten steps, averaged over the evaluation set
    let layout = b.evaluation.layout;
    let steps = 10;
    let mut err = vec![0.0; steps];
    for r in 0..b.evaluation.len() {
        let x = b.evaluation.x().row(r).to_vec();
        let seq = predict_embedding(&dkn.model, &x, steps).unwrap();
        for (s, e) in seq.iter().enumerate() {
            let truth = newest_sample(&layout, b.evaluation.shifts[s + 1].row(r));
            let got = newest_sample(&layout, ndarray::ArrayView1::from(e.as_slice()));
            err[s] += (truth[0] - got[0]).powi(2);
        }
    }
    assert!(
        err[steps - 1] > err[0],
        "open-loop error did not grow: {err:?}"
    );
}

struct Bowl {
    target: Vec<f64>,
}

impl SequenceObjective for Bowl {
    fn costs(&self, c: &Array2<f64>) -> Vec<f64> {
        c.rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .zip(&self.target)
                    .map(|(u, t)| (u - t).powi(2))
                    .sum()
            })
            .collect()
    }
}

#[test]
fn cem_elite_cost_is_non_increasing_in_expectation() {
    let cem = CemConfig {
        iterations: 6,
        ..Default::default()
    };
    let bowl = Bowl {
        target: (0..cem.horizon)
            .map(|i| 1.5 * (i as f64 * 0.7).sin())
            .collect(),
    };
    let seeds = 40;
    let mut violations = vec![0usize; cem.iterations - 1];
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = cem_plan(&bowl, &cem, &vec![0.0; cem.horizon], &mut rng).unwrap();
        for (i, w) in plan.elite_costs.windows(2).enumerate() {
            if w[1] > w[0] {
                violations[i] += 1;
            }
        }
    }
    for (i, v) in violations.iter().enumerate() {
        let rate = *v as f64 / seeds as f64;
        assert!(rate <= 0.05, "iteration pair {i}: violation rate {rate}");
    }
}

fn soft_models() -> (DknModel, FcnModel) {
    let cfg = DknConfig {
        hidden: vec![16],
        dt: 0.05,
        seed: 8,
        ..Default::default()
    };
    let layout = EmbeddingLayout::new(3, 4);
    let norm = Normalization::identity(4);
    (
        DknModel::init(&cfg, layout, norm.clone()).unwrap(),
        FcnModel::init(&cfg, layout, norm).unwrap(),
    )
}

#[test]
fn episodes_are_bounded_reproducible_and_receding() {
    let (dkn, fcn) = soft_models();
    let plant = System::Soft(DuffingSurrogateParams::default());
    let cem = CemConfig {
        population: 40,
        elites: 5,
        iterations: 3,
        seed: 12,
        ..Default::default()
    };
    let cost = CostSpec::default();
    let episode = EpisodeConfig {
        duration_s: 2.0,
        ..Default::default()
    };
    let models: [&dyn DynamicsModel; 2] = [&dkn, &fcn];
    for model in models {
        let a = run_episode(&plant, model, &cem, &cost, &episode).unwrap();
        let b = run_episode(&plant, model, &cem, &cost, &episode).unwrap();
        assert_eq!(a.controls, b.controls);
        assert_eq!(a.states, b.states);
        assert_eq!(a.controls.len(), episode.ticks());
        assert!(a.controls.iter().all(|u| (-2.0..=2.0).contains(u)));

        // the first applied action is element 0 of the first plan
        let layout = model.layout();
        let history: Vec<f64> = (0..layout.len())
            .map(|i| {
                let c = i % layout.sample_dim;
                if c < 3 {
                    episode.initial_state[c]
                } else {
                    0.0
                }
            })
            .collect();
        let objective = ModelObjective {
            model,
            history: &history,
            cost,
        };
        let plan = cem_plan(
            &objective,
            &cem,
            &vec![0.0; cem.horizon],
            &mut rng_for(cem.seed, "cem", 0),
        )
        .unwrap();
        assert_eq!(a.controls[0], plan.sequence[0]);
    }
}
