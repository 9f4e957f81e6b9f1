//! Property checks over randomized inputs.

#![allow(clippy::needless_range_loop)]

use koopman_core::dataset::{
    DataGenConfig, EmbeddingLayout, Normalization, Scenario, Segmentation,
};
use koopman_core::dkn::{koopman_operator, latent_step, DknConfig, DknModel, PairEigenvalue};
use koopman_core::mpc::{wrap_angle, CemConfig, CostSpec};
use koopman_core::net::{Activation, Mlp};
use koopman_core::sim::{
    pd_control, rk4_step, rollout, Controller, DuffingSurrogateParams, PdGains,
    RigidPendulumParams, System,
};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_inverse_and_determinant(mu in -5.0..5.0f64, omega in -20.0..20.0f64, dt in 0.001..0.2f64) {
        let k = koopman_operator(PairEigenvalue { mu, omega }, dt);
        let kinv = koopman_operator(PairEigenvalue { mu: -mu, omega: -omega }, dt);
        let p = mat2(k, kinv);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((p[i][j] - want).abs() <= 1e-12);
            }
        }
        let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
        prop_assert!((det - (2.0 * mu * dt).exp()).abs() <= 1e-10 * det.abs().max(1.0));
    }

    #[test]
    fn frozen_rotation_preserves_pair_norms(
        omegas in prop::collection::vec(-10.0..10.0f64, 1..4),
        steps in 1usize..60,
        seed in any::<u64>(),
    ) {
        let k = omegas.len();
        let cfg = DknConfig { n_pairs: k, hidden: vec![4], dt: 0.05, ..Default::default() };
        let mut model = DknModel::init(&cfg, EmbeddingLayout::new(1, 2), Normalization::identity(2)).unwrap();
        let eigs: Vec<_> = omegas.iter().map(|&omega| PairEigenvalue { mu: 0.0, omega }).collect();
        model.transition.freeze(&eigs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y0 = Array2::from_shape_fn((3, 2 * k), |_| rand::Rng::random_range(&mut rng, -2.0..2.0));
        let mut y = y0.clone();
        for _ in 0..steps {
            y = latent_step(&model, &y).unwrap();
        }
        for r in 0..3 {
            for p in 0..k {
                let n0 = y0[[r, 2 * p]].hypot(y0[[r, 2 * p + 1]]);
                let n1 = y[[r, 2 * p]].hypot(y[[r, 2 * p + 1]]);
                prop_assert!((n0 - n1).abs() <= 1e-12 * n0.max(1.0));
            }
        }
    }

    #[test]
    fn frozen_decay_contracts_by_the_exact_factor(mu in -5.0..-0.01f64, omega in -5.0..5.0f64) {
        let cfg = DknConfig { hidden: vec![4], dt: 0.1, ..Default::default() };
        let mut model = DknModel::init(&cfg, EmbeddingLayout::new(1, 2), Normalization::identity(2)).unwrap();
        model.transition.freeze(&[PairEigenvalue { mu, omega }]);
        let y = Array2::from_shape_vec((1, 2), vec![0.3, -1.2]).unwrap();
        let next = latent_step(&model, &y).unwrap();
        let ratio = next[[0, 0]].hypot(next[[0, 1]]) / 0.3f64.hypot(1.2);
        prop_assert!(ratio < 1.0);
        prop_assert!((ratio - (mu * 0.1).exp()).abs() <= 1e-12);
    }

    #[test]
    fn mlp_forward_is_batch_equivariant(seed in any::<u64>(), rows in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(&[3, 6, 5, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let x = Array2::from_shape_fn((rows, 3), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let mut perm: Vec<usize> = (0..rows).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let y = mlp.predict(&x).unwrap();
        let yp = mlp.predict(&x.select(Axis(0), &perm)).unwrap();
        prop_assert_eq!(yp, y.select(Axis(0), &perm));
    }

    #[test]
    fn rollouts_are_bit_reproducible(q in -3.0..3.0f64, qd in -2.0..2.0f64) {
        let sys = System::Rigid(RigidPendulumParams::default());
        let a = rollout(&sys, &Controller::Zero, &[q, qd], 200, 0.02, 1).unwrap();
        let b = rollout(&sys, &Controller::Zero, &[q, qd], 200, 0.02, 1).unwrap();
        prop_assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn duffing_commutes_with_negation(th in -1.5..1.5f64, thd in -2.0..2.0f64) {
        let sys = System::Soft(DuffingSurrogateParams::default());
        let a = rollout(&sys, &Controller::Zero, &[th, thd, 0.0], 300, 0.05, 1).unwrap();
        let b = rollout(&sys, &Controller::Zero, &[-th, -thd, 0.0], 300, 0.05, 1).unwrap();
        for (ra, rb) in a.samples.rows().into_iter().zip(b.samples.rows()) {
            prop_assert!((ra[0] + rb[0]).abs() <= 1e-12);
            prop_assert!((ra[1] + rb[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn pd_law_is_linear(
        a in prop::array::uniform3(-5.0..5.0f64),
        b in prop::array::uniform3(-5.0..5.0f64),
        s in -3.0..3.0f64,
        kp in 0.0..20.0f64,
        kd in 0.0..5.0f64,
    ) {
        let f = |v: [f64; 3]| pd_control(v[0], v[1], &PdGains::new(kp, kd, v[2]));
        let combo = [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
        let lhs = f(combo);
        let rhs = f(a) + s * f(b);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn normalization_round_trips(seed in any::<u64>(), rows in 1usize..20, window in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = EmbeddingLayout::new(window, 3);
        let x = Array2::from_shape_fn((rows, layout.len()), |_| rand::Rng::random_range(&mut rng, -50.0..50.0));
        let norm = Normalization::fit(&x, layout);
        let back = norm.invert(&norm.apply(&x));
        for (u, v) in back.iter().zip(x.iter()) {
            prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn wrapped_angles_stay_in_range(a in -1e3..1e3f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        let turns = (a - w) / std::f64::consts::TAU;
        prop_assert!((turns - turns.round()).abs() <= 1e-9);
    }

    #[test]
    fn data_config_round_trips_through_toml(
        nt in 1usize..80,
        dt in 0.001..0.1f64,
        seed in any::<u64>(),
        scenario in prop::sample::select(vec![Scenario::Rigid, Scenario::RigidPd, Scenario::Soft]),
        disjoint in any::<bool>(),
    ) {
        let mut cfg = DataGenConfig::preset(scenario);
        cfg.nt = nt;
        cfg.dt = dt;
        cfg.seed = seed;
        cfg.segmentation = if disjoint { Segmentation::Disjoint } else { Segmentation::Overlapping };
        let text = toml::to_string(&cfg).unwrap();
        let back: DataGenConfig = toml::from_str(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn model_configs_round_trip_through_toml(pairs in 1usize..10, lr in 1e-5..1e-1f64, seed in any::<u64>()) {
        let cfg = DknConfig { n_pairs: pairs, learning_rate: lr, seed, ..Default::default() };
        let back: DknConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
        let cem = CemConfig { seed, sigma0: Some(lr), ..Default::default() };
        let back: CemConfig = toml::from_str(&toml::to_string(&cem).unwrap()).unwrap();
        prop_assert_eq!(back, cem);
        let cost = CostSpec::default();
        let back: CostSpec = toml::from_str(&toml::to_string(&cost).unwrap()).unwrap();
        prop_assert_eq!(back, cost);
    }
}

#[test]
fn rk4_error_shrinks_with_fourth_order() {
    let exact = |dt: f64| dt.exp();
    let step = |dt: f64| rk4_step(|x: &[f64; 1]| [x[0]], &[1.0], dt)[0];
    for dt in [0.4, 0.2, 0.1, 0.05] {
        let coarse = (step(dt) - exact(dt)).abs();
        let fine = (step(dt / 2.0) - exact(dt / 2.0)).abs();
        let ratio = coarse / fine;
        // local error is fifth order, so the ratio is near 32
        assert!(ratio >= 14.0, "dt={dt}: ratio {ratio}");
    }
    assert!((step(0.1) - 0.1f64.exp()).abs() <= 1e-7);
}
