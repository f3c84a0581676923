use modurec::autoencoder::DropoutConfig;
use modurec::model::{self, stream_rng, streams, ModelConfig, ModelParams, Orientation, Variant};
use modurec::modulation::{ColdRule, CombinerMode, FilmParams};
use modurec::optim::{Optimizer, OptimizerKind};
use modurec::training::{
    gradient_check, gradient_check_at, perturbed_params, synthetic_problem, train_problem, Batching, SyntheticSize,
    TrainConfig,
};

const TOL: f64 = 1e-4;

fn config(variant: Variant, combiner: CombinerMode) -> ModelConfig {
    ModelConfig { variant, combiner, latent: 4, ..ModelConfig::default() }
}

#[test]
fn gradients_match_finite_differences_for_every_variant() {
    for variant in [Variant::Base, Variant::D, Variant::DT, Variant::DFT] {
        for seed in 0..3 {
            let report = gradient_check(&config(variant, CombinerMode::Adaptive), SyntheticSize::default(), seed).unwrap();
            assert!(report.max_active_error() < TOL, "{variant:?} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn gradients_match_for_every_combiner_orientation_and_cold_rule() {
    for combiner in [CombinerMode::Nothing, CombinerMode::Static, CombinerMode::Adaptive] {
        for orientation in [Orientation::AsWritten, Orientation::Transposed] {
            for cold_rule in [ColdRule::EitherZero, ColdRule::BothZero] {
                let cfg = ModelConfig { orientation, cold_rule, ..config(Variant::DFT, combiner) };
                let report = gradient_check(&cfg, SyntheticSize::default(), 9).unwrap();
                assert!(report.max_active_error() < TOL, "{combiner:?} {orientation:?} {cold_rule:?}: {report:?}");
            }
        }
    }
}

#[test]
fn frozen_groups_get_no_gradient() {
    let cfg = config(Variant::DFT, CombinerMode::Nothing);
    let problem = synthetic_problem(SyntheticSize::default(), 2);
    let params = perturbed_params(&cfg, &problem, 2);
    let (_, g) = model::loss_and_grad(&problem, &params, &cfg, None, 0.0, &DropoutConfig::off(), &mut stream_rng(0, 0)).unwrap();
    assert!(g.bilinear.theta.iter().all(|&v| v == 0.0));
    let report = gradient_check_at(&problem, &params, &cfg, 0.0).unwrap();
    assert!(report.groups.iter().filter(|g| g.name.starts_with("bilinear")).all(|g| !g.active));
}

/// One optimizer step on the full batch with dropout off.
fn one_step(cfg: &ModelConfig, params: &ModelParams, kind: OptimizerKind, lr: f64) -> ModelParams {
    let problem = synthetic_problem(SyntheticSize::default(), 4);
    let (_, grads) =
        model::loss_and_grad(&problem, params, cfg, None, 1e-3, &DropoutConfig::off(), &mut stream_rng(0, streams::DROPOUT)).unwrap();
    let mut next = params.clone();
    Optimizer::new(kind, lr).step(&mut next, &grads, |n| if cfg.is_trainable(n) { 1.0 } else { 0.0 });
    next
}

#[test]
fn identity_modulation_steps_exactly_like_plain_autorec() {
    let problem = synthetic_problem(SyntheticSize::default(), 4);
    let base = config(Variant::Base, CombinerMode::Nothing);
    let timed = config(Variant::DT, CombinerMode::Nothing);
    let mut params = perturbed_params(&timed, &problem, 6);
    params.film = FilmParams::identity();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let a = one_step(&base, &params, kind, 1e-2);
        let b = one_step(&timed, &params, kind, 1e-2);
        assert_eq!(a.autoencoder, b.autoencoder, "{kind:?}");
    }
}

#[test]
fn sgd_step_moves_against_the_gradient() {
    let cfg = config(Variant::DFT, CombinerMode::Adaptive);
    let problem = synthetic_problem(SyntheticSize::default(), 4);
    let params = perturbed_params(&cfg, &problem, 1);
    let (_, grads) =
        model::loss_and_grad(&problem, &params, &cfg, None, 1e-3, &DropoutConfig::off(), &mut stream_rng(0, streams::DROPOUT)).unwrap();
    let lr = 0.05;
    let next = one_step(&cfg, &params, OptimizerKind::Sgd, lr);
    for (((name, p0), (_, p1)), (_, g)) in params.tensors().into_iter().zip(next.tensors()).zip(grads.tensors()) {
        for ((a, b), d) in p0.iter().zip(p1.iter()).zip(g.iter()) {
            assert_eq!(*b, a - lr * d, "{name}");
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let cfg = config(Variant::DFT, CombinerMode::Static);
    let problem = synthetic_problem(SyntheticSize::default(), 4);
    let params = perturbed_params(&cfg, &problem, 1);
    assert_eq!(one_step(&cfg, &params, OptimizerKind::Adam, 0.0), params);
    assert_eq!(one_step(&cfg, &params, OptimizerKind::Sgd, 0.0), params);
}

#[test]
fn small_steps_decrease_the_loss() {
    let cfg = config(Variant::DFT, CombinerMode::Adaptive);
    let problem = synthetic_problem(SyntheticSize::default(), 8);
    let mut params = perturbed_params(&cfg, &problem, 8);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-4);
    let mut last = f64::INFINITY;
    for _ in 0..10 {
        let (loss, grads) =
            model::loss_and_grad(&problem, &params, &cfg, None, 1e-3, &DropoutConfig::off(), &mut stream_rng(0, 0)).unwrap();
        assert!(loss < last, "{loss} >= {last}");
        last = loss;
        opt.step(&mut params, &grads, |n| if cfg.is_trainable(n) { 1.0 } else { 0.0 });
    }
}

fn short_run(model: ModelConfig, seed: u64) -> TrainConfig {
    TrainConfig { model, epochs: 8, learning_rate: 5e-3, batch: Batching::Rows(3), seed, early_stop_patience: 4, ..TrainConfig::default() }
}

fn holdout_and_test(problem_seed: u64) -> (Vec<modurec::dataio::RatingEvent>, Vec<modurec::dataio::RatingEvent>) {
    let p = synthetic_problem(SyntheticSize::default(), problem_seed);
    let ev = |k: usize| {
        let (u, i) = p.positions[k];
        modurec::dataio::RatingEvent { user_idx: u, item_idx: i, rating: p.ratings.values[[u, i]], timestamp: 0 }
    };
    ((0..4).map(ev).collect(), (4..8).map(ev).collect())
}

#[test]
fn training_is_deterministic_per_seed() {
    let problem = synthetic_problem(SyntheticSize::default(), 3);
    let (holdout, test) = holdout_and_test(3);
    let cfg = short_run(config(Variant::DFT, CombinerMode::Adaptive), 21);
    let run = || {
        let params = ModelParams::init(&cfg.model, &problem, cfg.seed);
        train_problem(&problem, params, &holdout, &test, &cfg).unwrap()
    };
    let (r1, p1) = run();
    let (r2, p2) = run();
    assert_eq!(r1.metrics(), r2.metrics());
    assert_eq!(r1.test_rmse, r2.test_rmse);
    assert_eq!(p1, p2);
}

#[test]
fn dft_without_features_trains_exactly_like_dt() {
    let problem = synthetic_problem(SyntheticSize::default(), 5);
    let (holdout, test) = holdout_and_test(5);
    let run = |variant| {
        let cfg = short_run(config(variant, CombinerMode::Nothing), 2);
        let params = ModelParams::init(&cfg.model, &problem, cfg.seed);
        train_problem(&problem, params, &holdout, &test, &cfg).unwrap().0
    };
    let (dt, dft) = (run(Variant::DT), run(Variant::DFT));
    assert_eq!(dt.metrics(), dft.metrics());
    assert_eq!(dt.test_rmse, dft.test_rmse);
}

#[test]
fn dropout_free_d_with_zero_rates_matches_base() {
    let problem = synthetic_problem(SyntheticSize::default(), 6);
    let (holdout, test) = holdout_and_test(6);
    let run = |variant| {
        let mut model = config(variant, CombinerMode::Nothing);
        model.dropout_input = 0.0;
        model.dropout_embedding = 0.0;
        let cfg = short_run(model, 4);
        let params = ModelParams::init(&cfg.model, &problem, cfg.seed);
        train_problem(&problem, params, &holdout, &test, &cfg).unwrap().0
    };
    assert_eq!(run(Variant::Base).metrics(), run(Variant::D).metrics());
}

#[test]
fn best_parameters_are_restored() {
    let problem = synthetic_problem(SyntheticSize::default(), 7);
    let (holdout, test) = holdout_and_test(7);
    let cfg = TrainConfig { epochs: 30, learning_rate: 5e-2, ..short_run(config(Variant::D, CombinerMode::Nothing), 1) };
    let params = ModelParams::init(&cfg.model, &problem, cfg.seed);
    let (report, kept) = train_problem(&problem, params, &holdout, &test, &cfg).unwrap();
    let best = report.epochs[report.best_epoch - 1].holdout_rmse.unwrap();
    assert_eq!(report.best_holdout_rmse, Some(best));
    assert!(report.epochs.iter().all(|e| e.holdout_rmse.unwrap() >= best));
    let preds = model::predict_events(&problem, &kept, &cfg.model, &holdout).unwrap();
    let truths: Vec<f64> = holdout.iter().map(|e| e.rating).collect();
    assert_eq!(modurec::eval::rmse(&preds, &truths).unwrap(), best);
}
