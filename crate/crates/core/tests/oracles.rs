mod common;

use common::*;
use proptest::prelude::*;
use v1t_core::config::TrainConfig;
use v1t_core::evaluation::single_trial_correlation;
use v1t_core::tensorcore::{Rng, Tensor};
use v1t_core::training::{poisson_loss, schedule_step, Action, ScheduleState};

#[test]
fn poisson_loss_matches_oracle_on_random_instances() {
    let mut rng = Rng::new(101);
    for _ in 0..1000 {
        let shape = vec![1 + rng.below(6), 1 + rng.below(9)];
        let r = random_counts(&mut rng, shape.clone());
        let o = random_rates(&mut rng, shape);
        let eps = if rng.bernoulli(0.5) { 1e-8 } else { 0.0 };
        let got = poisson_loss(&r, &o, eps).unwrap();
        let want = poisson_oracle(r.data(), o.data(), eps);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn correlation_matches_oracle_on_random_instances() {
    let mut rng = Rng::new(202);
    for _ in 0..1000 {
        let shape = vec![2 + rng.below(20), 1 + rng.below(8)];
        let mut r = random_counts(&mut rng, shape.clone());
        // some constant neurons exercise the exclusion rule
        if rng.bernoulli(0.2) {
            for t in 0..shape[0] {
                r.data_mut()[t * shape[1]] = 2.0;
            }
        }
        let o = random_rates(&mut rng, shape);
        let got = single_trial_correlation(&r, &o).unwrap().mean;
        let want = correlation_oracle(&r, &o);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn poisson_loss_is_minimised_at_the_target() {
    let mut rng = Rng::new(303);
    for _ in 0..200 {
        let r = 0.05 + 8.0 * rng.uniform();
        let f = |o: f64| poisson_loss(&Tensor::from_vec(vec![1], vec![r]), &Tensor::from_vec(vec![1], vec![o]), 0.0).unwrap();
        let argmin = golden_section(f, 1e-6, r + 20.0, 1e-9);
        assert!((argmin - r).abs() < 1e-4, "argmin {argmin} for r = {r}");
    }
}

#[test]
fn schedule_matches_reference_on_random_sequences() {
    let cfg = TrainConfig::default();
    let reference = ReferenceSchedule {
        patience: cfg.patience,
        factor: cfg.lr_decay,
        max_reductions: cfg.max_reductions,
        max_epochs: cfg.max_epochs,
        tol: cfg.improvement_tol,
    };
    let mut rng = Rng::new(404);
    let (mut reductions, mut patience_stops) = (0, 0);
    for case in 0..500 {
        let len = 10 + rng.below(240);
        let losses = scripted_losses(&mut rng, len);
        let expected = reference.replay(cfg.initial_lr, &losses);
        let mut state = ScheduleState::new(&cfg);
        for (i, &(event, lr, best_epoch)) in expected.iter().enumerate() {
            let action = schedule_step(&mut state, losses[i], &cfg);
            let want = match event {
                RefEvent::Continue => Action::Continue,
                RefEvent::Reduce => Action::ReduceLr,
                RefEvent::Stop => Action::Stop,
            };
            assert_eq!(action, want, "case {case} epoch {}", i + 1);
            assert_eq!(state.lr, lr, "case {case} epoch {}", i + 1);
            assert_eq!(state.best_epoch, best_epoch);
        }
        reductions += expected.iter().filter(|e| e.0 == RefEvent::Reduce).count();
        if expected.last().is_some_and(|e| e.0 == RefEvent::Stop) && expected.len() < cfg.max_epochs {
            patience_stops += 1;
        }
    }
    // the scripted sequences must reach both branches
    assert!(reductions > 200 && patience_stops > 50, "{reductions} reductions, {patience_stops} stops");
}

#[test]
fn flat_losses_reduce_twice_then_stop() {
    let cfg = TrainConfig::default();
    let mut state = ScheduleState::new(&cfg);
    let mut events = Vec::new();
    for epoch in 1..=100 {
        match schedule_step(&mut state, 1.0, &cfg) {
            Action::Continue => {}
            a => events.push((epoch, a)),
        }
        if events.last().map(|e| e.1) == Some(Action::Stop) {
            break;
        }
    }
    assert_eq!(events, vec![(11, Action::ReduceLr), (21, Action::ReduceLr), (31, Action::Stop)]);
    assert!((state.lr - cfg.initial_lr * 0.09).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Correlation ignores positive affine changes of the prediction and
    /// flips sign under negation.
    #[test]
    fn correlation_affine_invariance(seed in 0u64..10_000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut rng = Rng::new(seed);
        let r = random_counts(&mut rng, vec![12, 4]);
        let o = random_rates(&mut rng, vec![12, 4]);
        let base = single_trial_correlation(&r, &o).unwrap();
        let scaled = single_trial_correlation(&r, &o.map(|v| a * v + b)).unwrap();
        let negated = single_trial_correlation(&r, &o.map(|v| -v)).unwrap();
        prop_assert!((base.mean - scaled.mean).abs() < 1e-12);
        prop_assert!((base.mean + negated.mean).abs() < 1e-12);
        prop_assert!(base.mean.abs() <= 1.0 + 1e-12);
    }

    /// The loss never rewards moving a prediction away from its target.
    #[test]
    fn poisson_loss_grows_away_from_target(r in 0.1f64..10.0, d in 0.01f64..5.0) {
        let loss = |o: f64| poisson_oracle(&[r], &[o], 0.0);
        prop_assert!(loss(r + d) > loss(r));
        if r - d > 0.0 {
            prop_assert!(loss(r - d) > loss(r));
        }
    }

    /// The learning rate only ever shrinks, by exact powers of the decay.
    #[test]
    fn learning_rate_is_a_decay_power(seed in 0u64..10_000) {
        let cfg = TrainConfig::default();
        let mut rng = Rng::new(seed);
        let mut state = ScheduleState::new(&cfg);
        for loss in scripted_losses(&mut rng, 200) {
            let action = schedule_step(&mut state, loss, &cfg);
            prop_assert_eq!(state.lr, cfg.initial_lr * cfg.lr_decay.powi(state.reductions as i32));
            prop_assert!(state.reductions <= cfg.max_reductions);
            if action == Action::Stop {
                break;
            }
        }
    }
}
