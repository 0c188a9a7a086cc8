use ndarray::{Array1, Array2};
use perf_rl::finite_sample::{
    alternating_optimize, best_response_d, empirical_lagrangian, exact_lagrangian,
    finite_sample_rpo_run, sample_batch, ImportanceWeights, SampleStatistics,
};
use perf_rl::mdp::{occupancy_from_policy, DualVector, OccupancyMeasure};
use perf_rl::retraining::{default_initial_occupancy, rpo_run};
use perf_rl::solver::{dual_norm_bound, solve_regularized, SolveMode};
use perf_rl::synthetic::{certified_response, random_mdp, random_policy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dual_iterates_stay_in_the_ball(
        seed in any::<u64>(),
        ns in 1usize..6,
        na in 1usize..4,
        log_lambda in -1.0f64..4.0,
    ) {
        let mdp = random_mdp(ns, na, 0.9, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = occupancy_from_policy(&mdp, &random_policy(&mut rng, ns, na)).unwrap();
        let batch = sample_batch(&mdp, &d, 200, seed).unwrap();
        let stats = SampleStatistics::from_batch(&batch, ImportanceWeights::True).unwrap();
        let result = alternating_optimize(&stats, 10f64.powf(log_lambda), 2.0, 300, &mdp.initial).unwrap();
        prop_assert!(result.max_dual_norm <= dual_norm_bound(ns, 0.9) + 1e-9);
    }

    #[test]
    fn best_response_beats_random_box_points(
        seed in any::<u64>(),
        ns in 1usize..6,
        na in 1usize..4,
        lambda in 0.05f64..20.0,
        overlap in 1.0f64..4.0,
    ) {
        let mdp = random_mdp(ns, na, 0.9, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_t = occupancy_from_policy(&mdp, &random_policy(&mut rng, ns, na)).unwrap();
        let batch = sample_batch(&mdp, &d_t, 100, seed).unwrap();
        let stats = SampleStatistics::from_batch(&batch, ImportanceWeights::True).unwrap();
        let h = DualVector::new(Array1::from_shape_fn(ns, |_| rng.random::<f64>() * 20.0 - 10.0));
        let best = best_response_d(&stats, h.values(), lambda, overlap).unwrap();
        let value = empirical_lagrangian(&batch, &best, &h, lambda, &mdp.initial);
        for _ in 0..1000 {
            let d = OccupancyMeasure::new(Array2::from_shape_fn((ns, na), |(s, a)| {
                rng.random::<f64>() * overlap * stats.anchor[[s, a]]
            }));
            let other = empirical_lagrangian(&batch, &d, &h, lambda, &mdp.initial);
            prop_assert!(value - other >= -1e-9, "{value} < {other}");
        }
    }
}

#[test]
fn empirical_lagrangian_is_unbiased() {
    let batches = 400;
    for seed in 0..5u64 {
        let mdp = random_mdp(4, 3, 0.9, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_t = occupancy_from_policy(&mdp, &random_policy(&mut rng, 4, 3)).unwrap();
        let d = occupancy_from_policy(&mdp, &random_policy(&mut rng, 4, 3)).unwrap();
        let h = DualVector::new(Array1::from_shape_fn(4, |_| rng.random::<f64>() * 4.0 - 2.0));
        let exact = exact_lagrangian(&mdp, &d, &h, 0.5);
        let values: Vec<f64> = (0..batches)
            .map(|b| {
                let batch = sample_batch(&mdp, &d_t, 50, seed * 1000 + b).unwrap();
                empirical_lagrangian(&batch, &d, &h, 0.5, &mdp.initial)
            })
            .collect();
        let n = batches as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - exact).abs() <= 3.0 * sd / n.sqrt(), "seed {seed}: {mean} vs {exact} (sd {sd})");
    }
}

#[test]
fn exact_expectation_saddle_is_certified_by_its_gap() {
    // Strong concavity in d turns the duality gap into a distance bound.
    for seed in 0..5u64 {
        let mdp = random_mdp(3, 2, 0.9, seed);
        let target = solve_regularized(&mdp, 1.0, SolveMode::Saddle).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_t = occupancy_from_policy(&mdp, &random_policy(&mut rng, 3, 2)).unwrap();
        let stats = SampleStatistics::exact(&mdp, &d_t);
        let result = alternating_optimize(&stats, 1.0, 10.0, 5000, &mdp.initial).unwrap();
        assert!(result.gap > 0.0);
        let radius = (2.0 * result.gap).sqrt();
        assert!(result.d.distance(&target.d) <= radius, "seed {seed}");
    }
}

#[test]
fn exact_expectation_run_tracks_repeated_optimization() {
    for seed in 0..3u64 {
        let model = certified_response(3, 2, 0.9, 0.01, 0.0, seed).unwrap();
        let d0 = default_initial_occupancy(model.as_ref()).unwrap();
        let exact = rpo_run(model.as_ref(), d0.clone(), 1.0, 5, 0.0).unwrap();
        let errors: Vec<f64> = [2_000, 20_000]
            .iter()
            .map(|&rounds| {
                let run =
                    finite_sample_rpo_run(model.as_ref(), d0.clone(), 1.0, 2.0, None, rounds, 5, 0, None)
                        .unwrap();
                run.last().distance(exact.last()) / exact.last().norm()
            })
            .collect();
        // FTRL error decays like N^{-1/2}: ten times the rounds, about √10 smaller.
        assert!(errors[1] <= 0.05, "seed {seed}: {errors:?}");
        assert!(errors[0] / errors[1] >= 2.5, "seed {seed}: {errors:?}");
    }
}
