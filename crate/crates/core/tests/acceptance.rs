//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when a
//! criterion fails unexpectedly.
//!
//! The eigenvalue lemma behind criterion 3 is false in general. Its verdict
//! follows the random kernels it prescribes; if those violate it, the suite
//! reports FAIL and instead requires the provable floor `A(1−γ)²/S` and the
//! known counterexample to reproduce. The dual norm bound of criterion 4
//! ignores that `‖h‖` scales with `λ`; violations must satisfy the `λ`-aware
//! bound instead.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use perf_rl::experiment::{parse_config, run_experiment, write_outputs};
use perf_rl::finite_sample::{alternating_optimize, sample_batch, ImportanceWeights, SampleStatistics};
use perf_rl::mdp::{occupancy_from_policy, OccupancyMeasure, TabularMdp};
use perf_rl::response::{performative_value, ResponseModel, SingleStateResponse};
use perf_rl::retraining::{
    brute_force_perf_optimal, default_initial_occupancy, reference_stable_point, rga_run,
    run_retraining, stable_gap_unregularized, theorem_constants, RunOptions, StrategyParams,
    StrategyRegistry, TheoremInputs,
};
use perf_rl::solver::{
    check_dual_norm, check_eigenvalue_lemma, gradient_ascent_step, project_onto_ct,
    solve_regularized, SolveMode,
};
use perf_rl::synthetic::{certified_response, random_mdp, random_policy, random_transitions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

const GAMMA: f64 = 0.9;
const DELTA: f64 = 1e-4;

/// `12 S^{3/2}(2ε_r + 5Sε_p)/(1−γ)⁴` for the certified instance.
fn certified_inputs(lambda: f64) -> TheoremInputs {
    TheoremInputs {
        num_states: 3,
        num_actions: 2,
        discount: GAMMA,
        epsilon_r: 0.01,
        epsilon_p: 0.0,
        lambda,
        overlap: 2.0,
        delta: DELTA,
        failure_prob: 0.05,
        beta: 0.25,
        step: 1,
    }
}

fn certified_lambda() -> f64 {
    1.1 * theorem_constants(&certified_inputs(1.0)).unwrap().rpo.lambda_threshold
}

fn certified_model() -> Box<dyn ResponseModel> {
    certified_response(3, 2, GAMMA, 0.01, 0.0, 0).unwrap()
}

fn criterion_1() -> Outcome {
    let eps = 0.2;
    let model = SingleStateResponse::new(eps, GAMMA).unwrap();
    let at_quarter = performative_value(&model, &SingleStateResponse::policy(0.25)).unwrap().value;
    let expected = (0.5 + eps / 8.0) / (1.0 - GAMMA);
    // At θ = 0 both actions earn 1/2, so every policy best-responds: θ = 0 is stable.
    let stable = performative_value(&model, &SingleStateResponse::policy(0.0)).unwrap().value;
    let best = brute_force_perf_optimal(&model, 1e-4).unwrap();
    let theta = best.parameters[0];
    let passed = (at_quarter - expected).abs() <= 1e-9
        && (stable - 0.5 / (1.0 - GAMMA)).abs() <= 1e-9
        && (theta - 0.25).abs() <= 1e-3;
    Outcome::new(
        passed,
        format!("V(1/4) = {at_quarter:.12}, stable value = {stable:.12}, θ* = {theta:.5}"),
    )
}

/// Constraint matrix `A d = ρ` of the Bellman flow, `A ∈ R^{S × SA}`.
fn flow_matrix(mdp: &TabularMdp) -> Array2<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut a = Array2::zeros((ns, ns * na));
    for s in 0..ns {
        for act in 0..na {
            let col = s * na + act;
            a[[s, col]] += 1.0;
            for next in 0..ns {
                a[[next, col]] -= mdp.discount * mdp.transitions[[s, act, next]];
            }
        }
    }
    a
}

/// Projected gradient ascent on `r·d − (λ/2)‖d‖²` over `A d = ρ`, with the
/// projection built independently of the library from `(A Aᵀ)⁻¹`.
fn projected_gradient_oracle(mdp: &TabularMdp, lambda: f64, iterations: usize) -> Array1<f64> {
    let a = flow_matrix(mdp);
    let ns = mdp.num_states();
    let gram = a.dot(&a.t());
    let gram = nalgebra::DMatrix::from_fn(ns, ns, |i, j| gram[[i, j]]);
    let inv = gram.try_inverse().expect("flow constraints have full row rank");
    let inv = Array2::from_shape_fn((ns, ns), |(i, j)| inv[(i, j)]);
    let correction = a.t().dot(&inv);
    let project = |v: &Array1<f64>| v - &correction.dot(&(a.dot(v) - &mdp.initial));
    let r = Array1::from_iter(mdp.rewards.iter().copied());
    let eta = 1e-3 / lambda;
    let mut d = project(&Array1::zeros(r.len()));
    for _ in 0..iterations {
        d = project(&(&d + &((&r - &(&d * lambda)) * eta)));
    }
    d
}

/// Smallest power-of-two `λ ≥ 1` whose equality-dual primal is nonnegative.
fn nonnegative_lambda(mdp: &TabularMdp) -> Option<f64> {
    (0..30)
        .map(|k| 2f64.powi(k))
        .find(|&l| solve_regularized(mdp, l, SolveMode::EqualityDual).is_ok_and(|r| r.min_entry >= 0.0))
}

struct RandomCase {
    mdp: TabularMdp,
    lambda: f64,
}

fn random_cases() -> Vec<RandomCase> {
    let mut cases = Vec::new();
    let mut seed = 0u64;
    while cases.len() < 100 {
        let ns = 1 + (seed % 5) as usize;
        let na = 1 + (seed / 5 % 3) as usize;
        let gamma = if seed.is_multiple_of(2) { 0.5 } else { 0.9 };
        let mdp = random_mdp(ns, na, gamma, 1000 + seed);
        if let Some(lambda) = nonnegative_lambda(&mdp) {
            cases.push(RandomCase { mdp, lambda });
        }
        seed += 1;
    }
    cases
}

fn criterion_2(cases: &[RandomCase]) -> Outcome {
    let mut worst: f64 = 0.0;
    for case in cases {
        let dual = solve_regularized(&case.mdp, case.lambda, SolveMode::EqualityDual).unwrap();
        let oracle = projected_gradient_oracle(&case.mdp, case.lambda, 50_000);
        let gap = dual
            .d
            .values()
            .iter()
            .zip(oracle.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
    }
    Outcome::new(
        worst <= 1e-6,
        format!("{} MDPs, max ‖d_dual − d_oracle‖∞ = {worst:.3e}", cases.len()),
    )
}

fn criterion_3() -> (Outcome, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gammas = [0.5, 0.9, 0.99];
    let mut violations = 0;
    let mut worst_margin = f64::INFINITY;
    let mut floor_holds = true;
    for i in 0..100 {
        let ns = 1 + i % 6;
        let na = 1 + i / 6 % 3;
        let gamma = gammas[i % 3];
        let p = random_transitions(&mut rng, ns, na);
        let check = check_eigenvalue_lemma(&p, gamma);
        if !check.holds {
            violations += 1;
        }
        worst_margin = worst_margin.min(check.lambda_min - check.bound);
        floor_holds &= check.lambda_min >= check.guaranteed_bound - 1e-9;
    }
    // Every state jumps to state 0: M = [[1, 0], [1, 0]].
    let mut counter = Array3::zeros((2, 1, 2));
    counter[[0, 0, 0]] = 1.0;
    counter[[1, 0, 0]] = 1.0;
    let witness = check_eigenvalue_lemma(&counter, 0.99);
    let passed = violations == 0;
    let detail = format!(
        "{violations}/100 random kernels violate λ_min ≥ A(1−γ)², worst margin {worst_margin:.3e}; \
         kernel [[1,0],[1,0]] at γ = 0.99 has λ_min = {:.3e} < {:.3e}; floor A(1−γ)²/S holds: {floor_holds}",
        witness.lambda_min, witness.bound
    );
    // The documented failure mode: the statement breaks, the provable floor does not.
    let as_documented = !witness.holds && floor_holds;
    (Outcome::new(passed, detail), as_documented)
}

/// Returns the outcome and whether every violation is explained by the
/// `λ`-aware bound `(‖r‖₂ + λ‖d‖₂)·√S/(√A(1−γ))`, which follows from
/// `Aᵀh = r − λd` on interior solutions and `λ_min(AAᵀ) ≥ A(1−γ)²/S`.
fn criterion_4(cases: &[RandomCase]) -> (Outcome, bool) {
    let mut checked = 0;
    let mut violations = Vec::new();
    let mut explained = true;
    let mut worst: f64 = 0.0;
    let mut record = |mdp: &TabularMdp, lambda: f64| {
        let result = solve_regularized(mdp, lambda, SolveMode::Auto).unwrap();
        let check = check_dual_norm(&result.h, mdp.num_states(), mdp.discount);
        checked += 1;
        worst = worst.max(check.norm / check.bound);
        if !check.holds {
            let (s, a) = (mdp.num_states() as f64, mdp.num_actions() as f64);
            let r_norm = mdp.rewards.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scaled = (r_norm + lambda * result.d.norm()) * s.sqrt() / (a.sqrt() * (1.0 - mdp.discount));
            explained &= check.norm <= scaled;
            violations.push(format!("S = {s}, λ = {lambda:.1}: ‖h‖ = {:.3e} vs {:.3e}", check.norm, check.bound));
        }
    };
    for case in cases {
        record(&case.mdp, case.lambda);
    }
    let model = certified_model();
    record(model.base(), certified_lambda());
    let detail = format!(
        "{checked} solves, {} violations, max ‖h‖/(3S/(1−γ)²) = {worst:.3}{}",
        violations.len(),
        if violations.is_empty() { String::new() } else { format!(" ({})", violations.join("; ")) }
    );
    (Outcome::new(violations.is_empty(), detail), explained)
}

struct CertifiedRun {
    lambda: f64,
    limit: OccupancyMeasure,
}

fn criterion_5() -> (Outcome, CertifiedRun) {
    let lambda = certified_lambda();
    let constants = theorem_constants(&certified_inputs(lambda)).unwrap();
    let model = certified_model();
    let d0 = default_initial_occupancy(model.as_ref()).unwrap();
    let reference = reference_stable_point(model.as_ref(), d0.clone(), lambda, SolveMode::Auto, 10_000).unwrap();
    let strategy = StrategyRegistry::with_defaults()
        .create("rpo", &StrategyParams::new(lambda))
        .unwrap();
    let options = RunOptions::new(1000, 0.0).with_reference(reference.occupancy.clone());
    let trace = run_retraining(strategy.as_ref(), model.as_ref(), d0, &options).unwrap();

    let distances: Vec<f64> = trace.iterates.iter().map(|d| d.distance(&reference.occupancy)).collect();
    let max_ratio = distances
        .windows(2)
        .filter(|w| w[0] > 1e-8)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    let reached = distances.iter().position(|&x| x <= DELTA);
    let bound = constants.rpo.iteration_bound.unwrap();
    let beta = constants.rpo.beta;
    let passed = reference.converged && max_ratio <= beta + 0.05 && reached.is_some_and(|t| t as f64 <= bound);
    let outcome = Outcome::new(
        passed,
        format!(
            "λ = {lambda:.1}, β = {beta:.4}, max ratio = {max_ratio:.3e}, \
             iterations to δ = {reached:?}, bound = {bound:.1}"
        ),
    );
    (
        outcome,
        CertifiedRun {
            lambda,
            limit: reference.occupancy,
        },
    )
}

fn criterion_6(run: &CertifiedRun) -> Outcome {
    let model = certified_model();
    let lambda = run.lambda;
    let d0 = default_initial_occupancy(model.as_ref()).unwrap();
    let trace = rga_run(model.as_ref(), d0, lambda, 1.0 / lambda, 1000, 1e-14).unwrap();
    let to_limit = trace.last().distance(&run.limit);

    let environment = model.respond(&run.limit).unwrap();
    let moved = gradient_ascent_step(&run.limit, &environment, lambda, 1.0 / lambda)
        .unwrap()
        .d
        .distance(&run.limit);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut identity_err: f64 = 0.0;
    for _ in 0..20 {
        let policy = random_policy(&mut rng, 3, 2);
        let feasible = occupancy_from_policy(&environment, &policy).unwrap();
        let projected = project_onto_ct(feasible.values(), &environment).unwrap();
        identity_err = identity_err.max(projected.d.distance(&feasible));
    }
    let passed = to_limit <= 1e-4 && moved < 1e-6 && identity_err <= 1e-9;
    Outcome::new(
        passed,
        format!(
            "‖d_rga − d_rpo‖ = {to_limit:.3e}, fixed-point move = {moved:.3e}, \
             projection identity error = {identity_err:.3e}"
        ),
    )
}

fn criterion_7() -> Outcome {
    // λ = 1 keeps the iterates away from the uniform limit that very large λ
    // forces, so sampling error is what separates the three sample sizes.
    let lambda = 1.0;
    let model = certified_model();
    let d0 = default_initial_occupancy(model.as_ref()).unwrap();
    let reference = reference_stable_point(model.as_ref(), d0.clone(), lambda, SolveMode::Auto, 10_000).unwrap();
    let mut means = Vec::new();
    for m in [100usize, 1000, 10_000] {
        let mut total = 0.0;
        for seed in 0..10 {
            let params = StrategyParams {
                samples: Some(m),
                saddle_rounds: 2000,
                seed,
                ..StrategyParams::new(lambda)
            };
            let strategy = StrategyRegistry::with_defaults()
                .create("finite-lagrangian", &params)
                .unwrap();
            let options = RunOptions::new(10, 0.0);
            let trace = run_retraining(strategy.as_ref(), model.as_ref(), d0.clone(), &options).unwrap();
            total += trace.last().distance(&reference.occupancy);
        }
        means.push(total / 10.0);
    }
    let monotone = means.windows(2).all(|w| w[1] < w[0]);

    let base = model.base();
    let (n, mut gap_n, mut gap_4n) = (500usize, 0.0, 0.0);
    for seed in 0..10 {
        let batch = sample_batch(base, &d0, 1000, seed).unwrap();
        let stats = SampleStatistics::from_batch(&batch, ImportanceWeights::True).unwrap();
        gap_n += alternating_optimize(&stats, lambda, 2.0, n, &base.initial).unwrap().gap;
        gap_4n += alternating_optimize(&stats, lambda, 2.0, 4 * n, &base.initial).unwrap().gap;
    }
    let shrink = gap_n / gap_4n;
    Outcome::new(
        monotone && shrink >= 1.5,
        format!(
            "mean ‖d_T − d_S‖ for m = 100, 1000, 10000: {:.3e}, {:.3e}, {:.3e}; \
             gap(N = {n}) / gap(4N) = {shrink:.2}",
            means[0], means[1], means[2]
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut worst_fraction: f64 = 0.0;
    for (seed, (eps_r, eps_p)) in [(0.01, 0.0), (0.02, 0.0), (0.005, 0.001), (0.0, 0.002)]
        .into_iter()
        .enumerate()
        .flat_map(|(i, e)| (0..5).map(move |k| (10 * i as u64 + k, e)))
    {
        let model = certified_response(3, 2, GAMMA, eps_r, eps_p, seed).unwrap();
        let mut inputs = certified_inputs(1.0);
        inputs.epsilon_r = eps_r;
        inputs.epsilon_p = eps_p;
        let lambda = 1.1 * theorem_constants(&inputs).unwrap().rpo.lambda_threshold;
        let d0 = default_initial_occupancy(model.as_ref()).unwrap();
        let point = reference_stable_point(model.as_ref(), d0, lambda, SolveMode::Auto, 10_000).unwrap();
        if !point.converged {
            failures.push(format!("seed {seed}: no stable point"));
            continue;
        }
        let gap = stable_gap_unregularized(model.as_ref(), &point.occupancy, lambda).unwrap();
        checked += 1;
        let bound = gap.theory_bound.unwrap();
        worst_fraction = worst_fraction.max(gap.gap / bound);
        if !(gap.within_theory().unwrap() && gap.within_regularization()) {
            failures.push(format!("seed {seed}: gap {:.3e}", gap.gap));
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{checked} stable points, max gap / bound = {worst_fraction:.3e}{}",
            if failures.is_empty() { String::new() } else { format!(", failures: {}", failures.join("; ")) }
        ),
    )
}

const GRID_CONFIG: &str = r#"
[experiment]
kind = "rpo"
seeds = [0]
max_iters = 1000
stop_tol = 1e-12

[environment]
type = "gridworld"
beta_softmax = 10

[parameters]
lambda = 1
discount = 0.9
"#;

fn grid_runs(sweep: &str) -> Vec<perf_rl::retraining::RetrainingTrace> {
    let config = parse_config(&format!("{GRID_CONFIG}\n{sweep}")).unwrap();
    let output = run_experiment(&config, 0).unwrap();
    output
        .families
        .into_iter()
        .map(|f| f.runs.into_iter().next().unwrap().outcome.unwrap().trace)
        .collect()
}

fn criterion_9() -> Outcome {
    let betas = grid_runs("[sweep]\nparameter = \"beta_softmax\"\nvalues = [1, 5, 10, 200]\n");
    let reach: Vec<Option<usize>> = betas[..3].iter().map(|t| t.iterations_to(1e-4)).collect();
    let hard = &betas[3];
    let hard_min = hard
        .records
        .iter()
        .map(|r| r.normalized_step_distance)
        .fold(f64::INFINITY, f64::min);
    let lambdas = grid_runs("[sweep]\nparameter = \"lambda\"\nvalues = [0.5, 1, 2]\n");
    let speed: Vec<Option<usize>> = lambdas.iter().map(|t| t.iterations_to(1e-4)).collect();
    let ordered = speed.iter().all(Option::is_some) && speed.windows(2).all(|w| w[1] <= w[0]);
    let passed = reach.iter().all(Option::is_some)
        && hard.records.len() == 1000
        && hard_min > 1e-2
        && ordered;
    Outcome::new(
        passed,
        format!(
            "iterations to 1e-4 for β = 1, 5, 10: {reach:?}; β = 200 min step over {} iterations = {hard_min:.3e}; \
             β = 10 iterations for λ = 0.5, 1, 2: {speed:?}",
            hard.records.len()
        ),
    )
}

fn criterion_10() -> Outcome {
    let configs = [
        r#"
[experiment]
kind = "finite-lagrangian"
seeds = [0, 1, 2, 3]
max_iters = 5
reference_budget = 100

[environment]
type = "synthetic"
num_states = 3
num_actions = 2
epsilon_r = 0.01
epsilon_p = 0.001

[parameters]
lambda = 1
discount = 0.9
samples = 300
saddle_rounds = 300
sampling = "geometric"
"#,
        r#"
[experiment]
kind = "rga"
seeds = [5, 6]
max_iters = 20
record_gap = true

[environment]
type = "gridworld"
beta_softmax = 5

[parameters]
lambda = 1
eta = 0.5
discount = 0.9

[sweep]
parameter = "perturbation_seed"
values = [1, 2]
"#,
    ];
    let mut identical = true;
    let mut files = 0;
    for text in configs {
        let config = parse_config(text).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let first = write_outputs(&run_experiment(&config, 2).unwrap(), a.path(), true).unwrap();
        let second = write_outputs(&run_experiment(&config, 1).unwrap(), b.path(), true).unwrap();
        for (x, y) in first.iter().zip(&second) {
            files += 1;
            identical &= std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
        }
        identical &= first.len() == second.len();
    }
    Outcome::new(identical, format!("{files} output files compared byte for byte"))
}

fn report(number: usize, outcome: &Outcome, elapsed: Duration) {
    let verdict = if outcome.passed { "PASS" } else { "FAIL" };
    println!(
        "criterion {number:>2}: {verdict} [{:.1} s] {}",
        elapsed.as_secs_f64(),
        outcome.detail
    );
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

/// Reports the criterion, failing it when it exceeds its time budget.
fn check(number: usize, outcome: Outcome, elapsed: Duration, limit: Option<f64>) -> bool {
    let outcome = match limit {
        Some(l) if elapsed.as_secs_f64() > l => {
            Outcome::new(false, format!("{} (over the {l:.0} s budget)", outcome.detail))
        }
        _ => outcome,
    };
    report(number, &outcome, elapsed);
    outcome.passed
}

fn main() {
    // libtest arguments such as `--nocapture` are accepted and ignored.
    let mut unexpected = Vec::new();

    let (o, t) = timed(criterion_1);
    if !check(1, o, t, Some(1.0)) {
        unexpected.push(1);
    }
    let (cases, setup) = timed(random_cases);
    let (o, t) = timed(|| criterion_2(&cases));
    if !check(2, o, t + setup, Some(60.0)) {
        unexpected.push(2);
    }
    let ((o, as_documented), t) = timed(criterion_3);
    let lemma_passed = check(3, o, t, Some(10.0));
    if !lemma_passed && !(as_documented && t.as_secs_f64() < 10.0) {
        unexpected.push(3);
    }
    let ((o, explained), t) = timed(|| criterion_4(&cases));
    let dual_bound_passed = check(4, o, t, None);
    if !dual_bound_passed && !explained {
        unexpected.push(4);
    }
    let ((o, run), t) = timed(criterion_5);
    if !check(5, o, t, Some(30.0)) {
        unexpected.push(5);
    }
    let (o, t) = timed(|| criterion_6(&run));
    if !check(6, o, t, None) {
        unexpected.push(6);
    }
    let (o, t) = timed(criterion_7);
    if !check(7, o, t, Some(300.0)) {
        unexpected.push(7);
    }
    let (o, t) = timed(criterion_8);
    if !check(8, o, t, None) {
        unexpected.push(8);
    }
    let (o, t) = timed(criterion_9);
    if !check(9, o, t, Some(600.0)) {
        unexpected.push(9);
    }
    let (o, t) = timed(criterion_10);
    if !check(10, o, t, None) {
        unexpected.push(10);
    }

    if !lemma_passed && !unexpected.contains(&3) {
        println!("criterion 3 fails as documented: the stated bound is false, the A(1−γ)²/S floor holds");
    }
    if !dual_bound_passed && !unexpected.contains(&4) {
        println!("criterion 4 fails as documented: ‖h‖ grows with λ, every violation meets the λ-aware bound");
    }
    if unexpected.is_empty() {
        println!("acceptance: all criteria behave as documented");
    } else {
        println!("acceptance: unexpected failures in criteria {unexpected:?}");
        std::process::exit(1);
    }
}
