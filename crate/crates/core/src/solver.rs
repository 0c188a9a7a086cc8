//! Regularized occupancy optimization `max r·d − (λ/2)‖d‖²` over the flow
//! polytope, Euclidean projection onto it, and checks of the dual-side lemmas.
//!
//! Both problems reduce to an `S×S` symmetric positive definite system
//! `B h = b` in the flow multipliers; the primal is recovered as
//! `d(s,a) = (r(s,a) − h(s) + γ Σ_s̃ P(s,a,s̃) h(s̃)) / λ`.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::mdp::{flow_residual, DualVector, MdpError, OccupancyMeasure, TabularMdp};

/// Equality-dual primals more negative than this trigger the saddle fallback.
pub const NEG_THRESHOLD: f64 = 1e-8;
/// Duality gap at which the saddle solver stops, relative to `max(1, |g(h)|)`.
pub const SADDLE_GAP_TOL: f64 = 1e-7;
/// Flow residual the saddle solver must also reach.
pub const SADDLE_RESIDUAL_TOL: f64 = 1e-9;
/// Proximal-point rounds of the saddle solver.
pub const SADDLE_MAX_ROUNDS: usize = 60;
const NEWTON_PER_ROUND: usize = 30;
const PROX_INITIAL: f64 = 1e2;
const PROX_GROWTH: f64 = 10.0;
const PROX_MAX: f64 = 1e8;
const POLISH_THRESHOLD: f64 = 1e-5;
/// Occupancy below which a clamped pair counts as sitting on the kink.
const KINK_MARGIN: f64 = 1e-8;
/// Longest ray step, in units of `h`, tried when a round stalls.
const RAY_MAX_LENGTH: f64 = 1e6;
const RAY_BISECTIONS: usize = 60;
/// Relative slack on the proximal objective for steps accepted on residual.
const FLAT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("regularization must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("step size must be nonnegative and finite, got {0}")]
    InvalidStep(f64),
    #[error("dual system is singular")]
    Singular,
    #[error("saddle solver stopped after {iterations} iterations with gap {gap:.3e} and residual {residual:.3e}")]
    SaddleNotConverged {
        iterations: usize,
        gap: f64,
        residual: f64,
    },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualSystemKind {
    RegularizedSolve,
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualSystem {
    pub matrix: Array2<f64>,
    pub rhs: Array1<f64>,
    pub lambda: f64,
    pub kind: DualSystemKind,
}

impl DualSystem {
    pub fn solve(&self) -> Result<DualVector, SolverError> {
        linalg::solve(&self.matrix, &self.rhs)
            .map(DualVector::new)
            .ok_or(SolverError::Singular)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue_symmetric(&self.matrix)
    }

    /// Largest `|B(i,j) − B(j,i)|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.matrix.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.matrix[[i, j]] - self.matrix[[j, i]]).abs());
            }
        }
        worst
    }
}

/// `A·I − γ Σ_a (M_a + M_aᵀ) + γ² Σ_a M_aᵀ M_a` with `M_a(s, s') = P(s, a, s')`.
pub fn flow_gram(transitions: &Array3<f64>, discount: f64) -> Array2<f64> {
    let (ns, na, _) = transitions.dim();
    let mut gram = Array2::<f64>::eye(ns) * na as f64;
    for a in 0..na {
        let m = transitions.index_axis(Axis(1), a);
        gram = gram - (&m + &m.t()) * discount + m.t().dot(&m) * (discount * discount);
    }
    gram
}

/// `Σ_a v(s,a) − γ Σ_{s',a} v(s',a) P(s',a,s)`, the flow map without `ρ`.
fn flow_map(v: &Array2<f64>, transitions: &Array3<f64>, discount: f64) -> Array1<f64> {
    let zero = Array1::zeros(transitions.dim().0);
    flow_residual(v, transitions, &zero, discount)
}

fn check_lambda(lambda: f64) -> Result<(), SolverError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(SolverError::InvalidLambda(lambda))
    }
}

pub fn build_dual_system(mdp: &TabularMdp, lambda: f64) -> Result<DualSystem, SolverError> {
    check_lambda(lambda)?;
    let matrix = flow_gram(&mdp.transitions, mdp.discount) / lambda;
    let rhs = flow_map(&mdp.rewards, &mdp.transitions, mdp.discount) / lambda - &mdp.initial;
    Ok(DualSystem {
        matrix,
        rhs,
        lambda,
        kind: DualSystemKind::RegularizedSolve,
    })
}

/// Dual system of `min ½‖d − v‖²` over the flow equalities.
pub fn build_projection_system(v: &Array2<f64>, mdp: &TabularMdp) -> DualSystem {
    DualSystem {
        matrix: flow_gram(&mdp.transitions, mdp.discount),
        rhs: flow_residual(v, &mdp.transitions, &mdp.initial, mdp.discount),
        lambda: 1.0,
        kind: DualSystemKind::Projection,
    }
}

/// `c(s,a) = base(s,a) − h(s) + γ Σ_s̃ P(s,a,s̃) h(s̃)`.
fn reduced_values(base: &Array2<f64>, h: &Array1<f64>, mdp: &TabularMdp) -> Array2<f64> {
    let (ns, na, _) = mdp.transitions.dim();
    Array2::from_shape_fn((ns, na), |(s, a)| {
        let future: f64 = (0..ns).map(|next| mdp.transitions[[s, a, next]] * h[next]).sum();
        base[[s, a]] - h[s] + mdp.discount * future
    })
}

/// `Σ d·r − (λ/2)‖d‖²`.
pub fn objective(d: &OccupancyMeasure, rewards: &Array2<f64>, lambda: f64) -> f64 {
    d.dot(rewards) - 0.5 * lambda * d.norm().powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    /// Solve `B h = b` and recover the primal; nonnegativity is not enforced.
    EqualityDual,
    /// Box-constrained saddle point; the primal is nonnegative.
    Saddle,
    /// Equality dual, falling back to the saddle solver when the primal dips
    /// below `−NEG_THRESHOLD`.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    pub d: OccupancyMeasure,
    pub h: DualVector,
    /// Most negative primal entry before any clamping.
    pub min_entry: f64,
    pub objective: f64,
    pub mode: SolveMode,
}

pub fn solve_regularized(
    mdp: &TabularMdp,
    lambda: f64,
    mode: SolveMode,
) -> Result<SolveResult, SolverError> {
    let system = build_dual_system(mdp, lambda)?;
    let h = system.solve()?;
    let d = reduced_values(&mdp.rewards, &h, mdp) / lambda;
    let d = OccupancyMeasure::new(d);
    let min_entry = d.min_entry();
    match mode {
        SolveMode::EqualityDual => Ok(equality_result(d, h, mdp, lambda)),
        SolveMode::Auto if min_entry >= -NEG_THRESHOLD => Ok(equality_result(d, h, mdp, lambda)),
        SolveMode::Auto | SolveMode::Saddle => saddle_solve(mdp, lambda, h.into_inner()),
    }
}

fn equality_result(d: OccupancyMeasure, h: DualVector, mdp: &TabularMdp, lambda: f64) -> SolveResult {
    SolveResult {
        min_entry: d.min_entry(),
        objective: objective(&d, &mdp.rewards, lambda),
        d,
        h,
        mode: SolveMode::EqualityDual,
    }
}

/// Minimizes the box-constrained dual
/// `g(h) = hᵀρ + Σ_{s,a} max_{0 ≤ x ≤ 1/(1−γ)} (c(s,a) x − (λ/2) x²)`.
/// `g` is convex and piecewise quadratic; its gradient is minus the flow
/// residual of the clamped best response, so the duality gap at `h` is
/// `|hᵀ∇g(h)|`.
///
/// Plain semismooth Newton stalls where the generalized Hessian is singular
/// (states whose pairs are all clamped), so each round minimizes the proximal
/// subproblem `g(h) + ‖h − h_k‖²/(2σ)` by semismooth Newton and `σ` grows
/// geometrically.
fn saddle_solve(mdp: &TabularMdp, lambda: f64, warm: Array1<f64>) -> Result<SolveResult, SolverError> {
    let ns = mdp.num_states();
    let upper = mdp.horizon();
    let gamma = mdp.discount;

    let evaluate = |h: &Array1<f64>| {
        let c = reduced_values(&mdp.rewards, h, mdp);
        let x = c.mapv(|v| (v / lambda).clamp(0.0, upper));
        let value = h.dot(&mdp.initial)
            + c.iter()
                .zip(x.iter())
                .map(|(c, x)| c * x - 0.5 * lambda * x * x)
                .sum::<f64>();
        let grad = -flow_residual(&x, &mdp.transitions, &mdp.initial, gamma);
        (value, grad, c, x)
    };

    // Lipschitz constant of ∇g: the all-active generalized Hessian.
    let smoothness = linalg::max_eigenvalue_symmetric(&flow_gram(&mdp.transitions, gamma)) / lambda;
    let mut h = warm;
    let mut sigma = PROX_INITIAL;
    let mut newton_steps = 0;
    let mut previous_residual = f64::INFINITY;
    for round in 0..=SADDLE_MAX_ROUNDS {
        let (value, grad, _, x) = evaluate(&h);
        let residual = linalg::l2_norm(grad.iter());
        let gap = h.dot(&grad).abs();
        if gap <= SADDLE_GAP_TOL * value.abs().max(1.0) && residual <= SADDLE_RESIDUAL_TOL {
            let d = OccupancyMeasure::new(x);
            return Ok(SolveResult {
                min_entry: d.min_entry(),
                objective: objective(&d, &mdp.rewards, lambda),
                d,
                h: DualVector::new(h),
                mode: SolveMode::Saddle,
            });
        }
        if round == SADDLE_MAX_ROUNDS {
            return Err(SolverError::SaddleNotConverged {
                iterations: newton_steps,
                gap,
                residual,
            });
        }

        // A stalled round usually means `g` is linear along `−∇g` up to a
        // distant kink, which proximal steps only approach by `σ‖∇g‖` per round.
        // The jump may raise the residual while the rest of `h` catches up, so
        // it is judged by `g` and never taken twice in a row.
        if residual > 0.5 * previous_residual {
            if let Some(z) = ray_minimize(&evaluate, &h, &(-&grad)) {
                if evaluate(&z).0 < value {
                    previous_residual = f64::INFINITY;
                    h = z;
                    continue;
                }
            }
        }
        previous_residual = residual;

        // Near the solution the current piece is usually the final one; a
        // minimum-norm Newton step on it then finishes without proximal damping.
        if residual <= POLISH_THRESHOLD {
            let c = reduced_values(&mdp.rewards, &h, mdp);
            let polished = [0.0, KINK_MARGIN]
                .iter()
                .map(|&margin| {
                    let hessian = generalized_hessian(mdp, &c, lambda, margin);
                    let z = &h - &linalg::pinv_solve_symmetric(&hessian, &grad, 1e-12);
                    let norm = linalg::l2_norm(evaluate(&z).1.iter());
                    (z, norm)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("two candidate steps");
            if polished.1 < 0.5 * residual {
                h = polished.0;
                continue;
            }
        }

        let anchor = h.clone();
        let proximal = |value: f64, z: &Array1<f64>| {
            value + (z - &anchor).mapv(|v| v * v).sum() / (2.0 * sigma)
        };
        let tolerance = (1e-3 * residual).max(1e-12);
        for _ in 0..NEWTON_PER_ROUND {
            let (value, grad, c, _) = evaluate(&h);
            let field = &grad + &((&h - &anchor) / sigma);
            let field_norm = linalg::l2_norm(field.iter());
            if field_norm <= tolerance {
                break;
            }
            newton_steps += 1;
            let start = proximal(value, &h);
            // Strict active set and, for degenerate kinks, one that also
            // counts pairs sitting on the kink as active.
            let directions: Vec<Array1<f64>> = [0.0, KINK_MARGIN]
                .iter()
                .map(|&margin| {
                    let mut hessian = generalized_hessian(mdp, &c, lambda, margin);
                    for i in 0..ns {
                        hessian[[i, i]] += 1.0 / sigma;
                    }
                    linalg::solve(&hessian, &(-&field)).unwrap_or_else(|| -&field)
                })
                .collect();
            let field_at = |z: &Array1<f64>| {
                let grad = evaluate(z).1;
                linalg::l2_norm((&grad + &((z - &anchor) / sigma)).iter())
            };
            let flat = start + FLAT_TOL * (1.0 + start.abs());
            let best_full = directions
                .iter()
                .map(|d| &h + d)
                .filter(|z| proximal(evaluate(z).0, z) <= flat)
                .map(|z| {
                    let norm = field_at(&z);
                    (z, norm)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((z, norm)) = best_full {
                if norm <= 0.5 * field_norm {
                    h = z;
                    continue;
                }
            }
            let mut moved = false;
            for direction in &directions {
                if let Some(next) = newton_line_search(&evaluate, &proximal, &h, &anchor, sigma, direction, &field, field_norm, start) {
                    h = next;
                    moved = true;
                    break;
                }
            }
            if !moved {
                // Fall back to a gradient step, which descends for any
                // `L`-smooth subproblem.
                h = &h - &(&field / (smoothness + 1.0 / sigma));
            }
        }
        sigma = (sigma * PROX_GROWTH).min(PROX_MAX);
    }
    unreachable!("the final round either converges or errors")
}

/// Exact minimization of the convex `g` along `h + t p`, `t > 0`: the slope
/// `∇g(h + t p)·p` is nondecreasing, so double `t` to bracket its sign change
/// and bisect. `None` when `p` is not a descent direction or no bracket exists.
fn ray_minimize<E>(evaluate: &E, h: &Array1<f64>, p: &Array1<f64>) -> Option<Array1<f64>>
where
    E: Fn(&Array1<f64>) -> (f64, Array1<f64>, Array2<f64>, Array2<f64>),
{
    let slope = |t: f64| evaluate(&(h + &(p * t))).1.dot(p);
    if slope(0.0) >= 0.0 {
        return None;
    }
    let norm = linalg::l2_norm(p.iter());
    let (mut lo, mut hi) = (0.0, 1.0 / norm);
    while slope(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi * norm > RAY_MAX_LENGTH {
            return None;
        }
    }
    for _ in 0..RAY_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(h + &(p * hi))
}

/// Backtracking until the subproblem objective or, once that is flat to
/// round-off, the residual norm decreases. `None` when no step survives.
#[allow(clippy::too_many_arguments)]
fn newton_line_search<E, Q>(
    evaluate: &E,
    proximal: &Q,
    h: &Array1<f64>,
    anchor: &Array1<f64>,
    sigma: f64,
    direction: &Array1<f64>,
    field: &Array1<f64>,
    field_norm: f64,
    start: f64,
) -> Option<Array1<f64>>
where
    E: Fn(&Array1<f64>) -> (f64, Array1<f64>, Array2<f64>, Array2<f64>),
    Q: Fn(f64, &Array1<f64>) -> f64,
{
    let field_at = |z: &Array1<f64>, grad: &Array1<f64>| {
        linalg::l2_norm((grad + &((z - anchor) / sigma)).iter())
    };
    let slope = direction.dot(field);
    let mut step = 1.0;
    let mut z = h + direction;
    let (mut value, mut grad, _, _) = evaluate(&z);
    loop {
        let decrease = proximal(value, &z) <= start + 1e-4 * step * slope;
        let flat = proximal(value, &z) <= start + FLAT_TOL * (1.0 + start.abs());
        let smaller = flat && field_at(&z, &grad) <= (1.0 - 1e-4 * step) * field_norm;
        if decrease || smaller {
            return Some(z);
        }
        step *= 0.5;
        if step < 1e-14 {
            return None;
        }
        z = h + &(direction * step);
        (value, grad, _, _) = evaluate(&z);
    }
}

/// Generalized Hessian `(1/λ) Σ v vᵀ`, `v = −e_s + γ P(s,a,·)`, over pairs
/// strictly inside the box, also counting pairs within `margin` below the
/// lower kink.
fn generalized_hessian(mdp: &TabularMdp, c: &Array2<f64>, lambda: f64, margin: f64) -> Array2<f64> {
    let (ns, na, _) = mdp.transitions.dim();
    let upper = mdp.horizon();
    let mut hessian = Array2::<f64>::zeros((ns, ns));
    let mut v = Array1::<f64>::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let ratio = c[[s, a]] / lambda;
            if !(ratio > -margin && ratio < upper) {
                continue;
            }
            let weight = 1.0 / lambda;
            for next in 0..ns {
                v[next] = mdp.discount * mdp.transitions[[s, a, next]];
            }
            v[s] -= 1.0;
            for i in 0..ns {
                if v[i] == 0.0 {
                    continue;
                }
                let scaled = weight * v[i];
                for j in 0..ns {
                    hessian[[i, j]] += scaled * v[j];
                }
            }
        }
    }
    hessian
}

/// Euclidean projection of `v` onto the flow equalities of `mdp`.
///
/// Nonnegativity is not enforced; `min_entry` reports it. `objective` is
/// `−½‖d − v‖²`.
pub fn project_onto_ct(v: &Array2<f64>, mdp: &TabularMdp) -> Result<SolveResult, SolverError> {
    let h = build_projection_system(v, mdp).solve()?;
    let d = OccupancyMeasure::new(reduced_values(v, &h, mdp));
    let distance = linalg::l2_distance(d.values(), v);
    Ok(SolveResult {
        min_entry: d.min_entry(),
        objective: -0.5 * distance * distance,
        d,
        h,
        mode: SolveMode::EqualityDual,
    })
}

/// Entrywise `max(d, 0)` applied after a projection; `min_entry` keeps the
/// pre-clamp value.
pub fn clamp_projection(mut result: SolveResult) -> SolveResult {
    result.d = result.d.clamped();
    result
}

/// `Proj_{C_t}((1 − ηλ) d_t + η r_t)`.
pub fn gradient_ascent_step(
    d: &OccupancyMeasure,
    mdp: &TabularMdp,
    lambda: f64,
    eta: f64,
) -> Result<SolveResult, SolverError> {
    check_lambda(lambda)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(SolverError::InvalidStep(eta));
    }
    let target = d.values() * (1.0 - eta * lambda) + &mdp.rewards * eta;
    project_onto_ct(&target, mdp)
}

/// Radius `3S/(1−γ)²` of the dual ball.
pub fn dual_norm_bound(num_states: usize, discount: f64) -> f64 {
    3.0 * num_states as f64 / (1.0 - discount).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualNormCheck {
    pub holds: bool,
    pub norm: f64,
    pub bound: f64,
    /// `bound − norm`; negative when violated.
    pub margin: f64,
}

pub fn check_dual_norm(h: &DualVector, num_states: usize, discount: f64) -> DualNormCheck {
    let bound = dual_norm_bound(num_states, discount);
    let norm = h.norm();
    DualNormCheck {
        holds: norm <= bound + 1e-6,
        norm,
        bound,
        margin: bound - norm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenvalueCheck {
    /// `λ_min ≥ A(1−γ)² − 1e-9`.
    pub holds: bool,
    pub lambda_min: f64,
    pub bound: f64,
    /// `A(1−γ)²/S`, which always holds: `‖(I − γM)x‖_∞ ≥ (1−γ)‖x‖_∞` for
    /// row-stochastic `M`.
    pub guaranteed_bound: f64,
}

/// Smallest eigenvalue of [`flow_gram`] against `A(1−γ)²`.
///
/// The flow gram is `Σ_a (I − γM_a)ᵀ(I − γM_a)`. A non-symmetric stochastic
/// `M_a` can have spectral norm above 1, so the `A(1−γ)²` bound fails on
/// kernels such as `M = [[1, 0], [1, 0]]`; `guaranteed_bound` is the
/// provable one.
pub fn check_eigenvalue_lemma(transitions: &Array3<f64>, discount: f64) -> EigenvalueCheck {
    let lambda_min = linalg::min_eigenvalue_symmetric(&flow_gram(transitions, discount));
    let (ns, na, _) = transitions.dim();
    let bound = na as f64 * (1.0 - discount).powi(2);
    EigenvalueCheck {
        holds: lambda_min >= bound - 1e-9,
        lambda_min,
        bound,
        guaranteed_bound: bound / ns as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{bellman_flow_residual, occupancy_from_policy, Policy};
    use crate::synthetic::random_mdp;
    use ndarray::array;

    fn single_state(rewards: Array2<f64>, discount: f64) -> TabularMdp {
        let na = rewards.ncols();
        TabularMdp::new(Array3::ones((1, na, 1)), rewards, discount, array![1.0]).unwrap()
    }

    #[test]
    fn single_state_dual_system_by_hand() {
        let mdp = single_state(array![[1.0, 0.0]], 0.5);
        let system = build_dual_system(&mdp, 1.0).unwrap();
        assert!((system.matrix[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((system.rhs[0] + 0.5).abs() < 1e-15);
        let result = solve_regularized(&mdp, 1.0, SolveMode::EqualityDual).unwrap();
        assert!((result.h[0] + 1.0).abs() < 1e-12);
        assert!((result.d[[0, 0]] - 1.5).abs() < 1e-12);
        assert!((result.d[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_rhs_is_minus_uniform() {
        let mut mdp = random_mdp(4, 2, 0.9, 3);
        mdp.rewards.fill(0.0);
        let system = build_dual_system(&mdp, 2.0).unwrap();
        for v in system.rhs.iter() {
            assert!((v + 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn dual_system_symmetric_and_bounded_below() {
        for seed in 0..20 {
            let mdp = random_mdp(5, 3, 0.9, seed);
            let system = build_dual_system(&mdp, 3.0).unwrap();
            assert!(system.asymmetry() < 1e-12);
            // Provable floor A(1−γ)²/(Sλ).
            assert!(system.min_eigenvalue() >= 3.0 * 0.01 / (5.0 * 3.0) - 1e-12);
        }
    }

    #[test]
    fn equality_solution_is_flow_feasible() {
        let mdp = random_mdp(5, 3, 0.9, 4);
        let r = solve_regularized(&mdp, 2.0, SolveMode::EqualityDual).unwrap();
        assert!(bellman_flow_residual(&r.d, &mdp.transitions, &mdp.initial, 0.9) < 1e-7);
        let expected = r.d.dot(&mdp.rewards) - r.d.norm().powi(2);
        assert!((r.objective - expected).abs() < 1e-8);
    }

    #[test]
    fn saddle_matches_equality_when_nonnegative() {
        for seed in 0..10 {
            let mdp = random_mdp(4, 2, 0.5, seed);
            let eq = solve_regularized(&mdp, 0.5, SolveMode::EqualityDual).unwrap();
            if eq.min_entry < 0.0 {
                continue;
            }
            let sd = solve_regularized(&mdp, 0.5, SolveMode::Saddle).unwrap();
            assert_eq!(sd.mode, SolveMode::Saddle);
            assert!(eq.d.distance(&sd.d) < 1e-5);
        }
    }

    #[test]
    fn auto_mode_returns_nonnegative_measure() {
        // Large reward spread with small λ forces negative equality primals.
        let mut mdp = random_mdp(5, 3, 0.9, 8);
        mdp.rewards.mapv_inplace(|r| 10.0 * r);
        let eq = solve_regularized(&mdp, 0.05, SolveMode::EqualityDual).unwrap();
        assert!(eq.min_entry < -NEG_THRESHOLD);
        let auto = solve_regularized(&mdp, 0.05, SolveMode::Auto).unwrap();
        assert_eq!(auto.mode, SolveMode::Saddle);
        assert!(auto.d.min_entry() >= 0.0);
        assert!(bellman_flow_residual(&auto.d, &mdp.transitions, &mdp.initial, 0.9) < 1e-8);
        assert!(auto.objective <= eq.objective + 1e-9);
    }

    #[test]
    fn large_lambda_approaches_min_norm_point() {
        let mdp = random_mdp(4, 3, 0.9, 5);
        let r = solve_regularized(&mdp, 1e6, SolveMode::EqualityDual).unwrap();
        let min_norm = project_onto_ct(&Array2::zeros((4, 3)), &mdp).unwrap();
        assert!(r.d.distance(&min_norm.d) < 1e-4);
    }

    #[test]
    fn projection_of_feasible_point_is_identity() {
        let mdp = random_mdp(4, 3, 0.9, 6);
        let d = occupancy_from_policy(&mdp, &Policy::uniform(4, 3)).unwrap();
        let p = project_onto_ct(d.values(), &mdp).unwrap();
        assert!(p.d.distance(&d) < 1e-9);
        assert!(p.h.norm() < 1e-9);
    }

    #[test]
    fn projection_of_zero_has_full_mass() {
        let mdp = random_mdp(4, 3, 0.8, 7);
        let p = project_onto_ct(&Array2::zeros((4, 3)), &mdp).unwrap();
        assert!((p.d.total_mass() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn singleton_feasible_set() {
        let mdp = single_state(array![[0.0]], 0.5);
        let p = project_onto_ct(&array![[5.0]], &mdp).unwrap();
        assert!((p.d[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_step_special_cases() {
        let mdp = random_mdp(3, 2, 0.9, 9);
        let d = occupancy_from_policy(&mdp, &Policy::uniform(3, 2)).unwrap();
        let same = gradient_ascent_step(&d, &mdp, 2.0, 0.0).unwrap();
        assert!(same.d.distance(&d) < 1e-9);

        let full = gradient_ascent_step(&d, &mdp, 2.0, 0.5).unwrap();
        let direct = project_onto_ct(&(&mdp.rewards / 2.0), &mdp).unwrap();
        assert!(full.d.distance(&direct.d) < 1e-12);
        // With η = 1/λ the step lands on the regularized optimum of the fixed MDP.
        let opt = solve_regularized(&mdp, 2.0, SolveMode::EqualityDual).unwrap();
        assert!(full.d.distance(&opt.d) < 1e-9);
    }

    #[test]
    fn dual_norm_check_cases() {
        let bound = dual_norm_bound(3, 0.9);
        let zero = check_dual_norm(&DualVector::zeros(3), 3, 0.9);
        assert!(zero.holds && (zero.margin - bound).abs() < 1e-12);
        let big = DualVector::new(array![2.0 * bound, 0.0, 0.0]);
        assert!(!check_dual_norm(&big, 3, 0.9).holds);
    }

    #[test]
    fn eigenvalue_lemma_scalar_and_identity_cases() {
        let check = check_eigenvalue_lemma(&Array3::ones((1, 1, 1)), 0.7);
        assert!((check.lambda_min - 0.09).abs() < 1e-12);

        let mut p = Array3::zeros((3, 2, 3));
        for s in 0..3 {
            for a in 0..2 {
                p[[s, a, s]] = 1.0;
            }
        }
        let check = check_eigenvalue_lemma(&p, 0.9);
        assert!((check.lambda_min - 2.0 * 0.01).abs() < 1e-12);
        assert!(check.holds);
    }

    #[test]
    fn eigenvalue_lemma_fails_on_merging_kernel() {
        let mut p = Array3::zeros((2, 1, 2));
        p[[0, 0, 0]] = 1.0;
        p[[1, 0, 0]] = 1.0;
        let check = check_eigenvalue_lemma(&p, 0.99);
        assert!(!check.holds);
        assert!(check.lambda_min >= check.guaranteed_bound);
    }

    #[test]
    fn invalid_lambda_is_rejected() {
        let mdp = random_mdp(2, 2, 0.9, 1);
        assert!(matches!(
            solve_regularized(&mdp, 0.0, SolveMode::Auto),
            Err(SolverError::InvalidLambda(_))
        ));
    }
}
