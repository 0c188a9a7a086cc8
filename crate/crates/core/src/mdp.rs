//! Tabular MDP primitives: validation, occupancy/policy conversion, exact
//! policy evaluation, Bellman-flow feasibility and unregularized planning.

use std::fmt;
use std::ops::Deref;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::linalg;

/// Tolerance for probability rows and the initial distribution.
pub const PROB_TOL: f64 = 1e-9;
/// Row mass at or below this is treated as an unvisited state by
/// [`policy_from_occupancy`].
pub const ROW_ZERO_TOL: f64 = 1e-12;
/// Occupancy entries may dip this far below zero before being reported.
pub const TOL_NEG: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("invalid MDP: {0}")]
    Invalid(ValidationReport),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("linear system is singular: {0}")]
    Singular(&'static str),
}

/// A fixed snapshot `(P, r, γ, ρ)` of the environment.
///
/// `transitions[[s, a, s']]` is the probability of moving to `s'` after
/// playing `a` in `s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabularMdp {
    pub transitions: Array3<f64>,
    pub rewards: Array2<f64>,
    pub discount: f64,
    pub initial: Array1<f64>,
}

impl TabularMdp {
    /// Builds an MDP and rejects it unless [`validate_mdp`] comes back clean.
    pub fn new(
        transitions: Array3<f64>,
        rewards: Array2<f64>,
        discount: f64,
        initial: Array1<f64>,
    ) -> Result<Self, MdpError> {
        let mdp = Self {
            transitions,
            rewards,
            discount,
            initial,
        };
        let report = validate_mdp(&mdp);
        if report.is_valid() {
            Ok(mdp)
        } else {
            Err(MdpError::Invalid(report))
        }
    }

    pub fn num_states(&self) -> usize {
        self.transitions.dim().0
    }

    pub fn num_actions(&self) -> usize {
        self.transitions.dim().1
    }

    pub fn with_rewards(&self, rewards: Array2<f64>) -> Self {
        Self {
            rewards,
            ..self.clone()
        }
    }

    pub fn with_transitions(&self, transitions: Array3<f64>) -> Self {
        Self {
            transitions,
            ..self.clone()
        }
    }

    /// `(1 − γ)⁻¹`, the total mass of every feasible occupancy measure.
    pub fn horizon(&self) -> f64 {
        1.0 / (1.0 - self.discount)
    }

    /// State-to-state chain `P_π(s, s') = Σ_a π(a|s) P(s, a, s')`.
    pub fn state_chain(&self, policy: &Policy) -> Array2<f64> {
        let (ns, na, _) = self.transitions.dim();
        let mut chain = Array2::zeros((ns, ns));
        for s in 0..ns {
            for a in 0..na {
                let p = policy[[s, a]];
                if p == 0.0 {
                    continue;
                }
                for next in 0..ns {
                    chain[[s, next]] += p * self.transitions[[s, a, next]];
                }
            }
        }
        chain
    }

    /// `r(s,a) + γ Σ_{s'} P(s,a,s') v(s')`.
    pub fn q_from_values(&self, values: &Array1<f64>) -> Array2<f64> {
        let (ns, na, _) = self.transitions.dim();
        Array2::from_shape_fn((ns, na), |(s, a)| {
            let future: f64 = (0..ns)
                .map(|next| self.transitions[[s, a, next]] * values[next])
                .sum();
            self.rewards[[s, a]] + self.discount * future
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    Shape { what: &'static str, detail: String },
    NonFinite { what: &'static str },
    NegativeTransition { state: usize, action: usize, next: usize, value: f64 },
    TransitionRowSum { state: usize, action: usize, sum: f64 },
    NegativeInitial { state: usize, value: f64 },
    InitialSum { sum: f64 },
    DiscountRange { discount: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape { what, detail } => write!(f, "{what} has wrong shape: {detail}"),
            Self::NonFinite { what } => write!(f, "{what} contains non-finite entries"),
            Self::NegativeTransition { state, action, next, value } => {
                write!(f, "P({state},{action},{next}) = {value} is negative")
            }
            Self::TransitionRowSum { state, action, sum } => write!(
                f,
                "P({state},{action},·) sums to {sum} (off by {:.3e})",
                (sum - 1.0).abs()
            ),
            Self::NegativeInitial { state, value } => {
                write!(f, "rho({state}) = {value} is negative")
            }
            Self::InitialSum { sum } => {
                write!(f, "rho sums to {sum} (off by {:.3e})", (sum - 1.0).abs())
            }
            Self::DiscountRange { discount } => {
                write!(f, "discount {discount} is outside (0, 1)")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

pub fn validate_mdp(mdp: &TabularMdp) -> ValidationReport {
    let mut violations = Vec::new();
    let (ns, na, ns2) = mdp.transitions.dim();
    if ns == 0 || na == 0 || ns != ns2 {
        violations.push(Violation::Shape {
            what: "transitions",
            detail: format!("{ns}x{na}x{ns2}"),
        });
    }
    if mdp.rewards.dim() != (ns, na) {
        violations.push(Violation::Shape {
            what: "rewards",
            detail: format!("{:?}, expected ({ns}, {na})", mdp.rewards.dim()),
        });
    }
    if mdp.initial.len() != ns {
        violations.push(Violation::Shape {
            what: "initial distribution",
            detail: format!("length {}, expected {ns}", mdp.initial.len()),
        });
    }
    if !(mdp.discount > 0.0 && mdp.discount < 1.0) {
        violations.push(Violation::DiscountRange {
            discount: mdp.discount,
        });
    }
    if !violations.iter().all(|v| matches!(v, Violation::DiscountRange { .. })) {
        return ValidationReport { violations };
    }
    if mdp.rewards.iter().any(|r| !r.is_finite()) {
        violations.push(Violation::NonFinite { what: "rewards" });
    }
    if mdp.transitions.iter().any(|p| !p.is_finite()) {
        violations.push(Violation::NonFinite { what: "transitions" });
        return ValidationReport { violations };
    }
    for s in 0..ns {
        for a in 0..na {
            let mut sum = 0.0;
            for next in 0..ns {
                let p = mdp.transitions[[s, a, next]];
                if p < 0.0 {
                    violations.push(Violation::NegativeTransition {
                        state: s,
                        action: a,
                        next,
                        value: p,
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_TOL {
                violations.push(Violation::TransitionRowSum {
                    state: s,
                    action: a,
                    sum,
                });
            }
        }
    }
    let mut total = 0.0;
    for (s, &p) in mdp.initial.iter().enumerate() {
        if p < 0.0 {
            violations.push(Violation::NegativeInitial { state: s, value: p });
        }
        total += p;
    }
    if !total.is_finite() || (total - 1.0).abs() > PROB_TOL {
        violations.push(Violation::InitialSum { sum: total });
    }
    ValidationReport { violations }
}

/// Row-stochastic `S×A` array of action probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Policy(Array2<f64>);

impl Policy {
    pub fn new(probs: Array2<f64>) -> Result<Self, MdpError> {
        for (s, row) in probs.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(MdpError::InvalidPolicy(format!(
                    "row {s} has a negative or non-finite entry"
                )));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(MdpError::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self(probs))
    }

    /// Wraps `probs` without checking row sums. Callers guarantee stochasticity.
    pub(crate) fn from_rows_unchecked(probs: Array2<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self(Array2::from_elem(
            (num_states, num_actions),
            1.0 / num_actions as f64,
        ))
    }

    /// Deterministic policy playing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), num_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        Self(probs)
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// `(1 − w)·self + w·other`.
    pub fn mix(&self, other: &Policy, weight: f64) -> Policy {
        Self(&self.0 * (1.0 - weight) + &other.0 * weight)
    }
}

impl Deref for Policy {
    type Target = Array2<f64>;
    fn deref(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Discounted state-action visitation mass `d(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancyMeasure(Array2<f64>);

impl OccupancyMeasure {
    pub fn new(values: Array2<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self(Array2::zeros((num_states, num_actions)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn total_mass(&self) -> f64 {
        self.0.sum()
    }

    pub fn min_entry(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn norm(&self) -> f64 {
        linalg::l2_norm(self.0.iter())
    }

    pub fn distance(&self, other: &OccupancyMeasure) -> f64 {
        linalg::l2_distance(&self.0, &other.0)
    }

    /// Entrywise `max(d, 0)`.
    pub fn clamped(&self) -> OccupancyMeasure {
        Self(self.0.mapv(|v| v.max(0.0)))
    }

    /// `Σ_{s,a} d(s,a) r(s,a)`.
    pub fn dot(&self, rewards: &Array2<f64>) -> f64 {
        self.0.iter().zip(rewards.iter()).map(|(d, r)| d * r).sum()
    }
}

impl Deref for OccupancyMeasure {
    type Target = Array2<f64>;
    fn deref(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Flow-constraint multipliers `h ∈ R^S`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualVector(Array1<f64>);

impl DualVector {
    pub fn new(values: Array1<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(num_states: usize) -> Self {
        Self(Array1::zeros(num_states))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        linalg::l2_norm(self.0.iter())
    }
}

impl Deref for DualVector {
    type Target = Array1<f64>;
    fn deref(&self) -> &Array1<f64> {
        &self.0
    }
}

/// `π^d`: normalizes each row of `max(d, 0)`; rows with mass at most
/// [`ROW_ZERO_TOL`] become uniform.
pub fn policy_from_occupancy(d: &OccupancyMeasure) -> Policy {
    let (ns, na) = d.dim();
    let mut probs = Array2::zeros((ns, na));
    for s in 0..ns {
        let row_sum: f64 = (0..na).map(|a| d[[s, a]].max(0.0)).sum();
        for a in 0..na {
            probs[[s, a]] = if row_sum > ROW_ZERO_TOL {
                d[[s, a]].max(0.0) / row_sum
            } else {
                1.0 / na as f64
            };
        }
    }
    Policy(probs)
}

fn check_policy_shape(mdp: &TabularMdp, policy: &Policy) -> Result<(), MdpError> {
    let expected = (mdp.num_states(), mdp.num_actions());
    if policy.dim() != expected {
        return Err(MdpError::Shape(format!(
            "policy is {:?}, MDP expects {expected:?}",
            policy.dim()
        )));
    }
    Ok(())
}

/// State visitation `μ = ρ + γ P_πᵀ μ` spread over actions by `π`.
pub fn occupancy_from_policy(
    mdp: &TabularMdp,
    policy: &Policy,
) -> Result<OccupancyMeasure, MdpError> {
    check_policy_shape(mdp, policy)?;
    let ns = mdp.num_states();
    let chain = mdp.state_chain(policy);
    let system = Array2::from_shape_fn((ns, ns), |(i, j)| {
        let identity = if i == j { 1.0 } else { 0.0 };
        identity - mdp.discount * chain[[j, i]]
    });
    let visitation = linalg::solve_general(&system, &mdp.initial)
        .ok_or(MdpError::Singular("I - γ P_πᵀ"))?;
    let d = Array2::from_shape_fn(policy.dim(), |(s, a)| policy[[s, a]] * visitation[s]);
    Ok(OccupancyMeasure(d))
}

/// Per-state flow residual `Σ_a d(s,a) − ρ(s) − γ Σ_{s',a} d(s',a) P(s',a,s)`.
pub fn flow_residual(
    d: &Array2<f64>,
    transitions: &Array3<f64>,
    initial: &Array1<f64>,
    discount: f64,
) -> Array1<f64> {
    let (ns, na, _) = transitions.dim();
    let mut residual = Array1::zeros(ns);
    for s in 0..ns {
        residual[s] = (0..na).map(|a| d[[s, a]]).sum::<f64>() - initial[s];
    }
    for prev in 0..ns {
        for a in 0..na {
            let mass = d[[prev, a]];
            if mass == 0.0 {
                continue;
            }
            for s in 0..ns {
                residual[s] -= discount * mass * transitions[[prev, a, s]];
            }
        }
    }
    residual
}

/// Euclidean norm of [`flow_residual`]; zero iff `d` satisfies every flow
/// equality (nonnegativity is not checked here).
pub fn bellman_flow_residual(
    d: &OccupancyMeasure,
    transitions: &Array3<f64>,
    initial: &Array1<f64>,
    discount: f64,
) -> f64 {
    linalg::l2_norm(flow_residual(d, transitions, initial, discount).iter())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueFunction {
    pub values: Array1<f64>,
    pub start_value: f64,
}

/// Exact policy evaluation by solving `V = r_π + γ P_π V`.
pub fn value_function(mdp: &TabularMdp, policy: &Policy) -> Result<ValueFunction, MdpError> {
    check_policy_shape(mdp, policy)?;
    let ns = mdp.num_states();
    let chain = mdp.state_chain(policy);
    let system = Array2::from_shape_fn((ns, ns), |(i, j)| {
        let identity = if i == j { 1.0 } else { 0.0 };
        identity - mdp.discount * chain[[i, j]]
    });
    let expected_reward =
        Array1::from_shape_fn(ns, |s| policy.row(s).dot(&mdp.rewards.row(s)));
    let values = linalg::solve_general(&system, &expected_reward)
        .ok_or(MdpError::Singular("I - γ P_π"))?;
    let start_value = values.dot(&mdp.initial);
    Ok(ValueFunction {
        values,
        start_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalSolution {
    pub policy: Policy,
    pub occupancy: OccupancyMeasure,
    pub value: f64,
}

/// Howard policy iteration with exact evaluation. Ties keep the incumbent
/// action, otherwise the lowest index wins.
pub fn optimal_unregularized(mdp: &TabularMdp) -> Result<OptimalSolution, MdpError> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut actions = vec![0usize; ns];
    // Policy iteration terminates in at most A^S improvements; this cap only
    // guards against floating-point cycling.
    for _ in 0..10_000 {
        let policy = Policy::deterministic(&actions, na);
        let evaluation = value_function(mdp, &policy)?;
        let q = mdp.q_from_values(&evaluation.values);
        let mut changed = false;
        for s in 0..ns {
            let incumbent = q[[s, actions[s]]];
            let (best_a, best_q) = (0..na)
                .map(|a| (a, q[[s, a]]))
                .fold((actions[s], incumbent), |acc, cur| {
                    if cur.1 > acc.1 {
                        cur
                    } else {
                        acc
                    }
                });
            if best_q > incumbent + 1e-12 * (1.0 + incumbent.abs()) {
                actions[s] = best_a;
                changed = true;
            }
        }
        if !changed {
            let occupancy = occupancy_from_policy(mdp, &policy)?;
            return Ok(OptimalSolution {
                policy,
                occupancy,
                value: evaluation.start_value,
            });
        }
    }
    Err(MdpError::Singular("policy iteration failed to stabilize"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn single_state(num_actions: usize, rewards: Vec<f64>, discount: f64) -> TabularMdp {
        TabularMdp::new(
            Array3::ones((1, num_actions, 1)),
            Array2::from_shape_vec((1, num_actions), rewards).unwrap(),
            discount,
            array![1.0],
        )
        .unwrap()
    }

    #[test]
    fn identity_single_state_is_valid() {
        let mdp = single_state(1, vec![0.5], 0.9);
        assert!(validate_mdp(&mdp).is_valid());
    }

    #[test]
    fn row_sum_violation_is_reported_at_its_index() {
        let mut mdp = single_state(2, vec![0.0, 0.0], 0.9);
        mdp.transitions[[0, 1, 0]] = 0.9;
        let report = validate_mdp(&mdp);
        assert_eq!(report.violations.len(), 1);
        match &report.violations[0] {
            Violation::TransitionRowSum { state, action, sum } => {
                assert_eq!((*state, *action), (0, 1));
                assert!((sum - 0.9).abs() < 1e-15);
            }
            other => panic!("unexpected violation {other:?}"),
        }
    }

    #[test]
    fn discount_of_one_is_rejected() {
        let mut mdp = single_state(1, vec![0.0], 0.9);
        mdp.discount = 1.0;
        let report = validate_mdp(&mdp);
        assert!(matches!(
            report.violations.as_slice(),
            [Violation::DiscountRange { .. }]
        ));
    }

    #[test]
    fn policy_from_occupancy_rows() {
        let d = OccupancyMeasure::new(array![[0.3, 0.1], [0.0, 0.0], [-1e-12, 0.4]]);
        let pi = policy_from_occupancy(&d);
        assert!((pi[[0, 0]] - 0.75).abs() < 1e-15);
        assert!((pi[[0, 1]] - 0.25).abs() < 1e-15);
        assert_eq!(pi.row(1).to_vec(), vec![0.5, 0.5]);
        assert_eq!(pi.row(2).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn occupancy_of_single_state_policies() {
        let mdp = single_state(2, vec![0.0, 0.0], 0.9);
        let d = occupancy_from_policy(&mdp, &Policy::deterministic(&[0], 2)).unwrap();
        assert!((d[[0, 0]] - 10.0).abs() < 1e-12 && d[[0, 1]] == 0.0);

        let mdp = single_state(2, vec![0.0, 0.0], 0.5);
        let d = occupancy_from_policy(&mdp, &Policy::uniform(1, 2)).unwrap();
        assert!((d[[0, 0]] - 1.0).abs() < 1e-12 && (d[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn occupancy_of_deterministic_cycle_matches_geometric_series() {
        let mut p = Array3::zeros((2, 1, 2));
        p[[0, 0, 1]] = 1.0;
        p[[1, 0, 0]] = 1.0;
        let mdp = TabularMdp::new(p, Array2::zeros((2, 1)), 0.5, array![1.0, 0.0]).unwrap();
        let d = occupancy_from_policy(&mdp, &Policy::uniform(2, 1)).unwrap();
        // Visits state 0 at even steps, state 1 at odd steps.
        let even: f64 = (0..200).step_by(2).map(|k| 0.5f64.powi(k)).sum();
        let odd: f64 = (1..200).step_by(2).map(|k| 0.5f64.powi(k)).sum();
        assert!((d[[0, 0]] - even).abs() < 1e-12);
        assert!((d[[1, 0]] - odd).abs() < 1e-12);
        assert!((d[[0, 0]] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn flow_residual_edge_cases() {
        let mdp = single_state(2, vec![0.0, 0.0], 0.5);
        let d = occupancy_from_policy(&mdp, &Policy::uniform(1, 2)).unwrap();
        assert!(bellman_flow_residual(&d, &mdp.transitions, &mdp.initial, 0.5) < 1e-12);
        let zero = OccupancyMeasure::zeros(1, 2);
        assert!((bellman_flow_residual(&zero, &mdp.transitions, &mdp.initial, 0.5) - 1.0).abs() < 1e-15);
        let doubled = OccupancyMeasure::new(d.values() * 2.0);
        assert!(
            (bellman_flow_residual(&doubled, &mdp.transitions, &mdp.initial, 0.5) - 1.0).abs()
                < 1e-12
        );
    }

    #[test]
    fn value_function_examples() {
        let mdp = single_state(1, vec![0.5], 0.9);
        let v = value_function(&mdp, &Policy::uniform(1, 1)).unwrap();
        assert!((v.start_value - 5.0).abs() < 1e-12);

        let mdp = single_state(2, vec![0.0, 0.0], 0.7);
        let v = value_function(&mdp, &Policy::uniform(1, 2)).unwrap();
        assert_eq!(v.start_value, 0.0);
    }

    #[test]
    fn optimal_single_state() {
        let mdp = single_state(2, vec![1.0, 0.0], 0.5);
        let opt = optimal_unregularized(&mdp).unwrap();
        assert!((opt.value - 2.0).abs() < 1e-12);
        assert!((opt.occupancy[[0, 0]] - 2.0).abs() < 1e-12);
        assert_eq!(opt.occupancy[[0, 1]], 0.0);

        let flat = single_state(3, vec![0.3, 0.3, 0.3], 0.8);
        let opt = optimal_unregularized(&flat).unwrap();
        assert!((opt.value - 0.3 / 0.2).abs() < 1e-12);
    }
}
