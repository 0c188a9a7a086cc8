//! Policy-dependent environments `d ↦ M(d) = (r_d, P_d)`.
//!
//! Every model is a [`ResponseModel`] trait object so that the retraining
//! loops, the finite-sample learner and the experiment harness can swap
//! environments freely. Tensor distances are entrywise L2 throughout.

use ndarray::{Array2, Array3};
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::mdp::{
    occupancy_from_policy, policy_from_occupancy, MdpError, OccupancyMeasure, Policy, TabularMdp,
};

#[derive(Debug, Error)]
pub enum ResponseError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("planning failed: {0}")]
    Planning(String),
    #[error("performative value did not reach a fixed point after {iterations} iterations (residual {residual:.3e})")]
    FixedPoint { iterations: usize, residual: f64 },
    #[error("sensitivity estimation needs at least one pair with d != d'")]
    NoDistinctProbes,
    #[error("invalid response parameter: {0}")]
    Parameter(String),
}

/// Lipschitz constants `(ε_r, ε_p)` of a response map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sensitivity {
    pub reward: f64,
    pub transition: f64,
}

impl Sensitivity {
    pub const ZERO: Sensitivity = Sensitivity {
        reward: 0.0,
        transition: 0.0,
    };
}

pub trait ResponseModel: Send + Sync {
    fn name(&self) -> &str;

    /// Environment before any deployment; fixes `S`, `A`, `γ` and `ρ`.
    fn base(&self) -> &TabularMdp;

    /// Environment induced by deploying (the policy of) `d`.
    fn respond(&self, d: &OccupancyMeasure) -> Result<TabularMdp, ResponseError>;

    /// Certified `(ε_r, ε_p)`, when the construction guarantees them.
    fn certificate(&self) -> Option<Sensitivity> {
        None
    }
}

/// Model that ignores the deployment.
#[derive(Debug, Clone)]
pub struct ConstantResponse {
    base: TabularMdp,
}

impl ConstantResponse {
    pub fn new(base: TabularMdp) -> Self {
        Self { base }
    }
}

impl ResponseModel for ConstantResponse {
    fn name(&self) -> &str {
        "constant"
    }

    fn base(&self) -> &TabularMdp {
        &self.base
    }

    fn respond(&self, _d: &OccupancyMeasure) -> Result<TabularMdp, ResponseError> {
        Ok(self.base.clone())
    }

    fn certificate(&self) -> Option<Sensitivity> {
        Some(Sensitivity::ZERO)
    }
}

pub const DEFAULT_REWARD_CLIP: (f64, f64) = (-10.0, 10.0);

/// `r_d = clip(r₀ + ε_r (d − d_ref), lo, hi)` with fixed transitions.
#[derive(Debug, Clone)]
pub struct LinearRewardResponse {
    base: TabularMdp,
    epsilon_r: f64,
    reference: Array2<f64>,
    clip: (f64, f64),
}

impl LinearRewardResponse {
    pub fn with_clip(mut self, lo: f64, hi: f64) -> Self {
        self.clip = (lo, hi);
        self
    }

    pub fn epsilon_r(&self) -> f64 {
        self.epsilon_r
    }
}

pub fn make_linear_reward_response(
    base: TabularMdp,
    epsilon_r: f64,
    reference: &OccupancyMeasure,
) -> Result<LinearRewardResponse, ResponseError> {
    if !(epsilon_r >= 0.0) {
        return Err(ResponseError::Parameter(format!(
            "epsilon_r must be nonnegative, got {epsilon_r}"
        )));
    }
    if reference.dim() != base.rewards.dim() {
        return Err(ResponseError::Parameter("reference occupancy has wrong shape".into()));
    }
    Ok(LinearRewardResponse {
        base,
        epsilon_r,
        reference: reference.values().clone(),
        clip: DEFAULT_REWARD_CLIP,
    })
}

impl ResponseModel for LinearRewardResponse {
    fn name(&self) -> &str {
        "linear-reward"
    }

    fn base(&self) -> &TabularMdp {
        &self.base
    }

    fn respond(&self, d: &OccupancyMeasure) -> Result<TabularMdp, ResponseError> {
        let (lo, hi) = self.clip;
        let mut rewards = self.base.rewards.clone();
        ndarray::Zip::from(&mut rewards)
            .and(d.values())
            .and(&self.reference)
            .for_each(|r, &x, &x_ref| {
                *r = (*r + self.epsilon_r * (x - x_ref)).clamp(lo, hi);
            });
        Ok(self.base.with_rewards(rewards))
    }

    fn certificate(&self) -> Option<Sensitivity> {
        Some(Sensitivity {
            reward: self.epsilon_r,
            transition: 0.0,
        })
    }
}

/// `P_d = (1 − α) P₀ + α P_alt` with `α = clamp(ε_p ⟨u, d⟩ / ‖P_alt − P₀‖, 0, 1)`.
#[derive(Debug, Clone)]
pub struct MixtureTransitionResponse {
    base: TabularMdp,
    alternative: Array3<f64>,
    epsilon_p: f64,
    direction: Array2<f64>,
    spread: f64,
}

impl MixtureTransitionResponse {
    pub fn mixing_weight(&self, d: &OccupancyMeasure) -> f64 {
        if self.spread == 0.0 || self.epsilon_p == 0.0 {
            return 0.0;
        }
        let projection: f64 = self
            .direction
            .iter()
            .zip(d.values().iter())
            .map(|(u, x)| u * x)
            .sum();
        (self.epsilon_p * projection / self.spread).clamp(0.0, 1.0)
    }
}

pub fn make_mixture_transition_response(
    base: TabularMdp,
    alternative: Array3<f64>,
    epsilon_p: f64,
    direction: Array2<f64>,
) -> Result<MixtureTransitionResponse, ResponseError> {
    if !(epsilon_p >= 0.0) {
        return Err(ResponseError::Parameter(format!(
            "epsilon_p must be nonnegative, got {epsilon_p}"
        )));
    }
    if alternative.dim() != base.transitions.dim() || direction.dim() != base.rewards.dim() {
        return Err(ResponseError::Parameter("alternative kernel or direction has wrong shape".into()));
    }
    let alt_mdp = base.with_transitions(alternative.clone());
    let report = crate::mdp::validate_mdp(&alt_mdp);
    if !report.is_valid() {
        return Err(ResponseError::Parameter(format!("alternative kernel: {report}")));
    }
    let unit = linalg::l2_norm(direction.iter());
    if (unit - 1.0).abs() > 1e-9 {
        return Err(ResponseError::Parameter(format!(
            "direction must have unit norm, got {unit}"
        )));
    }
    let spread = linalg::l2_norm(
        alternative
            .iter()
            .zip(base.transitions.iter())
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>()
            .iter(),
    );
    Ok(MixtureTransitionResponse {
        base,
        alternative,
        epsilon_p,
        direction,
        spread,
    })
}

impl ResponseModel for MixtureTransitionResponse {
    fn name(&self) -> &str {
        "mixture-transition"
    }

    fn base(&self) -> &TabularMdp {
        &self.base
    }

    fn respond(&self, d: &OccupancyMeasure) -> Result<TabularMdp, ResponseError> {
        let alpha = self.mixing_weight(d);
        if alpha == 0.0 {
            return Ok(self.base.clone());
        }
        let transitions = &self.base.transitions * (1.0 - alpha) + &self.alternative * alpha;
        Ok(self.base.with_transitions(transitions))
    }

    fn certificate(&self) -> Option<Sensitivity> {
        // A degenerate alternative (P_alt = P₀) makes the map constant.
        let transition = if self.spread == 0.0 { 0.0 } else { self.epsilon_p };
        Some(Sensitivity {
            reward: 0.0,
            transition,
        })
    }
}

/// Rewards from one model, transitions from another.
pub struct SplitResponse<R, P> {
    rewards: R,
    transitions: P,
}

impl<R: ResponseModel, P: ResponseModel> SplitResponse<R, P> {
    pub fn new(rewards: R, transitions: P) -> Self {
        Self {
            rewards,
            transitions,
        }
    }
}

impl<R: ResponseModel, P: ResponseModel> ResponseModel for SplitResponse<R, P> {
    fn name(&self) -> &str {
        "split"
    }

    fn base(&self) -> &TabularMdp {
        self.rewards.base()
    }

    fn respond(&self, d: &OccupancyMeasure) -> Result<TabularMdp, ResponseError> {
        let with_rewards = self.rewards.respond(d)?;
        let with_transitions = self.transitions.respond(d)?;
        Ok(with_rewards.with_transitions(with_transitions.transitions))
    }

    fn certificate(&self) -> Option<Sensitivity> {
        let r = self.rewards.certificate()?;
        let p = self.transitions.certificate()?;
        Some(Sensitivity {
            reward: r.reward,
            transition: p.transition,
        })
    }
}

/// One state, two actions `a`, `b`. Deploying a policy that plays `a` with
/// probability `θ` yields `r(a) = 1/2 − εθ`, `r(b) = 1/2 + εθ`.
#[derive(Debug, Clone)]
pub struct SingleStateResponse {
    base: TabularMdp,
    epsilon: f64,
}

impl SingleStateResponse {
    pub fn new(epsilon: f64, discount: f64) -> Result<Self, ResponseError> {
        let base = TabularMdp::new(
            Array3::ones((1, 2, 1)),
            Array2::from_elem((1, 2), 0.5),
            discount,
            ndarray::array![1.0],
        )?;
        Ok(Self { base, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Policy playing `a` with probability `theta`.
    pub fn policy(theta: f64) -> Policy {
        Policy::from_rows_unchecked(ndarray::array![[theta, 1.0 - theta]])
    }
}

impl ResponseModel for SingleStateResponse {
    fn name(&self) -> &str {
        "single-state"
    }

    fn base(&self) -> &TabularMdp {
        &self.base
    }

    fn respond(&self, d: &OccupancyMeasure) -> Result<TabularMdp, ResponseError> {
        let theta = policy_from_occupancy(d)[[0, 0]];
        let rewards = ndarray::array![[0.5 - self.epsilon * theta, 0.5 + self.epsilon * theta]];
        Ok(self.base.with_rewards(rewards))
    }
}

/// Maximum observed ratios `‖r_d − r_d'‖/‖d − d'‖` and `‖P_d − P_d'‖/‖d − d'‖`.
pub fn estimate_sensitivity(
    model: &dyn ResponseModel,
    probes: &[(OccupancyMeasure, OccupancyMeasure)],
) -> Result<Sensitivity, ResponseError> {
    let mut best = Sensitivity::ZERO;
    let mut informative = false;
    for (d, d_prime) in probes {
        let gap = d.distance(d_prime);
        if gap == 0.0 {
            continue;
        }
        informative = true;
        let m = model.respond(d)?;
        let m_prime = model.respond(d_prime)?;
        let dr = linalg::l2_distance(&m.rewards, &m_prime.rewards);
        let dp = m
            .transitions
            .iter()
            .zip(m_prime.transitions.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        best.reward = best.reward.max(dr / gap);
        best.transition = best.transition.max(dp / gap);
    }
    if informative {
        Ok(best)
    } else {
        Err(ResponseError::NoDistinctProbes)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PerformativeValue {
    pub value: f64,
    pub occupancy: OccupancyMeasure,
    pub environment: TabularMdp,
    pub iterations: usize,
}

pub const PERFORMATIVE_TOL: f64 = 1e-10;
pub const PERFORMATIVE_MAX_ITERS: usize = 10_000;

/// `V^π_π(ρ)`: the value of `π` in the environment its own occupancy induces.
///
/// The occupancy is resolved as the fixed point of
/// `d ↦ occupancy_from_policy(respond(d), π)` starting from the base model.
pub fn performative_value(
    model: &dyn ResponseModel,
    policy: &Policy,
) -> Result<PerformativeValue, ResponseError> {
    let mut d = occupancy_from_policy(model.base(), policy)?;
    let mut residual = f64::INFINITY;
    for iteration in 1..=PERFORMATIVE_MAX_ITERS {
        let environment = model.respond(&d)?;
        let next = occupancy_from_policy(&environment, policy)?;
        residual = next.distance(&d);
        d = next;
        if residual <= PERFORMATIVE_TOL {
            // Rewards must be read at the converged occupancy.
            let environment = model.respond(&d)?;
            return Ok(PerformativeValue {
                value: d.dot(&environment.rewards),
                occupancy: d,
                environment,
                iterations: iteration,
            });
        }
    }
    Err(ResponseError::FixedPoint {
        iterations: PERFORMATIVE_MAX_ITERS,
        residual,
    })
}
