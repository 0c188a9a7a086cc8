//! Sample-based retraining: occupancy sampling, the importance-weighted
//! empirical Lagrangian and its alternating FTRL / best-response saddle solver.
//!
//! Batches are reduced to per-pair sufficient statistics before optimization,
//! so the exact-expectation surrogate (`m = ∞`) runs through the same code.

use ndarray::{Array1, Array2, Array3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::mdp::{
    flow_residual, occupancy_from_policy, policy_from_occupancy, DualVector, MdpError,
    OccupancyMeasure, Policy, TabularMdp, TOL_NEG,
};
use crate::response::ResponseModel;
use crate::retraining::{RetrainingError, RetrainingStrategy, StepOutput, StrategyParams};
use crate::solver::{dual_norm_bound, solve_regularized, SolverError};
use crate::synthetic::derive_seed;

/// Trajectory cap used by trajectory sampling.
pub const MAX_TRAJECTORY_LEN: usize = 100;

#[derive(Debug, Error)]
pub enum FiniteSampleError {
    #[error("occupancy has negative mass {value:.3e} at ({state}, {action})")]
    NegativeMass {
        state: usize,
        action: usize,
        value: f64,
    },
    #[error("occupancy has no positive mass to sample from")]
    EmptySupport,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next: usize,
    /// Estimator weight; 1 for i.i.d. occupancy samples.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleBatch {
    pub tuples: Vec<Transition>,
    /// Normalizer `m` of the estimator (tuples for i.i.d. sampling,
    /// trajectories for fixed-length trajectory sampling).
    pub count: usize,
    /// Occupancy the batch was drawn from; supplies importance weights.
    pub source: OccupancyMeasure,
    pub discount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryMode {
    /// Stop each step with probability `1−γ` and emit the final transition.
    #[default]
    Geometric,
    /// Emit every step of a `len`-step rollout with weight `(1−γ)γ^k`.
    FixedLength(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSource {
    /// `(s, a) ~ (1−γ) d_t` directly.
    #[default]
    Occupancy,
    Trajectories(TrajectoryMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceWeights {
    /// `d_t(s_i, a_i)` from the simulator.
    #[default]
    True,
    /// Empirical frequencies of the batch; also replaces the box anchor.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SampleEstimator {
    pub source: SampleSource,
    pub weights: ImportanceWeights,
    /// Half-width of additive uniform reward noise.
    pub reward_noise: f64,
}

fn sampling_weights(d: &OccupancyMeasure) -> Result<Vec<f64>, FiniteSampleError> {
    let (ns, na) = d.dim();
    let mut weights = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let v = d[[s, a]];
            if v < -TOL_NEG {
                return Err(FiniteSampleError::NegativeMass {
                    state: s,
                    action: a,
                    value: v,
                });
            }
            weights.push(v.max(0.0));
        }
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(FiniteSampleError::EmptySupport);
    }
    Ok(weights)
}

/// Lazily built next-state samplers for each `(s, a)`.
struct Successors<'a> {
    mdp: &'a TabularMdp,
    cache: Vec<Option<WeightedIndex<f64>>>,
}

impl<'a> Successors<'a> {
    fn new(mdp: &'a TabularMdp) -> Self {
        Self {
            mdp,
            cache: vec![None; mdp.num_states() * mdp.num_actions()],
        }
    }

    fn sample<R: Rng>(&mut self, rng: &mut R, s: usize, a: usize) -> usize {
        let key = s * self.mdp.num_actions() + a;
        let mdp = self.mdp;
        let dist = self.cache[key].get_or_insert_with(|| {
            let row: Vec<f64> = (0..mdp.num_states())
                .map(|n| mdp.transitions[[s, a, n]].max(0.0))
                .collect();
            WeightedIndex::new(row).expect("transition rows are stochastic")
        });
        dist.sample(rng)
    }
}

fn noisy_reward<R: Rng>(rng: &mut R, base: f64, noise: f64) -> f64 {
    if noise > 0.0 {
        base + noise * (2.0 * rng.random::<f64>() - 1.0)
    } else {
        base
    }
}

/// Draws `m` i.i.d. tuples with `(s, a) ~ (1−γ) d_t`, `r = r_t(s, a)` and
/// `s' ~ P_t(·|s, a)`.
pub fn sample_batch(
    mdp: &TabularMdp,
    d: &OccupancyMeasure,
    m: usize,
    seed: u64,
) -> Result<SampleBatch, FiniteSampleError> {
    sample_batch_with_noise(mdp, d, m, seed, 0.0)
}

pub fn sample_batch_with_noise(
    mdp: &TabularMdp,
    d: &OccupancyMeasure,
    m: usize,
    seed: u64,
    reward_noise: f64,
) -> Result<SampleBatch, FiniteSampleError> {
    if m == 0 {
        return Err(FiniteSampleError::Parameter("sample count must be at least 1".into()));
    }
    let na = mdp.num_actions();
    let pairs = WeightedIndex::new(sampling_weights(d)?)
        .map_err(|e| FiniteSampleError::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successors = Successors::new(mdp);
    let tuples = (0..m)
        .map(|_| {
            let flat = pairs.sample(&mut rng);
            let (s, a) = (flat / na, flat % na);
            let reward = noisy_reward(&mut rng, mdp.rewards[[s, a]], reward_noise);
            let next = successors.sample(&mut rng, s, a);
            Transition {
                state: s,
                action: a,
                reward,
                next,
                weight: 1.0,
            }
        })
        .collect();
    Ok(SampleBatch {
        tuples,
        count: m,
        source: d.clone(),
        discount: mdp.discount,
    })
}

/// Rolls out `policy` from `ρ`; `source` must be its occupancy in `mdp`.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    policy: &Policy,
    source: &OccupancyMeasure,
    count: usize,
    mode: TrajectoryMode,
    seed: u64,
    reward_noise: f64,
) -> Result<SampleBatch, FiniteSampleError> {
    if count == 0 {
        return Err(FiniteSampleError::Parameter("trajectory count must be at least 1".into()));
    }
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let start = WeightedIndex::new(mdp.initial.iter().map(|p| p.max(0.0)))
        .map_err(|e| FiniteSampleError::Parameter(e.to_string()))?;
    let actions: Vec<WeightedIndex<f64>> = (0..ns)
        .map(|s| WeightedIndex::new((0..na).map(|a| policy[[s, a]])).expect("policy rows are stochastic"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successors = Successors::new(mdp);
    let gamma = mdp.discount;
    let mut tuples = Vec::new();
    for _ in 0..count {
        let mut s = start.sample(&mut rng);
        let len = match mode {
            TrajectoryMode::Geometric => MAX_TRAJECTORY_LEN,
            TrajectoryMode::FixedLength(len) => len,
        };
        for k in 0..len {
            let a = actions[s].sample(&mut rng);
            let reward = noisy_reward(&mut rng, mdp.rewards[[s, a]], reward_noise);
            let next = successors.sample(&mut rng, s, a);
            let transition = Transition {
                state: s,
                action: a,
                reward,
                next,
                weight: 1.0,
            };
            match mode {
                TrajectoryMode::Geometric => {
                    if k + 1 == len || rng.random::<f64>() < 1.0 - gamma {
                        tuples.push(transition);
                        break;
                    }
                }
                TrajectoryMode::FixedLength(_) => tuples.push(Transition {
                    weight: (1.0 - gamma) * gamma.powi(k as i32),
                    ..transition
                }),
            }
            s = next;
        }
    }
    Ok(SampleBatch {
        tuples,
        count,
        source: source.clone(),
        discount: gamma,
    })
}

/// Per-pair sufficient statistics of the empirical Lagrangian.
///
/// With `k(s,a) = 1/(m(1−γ) d_t(s,a))` (zero off the support),
/// `c(s,a) = k(s,a)(R(s,a) − W(s,a) h(s) + γ Σ_{s'} N(s,a,s') h(s'))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleStatistics {
    pub scale: Array2<f64>,
    pub weight: Array2<f64>,
    pub reward: Array2<f64>,
    pub next: Array3<f64>,
    pub discount: f64,
    /// Box anchor `d̂_t`.
    pub anchor: OccupancyMeasure,
}

impl SampleStatistics {
    pub fn from_batch(
        batch: &SampleBatch,
        weights: ImportanceWeights,
    ) -> Result<Self, FiniteSampleError> {
        let (ns, na) = batch.source.dim();
        let mut weight = Array2::zeros((ns, na));
        let mut reward = Array2::zeros((ns, na));
        let mut next = Array3::zeros((ns, na, ns));
        for t in &batch.tuples {
            if t.state >= ns || t.action >= na || t.next >= ns {
                return Err(FiniteSampleError::Parameter(format!(
                    "tuple ({}, {}, {}) out of range",
                    t.state, t.action, t.next
                )));
            }
            weight[[t.state, t.action]] += t.weight;
            reward[[t.state, t.action]] += t.weight * t.reward;
            next[[t.state, t.action, t.next]] += t.weight;
        }
        let m = batch.count as f64;
        let horizon_scale = m * (1.0 - batch.discount);
        let anchor = match weights {
            ImportanceWeights::True => batch.source.clone(),
            ImportanceWeights::Empirical => OccupancyMeasure::new(&weight / horizon_scale),
        };
        let scale = Array2::from_shape_fn((ns, na), |(s, a)| {
            let base = anchor[[s, a]];
            if weight[[s, a]] > 0.0 && base > 0.0 {
                1.0 / (horizon_scale * base)
            } else {
                0.0
            }
        });
        Ok(Self {
            scale,
            weight,
            reward,
            next,
            discount: batch.discount,
            anchor,
        })
    }

    /// Infinite-sample limit: the empirical Lagrangian equals the exact one on
    /// the support of `d_t`.
    pub fn exact(mdp: &TabularMdp, d: &OccupancyMeasure) -> Self {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let mass = d.values().mapv(|v| (1.0 - mdp.discount) * v.max(0.0));
        let next = Array3::from_shape_fn((ns, na, ns), |(s, a, n)| {
            mass[[s, a]] * mdp.transitions[[s, a, n]]
        });
        let scale = Array2::from_shape_fn((ns, na), |(s, a)| {
            if mass[[s, a]] > 0.0 {
                1.0 / mass[[s, a]]
            } else {
                0.0
            }
        });
        Self {
            scale,
            reward: &mass * &mdp.rewards,
            weight: mass,
            next,
            discount: mdp.discount,
            anchor: d.clamped(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.weight.dim()
    }

    /// Importance-weighted `c(s, a)`.
    pub fn coefficients(&self, h: &Array1<f64>) -> Array2<f64> {
        let (ns, na) = self.dims();
        Array2::from_shape_fn((ns, na), |(s, a)| {
            let k = self.scale[[s, a]];
            if k == 0.0 {
                return 0.0;
            }
            let future: f64 = (0..ns).map(|n| self.next[[s, a, n]] * h[n]).sum();
            k * (self.reward[[s, a]] - self.weight[[s, a]] * h[s] + self.discount * future)
        })
    }

    /// `∇_h L̂(d, h) = ρ + Σ_{s,a} d(s,a) k(s,a)(−W(s,a) e_s + γ N(s,a,·))`.
    pub fn dual_gradient(&self, d: &Array2<f64>, initial: &Array1<f64>) -> Array1<f64> {
        let (ns, na) = self.dims();
        let mut grad = initial.clone();
        for s in 0..ns {
            for a in 0..na {
                let w = d[[s, a]] * self.scale[[s, a]];
                if w == 0.0 {
                    continue;
                }
                grad[s] -= w * self.weight[[s, a]];
                for n in 0..ns {
                    grad[n] += w * self.discount * self.next[[s, a, n]];
                }
            }
        }
        grad
    }

    pub fn lagrangian(
        &self,
        d: &OccupancyMeasure,
        h: &Array1<f64>,
        lambda: f64,
        initial: &Array1<f64>,
    ) -> f64 {
        let c = self.coefficients(h);
        -0.5 * lambda * d.norm().powi(2) + h.dot(initial) + d.dot(&c)
    }
}

/// `−(λ/2)‖d‖² + Σ h ρ + (1/(m(1−γ))) Σ_i w_i (d(s_i,a_i)/d_t(s_i,a_i))(r_i − h(s_i) + γ h(s'_i))`.
pub fn empirical_lagrangian(
    batch: &SampleBatch,
    d: &OccupancyMeasure,
    h: &DualVector,
    lambda: f64,
    initial: &Array1<f64>,
) -> f64 {
    let m = batch.count as f64;
    let mut sum = 0.0;
    for t in &batch.tuples {
        let base = batch.source[[t.state, t.action]];
        sum += t.weight * d[[t.state, t.action]] / base
            * (t.reward - h[t.state] + batch.discount * h[t.next]);
    }
    -0.5 * lambda * d.norm().powi(2) + h.dot(initial) + sum / (m * (1.0 - batch.discount))
}

/// `r·d − (λ/2)‖d‖² + Σ_s h(s)(ρ(s) − Σ_a d(s,a) + γ Σ_{s',a} d(s',a) P(s',a,s))`.
pub fn exact_lagrangian(mdp: &TabularMdp, d: &OccupancyMeasure, h: &DualVector, lambda: f64) -> f64 {
    let residual = flow_residual(d.values(), &mdp.transitions, &mdp.initial, mdp.discount);
    d.dot(&mdp.rewards) - 0.5 * lambda * d.norm().powi(2) - h.dot(&residual)
}

/// Per-pair maximizer `clamp(c(s,a)/λ, 0, B·d̂_t(s,a))` of the empirical Lagrangian.
pub fn best_response_d(
    stats: &SampleStatistics,
    h: &Array1<f64>,
    lambda: f64,
    overlap: f64,
) -> Result<OccupancyMeasure, FiniteSampleError> {
    if !(lambda > 0.0) {
        return Err(FiniteSampleError::Parameter(format!("lambda must be positive, got {lambda}")));
    }
    if !(overlap > 0.0) {
        return Err(FiniteSampleError::Parameter(format!("overlap must be positive, got {overlap}")));
    }
    let c = stats.coefficients(h);
    let mut d = c / lambda;
    ndarray::Zip::from(&mut d)
        .and(stats.anchor.values())
        .for_each(|x, &anchor| *x = x.clamp(0.0, overlap * anchor.max(0.0)));
    Ok(OccupancyMeasure::new(d))
}

/// Follow-the-regularized-leader state for the dual player of the alternating learner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleState {
    pub h: DualVector,
    pub gradient_sum: Array1<f64>,
    pub primal_sum: Array2<f64>,
    pub dual_sum: Array1<f64>,
    pub rounds: usize,
    /// Dual ball radius `H = 3S/(1−γ)²`.
    pub radius: f64,
    pub overlap: f64,
}

impl SaddleState {
    pub fn new(num_states: usize, num_actions: usize, discount: f64, overlap: f64) -> Self {
        Self {
            h: DualVector::zeros(num_states),
            gradient_sum: Array1::zeros(num_states),
            primal_sum: Array2::zeros((num_states, num_actions)),
            dual_sum: Array1::zeros(num_states),
            rounds: 0,
            radius: dual_norm_bound(num_states, discount),
            overlap,
        }
    }

    pub fn average_primal(&self) -> OccupancyMeasure {
        OccupancyMeasure::new(&self.primal_sum / self.rounds.max(1) as f64)
    }

    pub fn average_dual(&self) -> Array1<f64> {
        &self.dual_sum / self.rounds.max(1) as f64
    }
}

/// Accumulates `gradient` and returns the next FTRL iterate
/// `Proj_{‖h‖ ≤ H}(−Σ g / (2β_reg))`.
pub fn ftrl_step_h(
    state: &mut SaddleState,
    gradient: &Array1<f64>,
    beta_reg: f64,
) -> Result<DualVector, FiniteSampleError> {
    if !(beta_reg > 0.0 && beta_reg.is_finite()) {
        return Err(FiniteSampleError::Parameter(format!(
            "FTRL regularization must be positive, got {beta_reg}"
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(FiniteSampleError::Parameter("non-finite dual gradient".into()));
    }
    state.gradient_sum += gradient;
    let mut h = &state.gradient_sum * (-0.5 / beta_reg);
    let norm = linalg::l2_norm(h.iter());
    if norm > state.radius {
        h *= state.radius / norm;
    }
    state.h = DualVector::new(h);
    Ok(state.h.clone())
}

/// Gradient-norm bound `G = ‖ρ‖₂ + 2B√S/(1−γ)` over the box.
pub fn gradient_bound(initial: &Array1<f64>, overlap: f64, discount: f64) -> f64 {
    let s = initial.len() as f64;
    linalg::l2_norm(initial.iter()) + 2.0 * overlap * s.sqrt() / (1.0 - discount)
}

/// Regret-balanced FTRL weight `G√N / (2H)`.
pub fn ftrl_weight(initial: &Array1<f64>, overlap: f64, discount: f64, rounds: usize) -> f64 {
    let radius = dual_norm_bound(initial.len(), discount);
    gradient_bound(initial, overlap, discount) * (rounds as f64).sqrt() / (2.0 * radius)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlternatingResult {
    pub d: OccupancyMeasure,
    pub h: DualVector,
    /// `max_d L̂(d, h̄) − min_{‖h‖ ≤ H} L̂(d̄, h)`.
    pub gap: f64,
    pub rounds: usize,
    /// Largest `‖h_n‖₂` seen.
    pub max_dual_norm: f64,
}

/// Alternating saddle learner: `rounds` alternations of FTRL on `h` and exact best response
/// on `d`; returns the averaged primal.
pub fn alternating_optimize(
    stats: &SampleStatistics,
    lambda: f64,
    overlap: f64,
    rounds: usize,
    initial: &Array1<f64>,
) -> Result<AlternatingResult, FiniteSampleError> {
    if rounds == 0 {
        return Err(FiniteSampleError::Parameter("need at least one round".into()));
    }
    let (ns, na) = stats.dims();
    let beta_reg = ftrl_weight(initial, overlap, stats.discount, rounds);
    let mut state = SaddleState::new(ns, na, stats.discount, overlap);
    let mut max_dual_norm: f64 = 0.0;
    for _ in 0..rounds {
        let h = state.h.values().clone();
        max_dual_norm = max_dual_norm.max(state.h.norm());
        let d = best_response_d(stats, &h, lambda, overlap)?;
        let g = stats.dual_gradient(d.values(), initial);
        state.primal_sum += d.values();
        state.dual_sum += &h;
        state.rounds += 1;
        ftrl_step_h(&mut state, &g, beta_reg)?;
    }
    let d_bar = state.average_primal();
    let h_bar = state.average_dual();
    let best_d = best_response_d(stats, &h_bar, lambda, overlap)?;
    let upper = stats.lagrangian(&best_d, &h_bar, lambda, initial);
    // L̂(d̄, ·) is affine in h, so its minimum over the ball is explicit.
    let at_zero = stats.lagrangian(&d_bar, &Array1::zeros(ns), lambda, initial);
    let slope = stats.dual_gradient(d_bar.values(), initial);
    let lower = at_zero - state.radius * linalg::l2_norm(slope.iter());
    Ok(AlternatingResult {
        d: d_bar,
        h: DualVector::new(h_bar),
        gap: upper - lower,
        rounds,
        max_dual_norm,
    })
}

/// Count-based `(P̂, r̂)`; unvisited pairs self-loop with zero reward.
pub fn estimate_model(batch: &SampleBatch, template: &TabularMdp) -> TabularMdp {
    let (ns, na) = (template.num_states(), template.num_actions());
    let mut counts = Array3::<f64>::zeros((ns, na, ns));
    let mut rewards = Array2::<f64>::zeros((ns, na));
    let mut visits = Array2::<f64>::zeros((ns, na));
    for t in &batch.tuples {
        counts[[t.state, t.action, t.next]] += t.weight;
        rewards[[t.state, t.action]] += t.weight * t.reward;
        visits[[t.state, t.action]] += t.weight;
    }
    for s in 0..ns {
        for a in 0..na {
            let v = visits[[s, a]];
            if v > 0.0 {
                rewards[[s, a]] /= v;
                for n in 0..ns {
                    counts[[s, a, n]] /= v;
                }
            } else {
                counts[[s, a, s]] = 1.0;
            }
        }
    }
    TabularMdp {
        transitions: counts,
        rewards,
        discount: template.discount,
        initial: template.initial.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FiniteSampleKind {
    /// Saddle point of the empirical Lagrangian via `alternating_optimize`.
    Lagrangian,
    /// Regularized solve on the count-based model estimate.
    ModelEstimate,
}

/// Finite-sample retraining step: deploy `π^{d_t}`, sample from its occupancy
/// `d̄_t` in the responded model, and re-optimize from the data.
#[derive(Debug, Clone)]
pub struct FiniteSampleStrategy {
    params: StrategyParams,
    kind: FiniteSampleKind,
}

impl FiniteSampleStrategy {
    pub fn lagrangian(params: StrategyParams) -> Result<Self, RetrainingError> {
        Self::new(params, FiniteSampleKind::Lagrangian)
    }

    pub fn model_estimate(params: StrategyParams) -> Result<Self, RetrainingError> {
        if params.samples.is_none() {
            return Err(RetrainingError::Parameter(
                "model estimation needs a finite sample count".into(),
            ));
        }
        Self::new(params, FiniteSampleKind::ModelEstimate)
    }

    fn new(params: StrategyParams, kind: FiniteSampleKind) -> Result<Self, RetrainingError> {
        if !(params.lambda > 0.0) || !(params.overlap > 0.0) || params.saddle_rounds == 0 {
            return Err(RetrainingError::Parameter(
                "finite-sample retraining needs lambda > 0, overlap > 0 and saddle_rounds ≥ 1"
                    .into(),
            ));
        }
        if params.samples == Some(0) {
            return Err(RetrainingError::Parameter("sample count must be at least 1".into()));
        }
        Ok(Self { params, kind })
    }

    fn draw(
        &self,
        environment: &TabularMdp,
        policy: &Policy,
        source: &OccupancyMeasure,
        m: usize,
        seed: u64,
    ) -> Result<SampleBatch, FiniteSampleError> {
        let noise = self.params.estimator.reward_noise;
        match self.params.estimator.source {
            SampleSource::Occupancy => sample_batch_with_noise(environment, source, m, seed, noise),
            SampleSource::Trajectories(mode) => {
                sample_trajectories(environment, policy, source, m, mode, seed, noise)
            }
        }
    }
}

impl RetrainingStrategy for FiniteSampleStrategy {
    fn name(&self) -> &str {
        match self.kind {
            FiniteSampleKind::Lagrangian => "finite-lagrangian",
            FiniteSampleKind::ModelEstimate => "finite-model-estimate",
        }
    }

    fn params(&self) -> &StrategyParams {
        &self.params
    }

    fn step(
        &self,
        model: &dyn ResponseModel,
        d: &OccupancyMeasure,
        iteration: usize,
    ) -> Result<StepOutput, RetrainingError> {
        let wrap = |source: FiniteSampleError| RetrainingError::Sampling { iteration, source };
        let environment = model
            .respond(d)
            .map_err(|source| RetrainingError::Response { iteration, source })?;
        let policy = policy_from_occupancy(d);
        let deployed = occupancy_from_policy(&environment, &policy)?;
        let seed = derive_seed(self.params.seed, iteration as u64);
        let lambda = self.params.lambda;

        let next = match (self.kind, self.params.samples) {
            (FiniteSampleKind::Lagrangian, None) => {
                let stats = SampleStatistics::exact(&environment, &deployed);
                alternating_optimize(&stats, lambda, self.params.overlap, self.params.saddle_rounds, &environment.initial)
                    .map_err(wrap)?
                    .d
            }
            (FiniteSampleKind::Lagrangian, Some(m)) => {
                let batch = self.draw(&environment, &policy, &deployed, m, seed).map_err(wrap)?;
                let stats = SampleStatistics::from_batch(&batch, self.params.estimator.weights)
                    .map_err(wrap)?;
                alternating_optimize(&stats, lambda, self.params.overlap, self.params.saddle_rounds, &environment.initial)
                    .map_err(wrap)?
                    .d
            }
            (FiniteSampleKind::ModelEstimate, m) => {
                let m = m.expect("checked at construction");
                let batch = self.draw(&environment, &policy, &deployed, m, seed).map_err(wrap)?;
                let estimate = estimate_model(&batch, &environment);
                solve_regularized(&estimate, lambda, self.params.mode)
                    .map_err(|source| RetrainingError::Solver { iteration, source })?
                    .d
            }
        };
        Ok(StepOutput {
            min_entry: next.min_entry(),
            next,
            environment,
        })
    }
}

/// Repeated saddle-point optimization on sampled data (`samples = None`
/// substitutes exact expectations).
#[allow(clippy::too_many_arguments)]
pub fn finite_sample_rpo_run(
    model: &dyn ResponseModel,
    d0: OccupancyMeasure,
    lambda: f64,
    overlap: f64,
    samples: Option<usize>,
    rounds: usize,
    max_iters: usize,
    seed: u64,
    reference: Option<OccupancyMeasure>,
) -> Result<crate::retraining::RetrainingTrace, RetrainingError> {
    let params = StrategyParams {
        overlap,
        samples,
        saddle_rounds: rounds,
        seed,
        ..StrategyParams::new(lambda)
    };
    let strategy = FiniteSampleStrategy::lagrangian(params)?;
    let mut options = crate::retraining::RunOptions::new(max_iters, 0.0);
    options.reference = reference;
    crate::retraining::run_retraining(&strategy, model, d0, &options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::SolveMode;
    use crate::synthetic::random_mdp;
    use ndarray::array;

    fn uniform_occupancy(mdp: &TabularMdp) -> OccupancyMeasure {
        occupancy_from_policy(mdp, &Policy::uniform(mdp.num_states(), mdp.num_actions())).unwrap()
    }

    #[test]
    fn degenerate_support() {
        let mdp = TabularMdp::new(Array3::ones((1, 1, 1)), array![[0.3]], 0.9, array![1.0]).unwrap();
        let d = uniform_occupancy(&mdp);
        let batch = sample_batch(&mdp, &d, 20, 1).unwrap();
        assert!(batch
            .tuples
            .iter()
            .all(|t| (t.state, t.action, t.reward, t.next) == (0, 0, 0.3, 0)));
    }

    #[test]
    fn deterministic_successors() {
        let mut p = Array3::zeros((2, 2, 2));
        p[[0, 0, 1]] = 1.0;
        p[[0, 1, 1]] = 1.0;
        p[[1, 0, 0]] = 1.0;
        p[[1, 1, 0]] = 1.0;
        let mdp = TabularMdp::new(p, Array2::zeros((2, 2)), 0.9, array![0.5, 0.5]).unwrap();
        let batch = sample_batch(&mdp, &uniform_occupancy(&mdp), 200, 2).unwrap();
        assert!(batch.tuples.iter().all(|t| t.next == 1 - t.state));
    }

    #[test]
    fn negative_mass_is_rejected() {
        let mdp = random_mdp(2, 2, 0.9, 1);
        let mut d = uniform_occupancy(&mdp).into_inner();
        d[[0, 1]] = -1e-3;
        assert!(matches!(
            sample_batch(&mdp, &OccupancyMeasure::new(d), 5, 1),
            Err(FiniteSampleError::NegativeMass { state: 0, action: 1, .. })
        ));
    }

    #[test]
    fn lagrangian_special_cases() {
        let mdp = random_mdp(3, 2, 0.9, 2);
        let d = uniform_occupancy(&mdp);
        let batch = sample_batch(&mdp, &d, 50, 3).unwrap();
        let zero = DualVector::zeros(3);
        let value = empirical_lagrangian(&batch, &d, &zero, 0.7, &mdp.initial);
        let rewards: f64 = batch.tuples.iter().map(|t| t.reward).sum();
        let expected = -0.35 * d.norm().powi(2) + rewards / (50.0 * 0.1);
        assert!((value - expected).abs() < 1e-9);

        let h = DualVector::new(array![0.3, -1.0, 2.0]);
        let value = empirical_lagrangian(&batch, &OccupancyMeasure::zeros(3, 2), &h, 0.0, &mdp.initial);
        assert!((value - h.dot(&mdp.initial)).abs() < 1e-12);

        // Statistics reproduce the tuple-level formula.
        let stats = SampleStatistics::from_batch(&batch, ImportanceWeights::True).unwrap();
        let direct = empirical_lagrangian(&batch, &d, &h, 0.7, &mdp.initial);
        assert!((stats.lagrangian(&d, h.values(), 0.7, &mdp.initial) - direct).abs() < 1e-9);
    }

    #[test]
    fn exact_statistics_match_exact_lagrangian() {
        let mdp = random_mdp(3, 2, 0.9, 4);
        let d_t = uniform_occupancy(&mdp);
        let stats = SampleStatistics::exact(&mdp, &d_t);
        let d = OccupancyMeasure::new(d_t.values() * 0.8);
        let h = DualVector::new(array![1.0, -0.5, 0.25]);
        let a = stats.lagrangian(&d, h.values(), 1.3, &mdp.initial);
        let b = exact_lagrangian(&mdp, &d, &h, 1.3);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn best_response_clamps() {
        let mdp = random_mdp(2, 2, 0.9, 5);
        let d_t = uniform_occupancy(&mdp);
        let stats = SampleStatistics::exact(&mdp, &d_t);
        let h = Array1::zeros(2);
        let d = best_response_d(&stats, &h, 1e-3, 1.5).unwrap();
        for (x, anchor) in d.iter().zip(d_t.iter()) {
            assert!((x - 1.5 * anchor).abs() < 1e-12);
        }
        let d = best_response_d(&stats, &h, 1e6, 1.5).unwrap();
        for (x, r) in d.iter().zip(mdp.rewards.iter()) {
            assert!((x - r / 1e6).abs() < 1e-15);
        }
    }

    #[test]
    fn unsampled_pairs_get_zero() {
        let mdp = random_mdp(3, 2, 0.9, 6);
        let mut d = uniform_occupancy(&mdp).into_inner();
        d[[2, 1]] = 0.0;
        let batch = sample_batch(&mdp, &OccupancyMeasure::new(d), 100, 6).unwrap();
        let stats = SampleStatistics::from_batch(&batch, ImportanceWeights::True).unwrap();
        let r = best_response_d(&stats, &Array1::from_elem(3, -5.0), 1.0, 3.0).unwrap();
        assert_eq!(r[[2, 1]], 0.0);
    }

    #[test]
    fn ftrl_cases() {
        let mut state = SaddleState::new(2, 2, 0.9, 1.0);
        assert_eq!(state.h.norm(), 0.0);
        let h = ftrl_step_h(&mut state, &array![2.0, -4.0], 1.0).unwrap();
        assert_eq!(h.values(), &array![-1.0, 2.0]);
        let radius = state.radius;
        let big = array![4.0 * radius, 0.0] - &state.gradient_sum;
        let h = ftrl_step_h(&mut state, &big, 1.0).unwrap();
        assert!((h.norm() - radius).abs() < 1e-9);
        assert!(ftrl_step_h(&mut state, &big, 0.0).is_err());
    }

    #[test]
    fn alternating_exact_path_approaches_solver() {
        let mdp = random_mdp(3, 2, 0.9, 7);
        let exact = solve_regularized(&mdp, 1.0, SolveMode::Auto).unwrap();
        let d_t = uniform_occupancy(&mdp);
        let stats = SampleStatistics::exact(&mdp, &d_t);
        let coarse = alternating_optimize(&stats, 1.0, 10.0, 2_000, &mdp.initial).unwrap();
        let result = alternating_optimize(&stats, 1.0, 10.0, 20_000, &mdp.initial).unwrap();
        let err = result.d.distance(&exact.d);
        assert!(err < coarse.d.distance(&exact.d));
        assert!(result.gap < coarse.gap);
        assert!(err <= 0.15 * exact.d.norm());
        assert!(result.max_dual_norm <= dual_norm_bound(3, 0.9) + 1e-9);
    }

    #[test]
    fn model_estimate_recovers_counts() {
        let mdp = random_mdp(2, 2, 0.9, 8);
        let batch = sample_batch(&mdp, &uniform_occupancy(&mdp), 50_000, 8).unwrap();
        let estimate = estimate_model(&batch, &mdp);
        assert!(crate::mdp::validate_mdp(&estimate).is_valid());
        for (a, b) in estimate.transitions.iter().zip(mdp.transitions.iter()) {
            assert!((a - b).abs() < 0.03);
        }
    }

    #[test]
    fn trajectory_batches_have_expected_shape() {
        let mdp = random_mdp(3, 2, 0.9, 9);
        let pi = Policy::uniform(3, 2);
        let d = occupancy_from_policy(&mdp, &pi).unwrap();
        let geo = sample_trajectories(&mdp, &pi, &d, 40, TrajectoryMode::Geometric, 1, 0.0).unwrap();
        assert_eq!(geo.tuples.len(), 40);
        let fixed =
            sample_trajectories(&mdp, &pi, &d, 40, TrajectoryMode::FixedLength(10), 1, 0.0).unwrap();
        assert_eq!(fixed.tuples.len(), 400);
        assert!((fixed.tuples[1].weight - 0.1 * 0.9).abs() < 1e-15);
    }
}
