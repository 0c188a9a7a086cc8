//! Repeated retraining loops, stability checks, closed-form theorem constants
//! and unregularized gap evaluators.
//!
//! Every retraining algorithm is a [`RetrainingStrategy`]; a
//! [`StrategyRegistry`] maps names to factories so that configuration files
//! and the CLI can select algorithms at runtime.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::finite_sample::{FiniteSampleError, FiniteSampleStrategy, SampleEstimator};
use crate::mdp::{
    occupancy_from_policy, optimal_unregularized, MdpError, OccupancyMeasure, Policy, TabularMdp,
};
use crate::response::{performative_value, ResponseError, ResponseModel, Sensitivity};
use crate::solver::{
    clamp_projection, gradient_ascent_step, solve_regularized, SolveMode, SolverError,
};

/// A run aborts once `‖d_t‖₂` exceeds this multiple of `1/(1−γ)`.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Step tolerance used when computing a reference stable point.
pub const REFERENCE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum RetrainingError {
    #[error("iteration {iteration}: {source}")]
    Solver {
        iteration: usize,
        #[source]
        source: SolverError,
    },
    #[error("iteration {iteration}: {source}")]
    Response {
        iteration: usize,
        #[source]
        source: ResponseError,
    },
    #[error("iteration {iteration}: {source}")]
    Sampling {
        iteration: usize,
        #[source]
        source: FiniteSampleError,
    },
    #[error("diverged at iteration {iteration}: ‖d‖₂ = {norm:.3e} exceeds {limit:.3e}")]
    Diverged {
        iteration: usize,
        norm: f64,
        limit: f64,
        trace: Box<RetrainingTrace>,
    },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("brute force over {0} free policy parameters refused (at most 4)")]
    TooManyParameters(usize),
    #[error("brute force grid has {0} points (at most 10^7)")]
    GridTooLarge(u128),
}

/// Parameters shared by every strategy; strategies ignore what they do not use.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyParams {
    pub lambda: f64,
    pub eta: Option<f64>,
    pub mode: SolveMode,
    /// Clamp projected iterates to `d ≥ 0` (gradient ascent only).
    pub clamp_projection: bool,
    /// Samples per step; `None` uses exact expectations.
    pub samples: Option<usize>,
    pub overlap: f64,
    pub saddle_rounds: usize,
    pub seed: u64,
    pub estimator: SampleEstimator,
}

impl StrategyParams {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            eta: None,
            mode: SolveMode::Auto,
            clamp_projection: false,
            samples: None,
            overlap: 2.0,
            saddle_rounds: 2000,
            seed: 0,
            estimator: SampleEstimator::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub next: OccupancyMeasure,
    /// Most negative entry of the new iterate before any clamping.
    pub min_entry: f64,
    /// Environment the step was trained against.
    pub environment: TabularMdp,
}

pub trait RetrainingStrategy: Send + Sync {
    fn name(&self) -> &str;

    fn params(&self) -> &StrategyParams;

    /// Deploys `d`, observes the responded environment and produces `d_{t+1}`.
    /// `iteration` is 1-based.
    fn step(
        &self,
        model: &dyn ResponseModel,
        d: &OccupancyMeasure,
        iteration: usize,
    ) -> Result<StepOutput, RetrainingError>;
}

/// Repeated regularized optimization: `d_{t+1} = argmax r_t·d − (λ/2)‖d‖²` over `C_t`.
#[derive(Debug, Clone)]
pub struct RepeatedOptimization {
    params: StrategyParams,
}

impl RepeatedOptimization {
    pub fn new(params: StrategyParams) -> Result<Self, RetrainingError> {
        check_positive("lambda", params.lambda)?;
        Ok(Self { params })
    }
}

impl RetrainingStrategy for RepeatedOptimization {
    fn name(&self) -> &str {
        "rpo"
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
        let environment = model
            .respond(d)
            .map_err(|source| RetrainingError::Response { iteration, source })?;
        let result = solve_regularized(&environment, self.params.lambda, self.params.mode)
            .map_err(|source| RetrainingError::Solver { iteration, source })?;
        Ok(StepOutput {
            min_entry: result.min_entry,
            next: result.d,
            environment,
        })
    }
}

/// Repeated projected gradient ascent: `d_{t+1} = Proj_{C_t}((1 − ηλ) d_t + η r_t)`.
#[derive(Debug, Clone)]
pub struct RepeatedGradientAscent {
    params: StrategyParams,
    eta: f64,
}

impl RepeatedGradientAscent {
    pub fn new(params: StrategyParams) -> Result<Self, RetrainingError> {
        check_positive("lambda", params.lambda)?;
        let eta = params
            .eta
            .ok_or_else(|| RetrainingError::Parameter("gradient ascent needs eta".into()))?;
        check_positive("eta", eta)?;
        Ok(Self { params, eta })
    }
}

impl RetrainingStrategy for RepeatedGradientAscent {
    fn name(&self) -> &str {
        "rga"
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
        let environment = model
            .respond(d)
            .map_err(|source| RetrainingError::Response { iteration, source })?;
        let mut result = gradient_ascent_step(d, &environment, self.params.lambda, self.eta)
            .map_err(|source| RetrainingError::Solver { iteration, source })?;
        if self.params.clamp_projection {
            result = clamp_projection(result);
        }
        Ok(StepOutput {
            min_entry: result.min_entry,
            next: result.d,
            environment,
        })
    }
}

pub type StrategyFactory =
    fn(&StrategyParams) -> Result<Box<dyn RetrainingStrategy>, RetrainingError>;

/// Name → factory table for retraining algorithms.
#[derive(Clone, Default)]
pub struct StrategyRegistry {
    factories: BTreeMap<String, StrategyFactory>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `rpo`, `rga`, `finite-lagrangian` and `finite-model-estimate`.
    pub fn with_defaults() -> Self {
        let mut registry = Self::empty();
        registry.register("rpo", |p| Ok(Box::new(RepeatedOptimization::new(p.clone())?)));
        registry.register("rga", |p| Ok(Box::new(RepeatedGradientAscent::new(p.clone())?)));
        registry.register("finite-lagrangian", |p| {
            Ok(Box::new(FiniteSampleStrategy::lagrangian(p.clone())?))
        });
        registry.register("finite-model-estimate", |p| {
            Ok(Box::new(FiniteSampleStrategy::model_estimate(p.clone())?))
        });
        registry
    }

    pub fn register(&mut self, name: &str, factory: StrategyFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(
        &self,
        name: &str,
        params: &StrategyParams,
    ) -> Result<Box<dyn RetrainingStrategy>, RetrainingError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| RetrainingError::UnknownStrategy(name.to_string()))?;
        factory(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub iteration: usize,
    /// `‖d_{t+1} − d_t‖₂ / ‖d_t‖₂`.
    pub normalized_step_distance: f64,
    pub distance_to_stable: Option<f64>,
    /// Best unregularized value in the step's environment minus the value of
    /// the new iterate there.
    pub subopt_gap: Option<f64>,
    pub min_primal_entry: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceConfig {
    pub strategy: String,
    pub params: StrategyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrainingTrace {
    pub iterates: Vec<OccupancyMeasure>,
    pub records: Vec<StepRecord>,
    pub config: TraceConfig,
    /// The last normalized step distance reached the stop tolerance.
    pub converged: bool,
}

impl RetrainingTrace {
    pub fn last(&self) -> &OccupancyMeasure {
        self.iterates.last().expect("a trace holds at least d₀")
    }

    pub fn final_step_distance(&self) -> Option<f64> {
        self.records.last().map(|r| r.normalized_step_distance)
    }

    /// First iteration whose normalized step distance is below `tol`.
    pub fn iterations_to(&self, tol: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.normalized_step_distance < tol)
            .map(|r| r.iteration)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub max_iters: usize,
    pub stop_tol: f64,
    pub reference: Option<OccupancyMeasure>,
    pub record_gap: bool,
    pub record_time: bool,
}

impl RunOptions {
    pub fn new(max_iters: usize, stop_tol: f64) -> Self {
        Self {
            max_iters,
            stop_tol,
            reference: None,
            record_gap: false,
            record_time: false,
        }
    }

    pub fn with_reference(mut self, reference: OccupancyMeasure) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn with_gap(mut self) -> Self {
        self.record_gap = true;
        self
    }
}

/// Drives `strategy` from `d0` until the normalized step distance reaches
/// `stop_tol` or `max_iters` steps have run.
pub fn run_retraining(
    strategy: &dyn RetrainingStrategy,
    model: &dyn ResponseModel,
    d0: OccupancyMeasure,
    options: &RunOptions,
) -> Result<RetrainingTrace, RetrainingError> {
    let limit = DIVERGENCE_FACTOR * model.base().horizon();
    let mut trace = RetrainingTrace {
        iterates: vec![d0],
        records: Vec::new(),
        config: TraceConfig {
            strategy: strategy.name().to_string(),
            params: strategy.params().clone(),
        },
        converged: false,
    };
    for iteration in 1..=options.max_iters {
        let started = Instant::now();
        let current = trace.last();
        let output = strategy.step(model, current, iteration)?;
        let elapsed = started.elapsed().as_secs_f64() * 1e3;

        let step = output.next.distance(current) / current.norm();
        let subopt_gap = if options.record_gap {
            let best = optimal_unregularized(&output.environment)?;
            Some(best.value - output.next.dot(&output.environment.rewards))
        } else {
            None
        };
        let norm = output.next.norm();
        trace.records.push(StepRecord {
            iteration,
            normalized_step_distance: step,
            distance_to_stable: options.reference.as_ref().map(|r| output.next.distance(r)),
            subopt_gap,
            min_primal_entry: output.min_entry,
            wall_ms: options.record_time.then_some(elapsed),
        });
        trace.iterates.push(output.next);
        if !norm.is_finite() || norm > limit {
            return Err(RetrainingError::Diverged {
                iteration,
                norm,
                limit,
                trace: Box::new(trace),
            });
        }
        if step <= options.stop_tol {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

/// Occupancy of the uniform policy under the base model, the generic `d₀`.
pub fn default_initial_occupancy(model: &dyn ResponseModel) -> Result<OccupancyMeasure, MdpError> {
    let base = model.base();
    occupancy_from_policy(base, &Policy::uniform(base.num_states(), base.num_actions()))
}

pub fn rpo_run(
    model: &dyn ResponseModel,
    d0: OccupancyMeasure,
    lambda: f64,
    max_iters: usize,
    stop_tol: f64,
) -> Result<RetrainingTrace, RetrainingError> {
    let strategy = RepeatedOptimization::new(StrategyParams::new(lambda))?;
    run_retraining(&strategy, model, d0, &RunOptions::new(max_iters, stop_tol))
}

pub fn rga_run(
    model: &dyn ResponseModel,
    d0: OccupancyMeasure,
    lambda: f64,
    eta: f64,
    max_iters: usize,
    stop_tol: f64,
) -> Result<RetrainingTrace, RetrainingError> {
    let params = StrategyParams {
        eta: Some(eta),
        ..StrategyParams::new(lambda)
    };
    let strategy = RepeatedGradientAscent::new(params)?;
    run_retraining(&strategy, model, d0, &RunOptions::new(max_iters, stop_tol))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferencePoint {
    pub occupancy: OccupancyMeasure,
    pub converged: bool,
    pub iterations: usize,
}

/// Empirical `d_S`: repeated optimization run to [`REFERENCE_TOL`], or for
/// `budget` steps.
pub fn reference_stable_point(
    model: &dyn ResponseModel,
    d0: OccupancyMeasure,
    lambda: f64,
    mode: SolveMode,
    budget: usize,
) -> Result<ReferencePoint, RetrainingError> {
    let strategy = RepeatedOptimization::new(StrategyParams {
        mode,
        ..StrategyParams::new(lambda)
    })?;
    let trace = run_retraining(&strategy, model, d0, &RunOptions::new(budget, REFERENCE_TOL))?;
    Ok(ReferencePoint {
        converged: trace.converged,
        iterations: trace.records.len(),
        occupancy: trace.last().clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityCheck {
    pub stable: bool,
    pub residual: f64,
}

/// `‖solve_regularized(respond(d), λ).d − d‖₂ ≤ tol`.
pub fn is_stable(
    model: &dyn ResponseModel,
    d: &OccupancyMeasure,
    lambda: f64,
    tol: f64,
) -> Result<StabilityCheck, RetrainingError> {
    let environment = model
        .respond(d)
        .map_err(|source| RetrainingError::Response { iteration: 0, source })?;
    let best = solve_regularized(&environment, lambda, SolveMode::Auto)
        .map_err(|source| RetrainingError::Solver { iteration: 0, source })?;
    let residual = best.d.distance(d);
    Ok(StabilityCheck {
        stable: residual <= tol,
        residual,
    })
}

fn check_positive(name: &str, value: f64) -> Result<(), RetrainingError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(RetrainingError::Parameter(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}

/// Inputs of the closed-form constants. Bounds assume rewards in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremInputs {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub epsilon_r: f64,
    pub epsilon_p: f64,
    pub lambda: f64,
    /// Overlap bound `B`.
    pub overlap: f64,
    pub delta: f64,
    /// Failure probability `p`.
    pub failure_prob: f64,
    /// Contraction target `β ∈ (0, 1/2)` of the finite-sample recursion.
    pub beta: f64,
    /// Time index `t` in the per-step sample bound.
    pub step: u64,
}

impl TheoremInputs {
    pub fn validate(&self) -> Result<(), RetrainingError> {
        let bad = |m: &str| Err(RetrainingError::Parameter(m.to_string()));
        if self.num_states == 0 || self.num_actions == 0 {
            return bad("num_states and num_actions must be positive");
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must lie in (0, 1)");
        }
        if !(self.epsilon_r >= 0.0 && self.epsilon_p >= 0.0) {
            return bad("sensitivities must be nonnegative");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.overlap > 0.0) {
            return bad("overlap B must be positive");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if !(self.failure_prob > 0.0 && self.failure_prob < 1.0) {
            return bad("failure probability must lie in (0, 1)");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if self.step == 0 {
            return bad("step index t must be at least 1");
        }
        Ok(())
    }

    fn sensitivity_mix(&self) -> f64 {
        2.0 * self.epsilon_r + 5.0 * self.num_states as f64 * self.epsilon_p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RpoConstants {
    /// Contraction coefficient `β = μ = 12 S^{3/2}(2ε_r + 5Sε_p) / (λ(1−γ)⁴)`.
    pub beta: f64,
    pub lambda_threshold: f64,
    /// `2(1−μ)⁻¹ ln(2/(δ(1−γ)))`; `None` when `μ ≥ 1`.
    pub iteration_bound: Option<f64>,
    pub iterations: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RgaConstants {
    pub lambda_threshold: f64,
    pub eta: f64,
    pub epsilon_p_limit: f64,
    /// `μ` as stated with the theorem.
    pub mu_statement: f64,
    /// Contraction factor from the proof, including its `1/2` term.
    pub mu_proof: f64,
    pub conditions_hold: bool,
    pub iteration_bound_statement: Option<f64>,
    pub iteration_bound_proof: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", content = "value", rename_all = "kebab-case")]
pub enum SampleSize {
    Required(u64),
    NotApplicable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteSampleConstants {
    pub lambda_threshold: f64,
    pub samples_per_step: SampleSize,
    /// `2(1−2β)⁻¹ ln(2/(δ(1−γ)))` from the `β δ + β‖d_t − d_S‖` recursion;
    /// `None` unless `β < 1/2`.
    pub iteration_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalGapConstants {
    pub t1: f64,
    pub t2: f64,
    /// Minimizer `(2 T1/T2)^{1/3}` of `T1/λ² + λ T2`.
    pub lambda_star: f64,
    /// Smallest admissible `λ`, `2(2ε_r + 9Sε_p/(1−γ)²)`.
    pub lambda_floor: f64,
    pub delta_at_lambda: f64,
    pub delta_at_best_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapConstants {
    /// `6 S^{3/2}(2ε_r + 5Sε_p)/(1−γ)⁶`.
    pub stable_gap_bound: f64,
    /// `λ / (2(1−γ)²)`, valid for every `λ`.
    pub regularization_gap_bound: f64,
    pub optimal_gap: OptimalGapConstants,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremConstants {
    pub inputs: TheoremInputs,
    pub rpo: RpoConstants,
    pub rga: RgaConstants,
    pub finite_sample: FiniteSampleConstants,
    pub gaps: GapConstants,
}

fn log_term(delta: f64, discount: f64) -> f64 {
    (2.0 / (delta * (1.0 - discount))).ln()
}

pub fn theorem_constants(inputs: &TheoremInputs) -> Result<TheoremConstants, RetrainingError> {
    inputs.validate()?;
    let s = inputs.num_states as f64;
    let a = inputs.num_actions as f64;
    let g = inputs.discount;
    let (er, ep) = (inputs.epsilon_r, inputs.epsilon_p);
    let lambda = inputs.lambda;
    let one_minus = 1.0 - g;
    let mix = inputs.sensitivity_mix();
    let log = log_term(inputs.delta, g);

    let rpo_threshold = 12.0 * s.powf(1.5) * mix / one_minus.powi(4);
    let beta = rpo_threshold / lambda;
    let rpo_bound = (beta < 1.0).then(|| 2.0 / (1.0 - beta) * log);
    let rpo = RpoConstants {
        beta,
        lambda_threshold: rpo_threshold,
        iteration_bound: rpo_bound,
        iterations: rpo_bound.map(|t| t.ceil() as u64),
    };

    let rga_threshold = (4.0 * er)
        .max(2.0 * s)
        .max(20.0 * g * g * s.powf(1.5) * (er + ep) / one_minus.powi(2));
    let epsilon_p_limit = (g * s / 3.0).min(one_minus.powi(4) / (100.0 * g.powi(3) * s));
    let base = 64.0 * g * g * ep * ep / one_minus.powi(4);
    let mu_statement = (base * (1.0 + 30.0 * g.powi(4) * s * s / one_minus.powi(4))).sqrt();
    let mu_proof = (0.5 + base + 1920.0 * g.powi(6) * s * s * ep * ep / one_minus.powi(8)).sqrt();
    let rga = RgaConstants {
        lambda_threshold: rga_threshold,
        eta: 1.0 / lambda,
        epsilon_p_limit,
        mu_statement,
        mu_proof,
        conditions_hold: lambda >= rga_threshold && ep < epsilon_p_limit,
        iteration_bound_statement: (mu_statement < 1.0).then(|| log / (1.0 - mu_statement)),
        iteration_bound_proof: (mu_proof < 1.0).then(|| log / (1.0 - mu_proof)),
    };

    let finite_sample = FiniteSampleConstants {
        lambda_threshold: 24.0 * s.powf(1.5) * mix / one_minus.powi(4),
        samples_per_step: sample_size_bound(
            inputs.num_states,
            inputs.num_actions,
            inputs.overlap,
            inputs.beta,
            inputs.delta,
            inputs.failure_prob,
            inputs.step,
            er,
            ep,
        )?,
        iteration_bound: (inputs.beta < 0.5).then(|| 2.0 / (1.0 - 2.0 * inputs.beta) * log),
    };

    let t1 = s.powi(3) * a / one_minus.powi(6)
        * ((1.0 + g * s.sqrt()) * er + g * (2.0 * s.sqrt() + 3.0 * s / one_minus.powi(2)) * ep)
            .powi(2);
    let t2 = 1.0 / (2.0 * one_minus.powi(2));
    let lambda_star = (2.0 * t1 / t2).cbrt();
    let lambda_floor = 2.0 * (2.0 * er + 9.0 * ep * s / one_minus.powi(2));
    let delta_at = |l: f64| t1 / (l * l) + l * t2;
    let best_lambda = lambda_star.max(lambda_floor);
    let gaps = GapConstants {
        stable_gap_bound: 6.0 * s.powf(1.5) * mix / one_minus.powi(6),
        regularization_gap_bound: lambda / (2.0 * one_minus.powi(2)),
        optimal_gap: OptimalGapConstants {
            t1,
            t2,
            lambda_star,
            lambda_floor,
            delta_at_lambda: delta_at(lambda),
            delta_at_best_lambda: if best_lambda > 0.0 { delta_at(best_lambda) } else { 0.0 },
        },
    };

    Ok(TheoremConstants {
        inputs: *inputs,
        rpo,
        rga,
        finite_sample,
        gaps,
    })
}

/// Unrounded per-step sample requirement; `None` when `2ε_r + 5Sε_p = 0`.
#[allow(clippy::too_many_arguments)]
pub fn sample_size_formula(
    num_states: usize,
    num_actions: usize,
    overlap: f64,
    beta: f64,
    delta: f64,
    failure_prob: f64,
    step: u64,
    epsilon_r: f64,
    epsilon_p: f64,
) -> Option<f64> {
    let s = num_states as f64;
    let a = num_actions as f64;
    let mix = 2.0 * epsilon_r + 5.0 * s * epsilon_p;
    if mix == 0.0 {
        return None;
    }
    let spread = overlap + a.sqrt();
    let lead = 64.0 * a * spread * spread / (beta.powi(4) * delta.powi(4) * mix * mix);
    let logs = (step as f64 / failure_prob).ln() + (4.0 * s * spread / (beta * delta * mix)).ln();
    Some(lead * logs)
}

#[allow(clippy::too_many_arguments)]
pub fn sample_size_bound(
    num_states: usize,
    num_actions: usize,
    overlap: f64,
    beta: f64,
    delta: f64,
    failure_prob: f64,
    step: u64,
    epsilon_r: f64,
    epsilon_p: f64,
) -> Result<SampleSize, RetrainingError> {
    if !(overlap > 0.0 && delta > 0.0 && beta > 0.0 && beta < 1.0) {
        return Err(RetrainingError::Parameter(
            "sample bound needs B > 0, δ > 0 and β in (0, 1)".into(),
        ));
    }
    if !(failure_prob > 0.0 && failure_prob < 1.0) || step == 0 {
        return Err(RetrainingError::Parameter(
            "sample bound needs p in (0, 1) and t ≥ 1".into(),
        ));
    }
    Ok(
        match sample_size_formula(
            num_states,
            num_actions,
            overlap,
            beta,
            delta,
            failure_prob,
            step,
            epsilon_r,
            epsilon_p,
        ) {
            Some(m) => SampleSize::Required(m.ceil().max(1.0) as u64),
            None => SampleSize::NotApplicable("zero sensitivity".into()),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StableGap {
    pub achieved: f64,
    pub best_feasible: f64,
    pub gap: f64,
    /// `6 S^{3/2}(2ε_r + 5Sε_p)/(1−γ)⁶` for certified models.
    pub theory_bound: Option<f64>,
    pub regularization_bound: f64,
    pub stability_residual: f64,
}

impl StableGap {
    pub fn within_theory(&self) -> Option<bool> {
        self.theory_bound.map(|b| self.gap <= b)
    }

    pub fn within_regularization(&self) -> bool {
        self.gap <= self.regularization_bound
    }
}

/// Unregularized suboptimality of `d_S` inside the environment it induces.
pub fn stable_gap_unregularized(
    model: &dyn ResponseModel,
    d_s: &OccupancyMeasure,
    lambda: f64,
) -> Result<StableGap, RetrainingError> {
    let environment = model
        .respond(d_s)
        .map_err(|source| RetrainingError::Response { iteration: 0, source })?;
    let achieved = d_s.dot(&environment.rewards);
    let best_feasible = optimal_unregularized(&environment)?.value;
    let s = environment.num_states() as f64;
    let one_minus = 1.0 - environment.discount;
    let theory_bound = model.certificate().map(|Sensitivity { reward, transition }| {
        6.0 * s.powf(1.5) * (2.0 * reward + 5.0 * s * transition) / one_minus.powi(6)
    });
    let stability_residual = is_stable(model, d_s, lambda, f64::INFINITY)?.residual;
    Ok(StableGap {
        achieved,
        best_feasible,
        gap: best_feasible - achieved,
        theory_bound,
        regularization_bound: lambda / (2.0 * one_minus.powi(2)),
        stability_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfOptimal {
    pub policy: Policy,
    /// Free coordinates `π(a|s)` for `a < A − 1`, state-major.
    pub parameters: Vec<f64>,
    pub value: f64,
}

const MAX_GRID_POINTS: u128 = 10_000_000;

/// Exhaustive search of the policy simplex on a lattice with spacing
/// `1/round(1/resolution)`, maximizing the performative value.
pub fn brute_force_perf_optimal(
    model: &dyn ResponseModel,
    resolution: f64,
) -> Result<PerfOptimal, RetrainingError> {
    let base = model.base();
    let (ns, na) = (base.num_states(), base.num_actions());
    let free = ns * (na - 1);
    if free > 4 {
        return Err(RetrainingError::TooManyParameters(free));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(RetrainingError::Parameter(format!(
            "resolution must lie in (0, 1], got {resolution}"
        )));
    }
    let steps = (1.0 / resolution).round() as usize;
    let per_state = compositions(steps, na);
    let total = (per_state.len() as u128).pow(ns as u32);
    if total > MAX_GRID_POINTS {
        return Err(RetrainingError::GridTooLarge(total));
    }

    let mut best: Option<PerfOptimal> = None;
    let mut index = vec![0usize; ns];
    loop {
        let mut probs = ndarray::Array2::zeros((ns, na));
        for s in 0..ns {
            for (a, &k) in per_state[index[s]].iter().enumerate() {
                probs[[s, a]] = k as f64 / steps as f64;
            }
        }
        let policy = Policy::new(probs)?;
        let value = performative_value(model, &policy)
            .map_err(|source| RetrainingError::Response { iteration: 0, source })?
            .value;
        if best.as_ref().is_none_or(|b| value > b.value) {
            let parameters = (0..ns)
                .flat_map(|s| (0..na - 1).map(move |a| (s, a)))
                .map(|(s, a)| policy[[s, a]])
                .collect();
            best = Some(PerfOptimal {
                policy,
                parameters,
                value,
            });
        }
        // Odometer increment over per-state lattice indices.
        let mut s = 0;
        loop {
            if s == ns {
                return Ok(best.expect("the lattice is nonempty"));
            }
            index[s] += 1;
            if index[s] < per_state.len() {
                break;
            }
            index[s] = 0;
            s += 1;
        }
    }
}

/// All ways to write `total` as an ordered sum of `parts` nonnegative integers.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}
