//! Experiment harness: sectioned TOML configuration, seed-parallel execution
//! with optional parameter sweeps, and CSV/JSON emission.
//!
//! Outputs are byte-identical across reruns of the same configuration as long
//! as `record_time` is off.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::finite_sample::{ImportanceWeights, SampleEstimator, SampleSource, TrajectoryMode};
use crate::gridworld::{
    default_grid, initial_policy_eps_optimal, parse_grid, FollowerEnsemble, GridSpec,
    GridworldResponse, DEFAULT_FOLLOWERS, DEFAULT_INITIAL_EPSILON, DEFAULT_PERTURBATION_SEED,
};
use crate::mdp::OccupancyMeasure;
use crate::response::ResponseModel;
use crate::retraining::{
    default_initial_occupancy, reference_stable_point, run_retraining, stable_gap_unregularized,
    theorem_constants, ReferencePoint, RetrainingTrace, RunOptions, StableGap, StrategyParams,
    StrategyRegistry, TheoremConstants, TheoremInputs,
};
use crate::solver::{check_dual_norm, solve_regularized, DualNormCheck, SolveMode};
use crate::synthetic::certified_response;

pub const CSV_HEADER: &str =
    "seed,iteration,normalized_step_distance,distance_to_stable,subopt_gap,min_primal_entry,wall_ms";
pub const ITERATE_HEADER: &str = "seed,iteration,state,action,value";
pub const SUMMARY_FORMAT_VERSION: u32 = 1;
/// Steps whose distance to `d_S` is below this are excluded from ratio checks.
pub const CONTRACTION_FLOOR: f64 = 1e-8;
/// Slack added to the theoretical contraction coefficient.
pub const CONTRACTION_SLACK: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Rpo,
    Rga,
    FiniteLagrangian,
    FiniteModelEstimate,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] = [
        ExperimentKind::Rpo,
        ExperimentKind::Rga,
        ExperimentKind::FiniteLagrangian,
        ExperimentKind::FiniteModelEstimate,
    ];

    /// Registry name of the strategy.
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Rpo => "rpo",
            ExperimentKind::Rga => "rga",
            ExperimentKind::FiniteLagrangian => "finite-lagrangian",
            ExperimentKind::FiniteModelEstimate => "finite-model-estimate",
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, ExperimentKind::FiniteLagrangian | ExperimentKind::FiniteModelEstimate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridworldEnv {
    /// `None` selects the shipped default grid.
    pub grid: Option<PathBuf>,
    pub followers: usize,
    pub beta_softmax: f64,
    pub perturbation_seed: u64,
    pub initial_epsilon: f64,
    pub intervention_cost: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticEnv {
    pub num_states: usize,
    pub num_actions: usize,
    pub epsilon_r: f64,
    pub epsilon_p: f64,
    pub instance_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Environment {
    Gridworld(GridworldEnv),
    Synthetic(SyntheticEnv),
}

/// Inputs of the closed-form constants that the run itself does not fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheorySettings {
    pub delta: f64,
    pub failure_prob: f64,
    pub contraction_target: f64,
    pub step: u64,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            delta: 1e-4,
            failure_prob: 0.05,
            contraction_target: 0.25,
            step: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Lambda,
    Eta,
    Samples,
    BetaSoftmax,
    PerturbationSeed,
    EpsilonR,
    EpsilonP,
}

impl SweepParameter {
    const NAMES: [(&'static str, SweepParameter); 7] = [
        ("lambda", SweepParameter::Lambda),
        ("eta", SweepParameter::Eta),
        ("samples", SweepParameter::Samples),
        ("beta_softmax", SweepParameter::BetaSoftmax),
        ("perturbation_seed", SweepParameter::PerturbationSeed),
        ("epsilon_r", SweepParameter::EpsilonR),
        ("epsilon_p", SweepParameter::EpsilonP),
    ];

    pub fn as_str(self) -> &'static str {
        Self::NAMES.iter().find(|(_, p)| *p == self).map(|(n, _)| *n).unwrap_or("?")
    }

    fn parse(name: &str) -> Option<Self> {
        Self::NAMES.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub environment: Environment,
    pub seeds: Vec<u64>,
    pub max_iters: usize,
    pub stop_tol: f64,
    /// A seed counts as converged once its normalized step distance drops
    /// below this.
    pub converge_tol: f64,
    /// Repeated-optimization steps spent locating `d_S`; 0 disables it.
    pub reference_budget: usize,
    pub record_gap: bool,
    /// Wall-clock columns make outputs nondeterministic.
    pub record_time: bool,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
    pub lambda: f64,
    pub discount: f64,
    pub eta: Option<f64>,
    pub samples: Option<usize>,
    pub overlap: f64,
    pub saddle_rounds: usize,
    pub solve_mode: SolveMode,
    pub clamp_projection: bool,
    pub estimator: SampleEstimator,
    pub theory: TheorySettings,
    pub sweep: Option<Sweep>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    /// `section.key`, or the section alone.
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl ConfigErrors {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|i| i.key.as_str())
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration:\n{0}")]
    Config(ConfigErrors),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no successful traces to write")]
    EmptyTraces,
    #[error("every seed failed:\n{}", .0.join("\n"))]
    AllSeedsFailed(Vec<String>),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl From<ConfigErrors> for ExperimentError {
    fn from(e: ConfigErrors) -> Self {
        ExperimentError::Config(e)
    }
}

fn io_error(path: &Path, source: io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Typed access to one TOML section that records every problem instead of
/// stopping at the first.
struct Section<'a> {
    name: &'static str,
    table: Option<&'a toml::Table>,
    used: BTreeSet<&'static str>,
    issues: &'a mut Vec<ConfigIssue>,
}

impl<'a> Section<'a> {
    fn new(
        root: &'a toml::Table,
        name: &'static str,
        issues: &'a mut Vec<ConfigIssue>,
    ) -> Section<'a> {
        let table = match root.get(name) {
            Some(toml::Value::Table(t)) => Some(t),
            Some(_) => {
                issues.push(ConfigIssue {
                    key: name.into(),
                    message: "must be a section".into(),
                });
                None
            }
            None => None,
        };
        Section {
            name,
            table,
            used: BTreeSet::new(),
            issues,
        }
    }

    fn key(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    fn issue(&mut self, key: &str, message: impl Into<String>) {
        let key = self.key(key);
        self.issues.push(ConfigIssue {
            key,
            message: message.into(),
        });
    }

    fn has(&self, key: &str) -> bool {
        self.table.is_some_and(|t| t.contains_key(key))
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a toml::Value> {
        self.used.insert(key);
        self.table.and_then(|t| t.get(key))
    }

    fn typed<T>(
        &mut self,
        key: &'static str,
        expected: &str,
        convert: impl Fn(&toml::Value) -> Option<T>,
    ) -> Option<T> {
        let value = self.raw(key)?;
        let out = convert(value);
        if out.is_none() {
            self.issue(key, format!("expected {expected}"));
        }
        out
    }

    fn f64(&mut self, key: &'static str) -> Option<f64> {
        self.typed(key, "a number", |v| match v {
            toml::Value::Float(x) => Some(*x),
            toml::Value::Integer(i) => Some(*i as f64),
            _ => None,
        })
    }

    fn u64(&mut self, key: &'static str) -> Option<u64> {
        self.typed(key, "a nonnegative integer", |v| {
            v.as_integer().and_then(|i| u64::try_from(i).ok())
        })
    }

    fn usize(&mut self, key: &'static str) -> Option<usize> {
        self.u64(key).map(|v| v as usize)
    }

    fn bool(&mut self, key: &'static str) -> Option<bool> {
        self.typed(key, "true or false", toml::Value::as_bool)
    }

    fn string(&mut self, key: &'static str) -> Option<String> {
        self.typed(key, "a string", |v| v.as_str().map(str::to_string))
    }

    fn required<T>(&mut self, key: &'static str, value: Option<T>) -> Option<T> {
        if value.is_none() && !self.has(key) {
            self.issue(key, "missing required key");
        }
        value
    }

    /// Flags keys present in the section but never read.
    fn finish(self) {
        if let Some(table) = self.table {
            for key in table.keys() {
                if !self.used.contains(key.as_str()) {
                    self.issues.push(ConfigIssue {
                        key: format!("{}.{}", self.name, key),
                        message: "unknown key".into(),
                    });
                }
            }
        }
    }
}

const SECTIONS: [&str; 5] = ["experiment", "environment", "parameters", "theory", "sweep"];

/// Parses and validates a configuration. Every problem found is reported.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let root: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        ConfigErrors(vec![ConfigIssue {
            key: "syntax".into(),
            message: e.message().to_string(),
        }])
    })?;
    let mut issues = Vec::new();
    for key in root.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            issues.push(ConfigIssue {
                key: key.clone(),
                message: "unknown section".into(),
            });
        }
    }

    let mut ex = Section::new(&root, "experiment", &mut issues);
    let kind_name = ex.string("kind");
    let kind_name = ex.required("kind", kind_name);
    let kind = kind_name.as_deref().and_then(|name| {
        let kind = ExperimentKind::ALL.into_iter().find(|k| k.as_str() == name);
        if kind.is_none() {
            ex.issue(
                "kind",
                format!("unknown kind `{name}` (rpo, rga, finite-lagrangian, finite-model-estimate)"),
            );
        }
        kind
    });
    let seeds = ex.typed("seeds", "an array of nonnegative integers", |v| {
        v.as_array()?
            .iter()
            .map(|s| s.as_integer().and_then(|i| u64::try_from(i).ok()))
            .collect::<Option<Vec<u64>>>()
    });
    let seeds = ex.required("seeds", seeds);
    let max_iters = ex.usize("max_iters");
    let max_iters = ex.required("max_iters", max_iters);
    let stop_tol = ex.f64("stop_tol").unwrap_or(0.0);
    let converge_tol = ex.f64("converge_tol").unwrap_or(1e-4);
    let reference_budget = ex.usize("reference_budget").unwrap_or(0);
    let record_gap = ex.bool("record_gap").unwrap_or(false);
    let record_time = ex.bool("record_time").unwrap_or(false);
    let output_dir = ex.string("output_dir").map(PathBuf::from);
    ex.finish();

    let mut env = Section::new(&root, "environment", &mut issues);
    let env_type = env.string("type");
    let env_type = env.required("type", env_type);
    let environment = match env_type.as_deref() {
        Some("gridworld") => {
            let grid = env.string("grid").map(PathBuf::from);
            let followers = env.usize("followers").unwrap_or(DEFAULT_FOLLOWERS);
            let beta = env.f64("beta_softmax");
            let beta_softmax = env.required("beta_softmax", beta);
            let perturbation_seed = env.u64("perturbation_seed").unwrap_or(DEFAULT_PERTURBATION_SEED);
            let initial_epsilon = env.f64("initial_epsilon").unwrap_or(DEFAULT_INITIAL_EPSILON);
            let intervention_cost = env.bool("intervention_cost").unwrap_or(true);
            beta_softmax.map(|beta_softmax| {
                Environment::Gridworld(GridworldEnv {
                    grid,
                    followers,
                    beta_softmax,
                    perturbation_seed,
                    initial_epsilon,
                    intervention_cost,
                })
            })
        }
        Some("synthetic") => {
            let ns = env.usize("num_states");
            let ns = env.required("num_states", ns);
            let na = env.usize("num_actions");
            let na = env.required("num_actions", na);
            let epsilon_r = env.f64("epsilon_r").unwrap_or(0.0);
            let epsilon_p = env.f64("epsilon_p").unwrap_or(0.0);
            let instance_seed = env.u64("instance_seed").unwrap_or(0);
            ns.zip(na).map(|(num_states, num_actions)| {
                Environment::Synthetic(SyntheticEnv {
                    num_states,
                    num_actions,
                    epsilon_r,
                    epsilon_p,
                    instance_seed,
                })
            })
        }
        Some(other) => {
            env.issue("type", format!("unknown environment `{other}` (gridworld, synthetic)"));
            None
        }
        None => None,
    };
    // Unknown-key reporting is only meaningful once the type is known.
    if environment.is_some() {
        env.finish();
    }

    let mut par = Section::new(&root, "parameters", &mut issues);
    let lambda = par.f64("lambda");
    let lambda = par.required("lambda", lambda);
    let discount = par.f64("discount");
    let discount = par.required("discount", discount);
    let eta = par.f64("eta");
    let samples = par.usize("samples");
    let overlap = par.f64("overlap").unwrap_or(2.0);
    let saddle_rounds = par.usize("saddle_rounds").unwrap_or(2000);
    let solve_mode = match par.string("solve_mode").as_deref() {
        None | Some("auto") => SolveMode::Auto,
        Some("equality-dual") => SolveMode::EqualityDual,
        Some("saddle") => SolveMode::Saddle,
        Some(other) => {
            par.issue("solve_mode", format!("unknown mode `{other}` (auto, equality-dual, saddle)"));
            SolveMode::Auto
        }
    };
    let clamp_projection = par.bool("clamp_projection").unwrap_or(false);
    let trajectory_length = par.usize("trajectory_length");
    let source = match par.string("sampling").as_deref() {
        None | Some("occupancy") => SampleSource::Occupancy,
        Some("geometric") => SampleSource::Trajectories(TrajectoryMode::Geometric),
        Some("fixed-length") => match trajectory_length {
            Some(len) if len > 0 => SampleSource::Trajectories(TrajectoryMode::FixedLength(len)),
            _ => {
                par.issue("trajectory_length", "fixed-length sampling needs a positive length");
                SampleSource::Occupancy
            }
        },
        Some(other) => {
            par.issue(
                "sampling",
                format!("unknown sampling `{other}` (occupancy, geometric, fixed-length)"),
            );
            SampleSource::Occupancy
        }
    };
    if trajectory_length.is_some()
        && !matches!(source, SampleSource::Trajectories(TrajectoryMode::FixedLength(_)))
    {
        par.issue("trajectory_length", "only valid with sampling = \"fixed-length\"");
    }
    let weights = match par.string("importance_weights").as_deref() {
        None | Some("true") => ImportanceWeights::True,
        Some("empirical") => ImportanceWeights::Empirical,
        Some(other) => {
            par.issue("importance_weights", format!("unknown weights `{other}` (true, empirical)"));
            ImportanceWeights::True
        }
    };
    let reward_noise = par.f64("reward_noise").unwrap_or(0.0);

    if let Some(kind) = kind {
        if kind == ExperimentKind::Rga {
            par.required("eta", eta);
        } else if par.has("eta") {
            par.issue("eta", "only valid for kind = \"rga\"");
        }
        if kind != ExperimentKind::Rga && par.has("clamp_projection") {
            par.issue("clamp_projection", "only valid for kind = \"rga\"");
        }
        if kind.is_finite() {
            par.required("samples", samples);
        } else {
            for key in [
                "samples",
                "saddle_rounds",
                "sampling",
                "trajectory_length",
                "importance_weights",
                "reward_noise",
            ] {
                if par.has(key) {
                    par.issue(key, "only valid for finite-sample kinds");
                }
            }
        }
    }
    par.finish();

    let mut th = Section::new(&root, "theory", &mut issues);
    let defaults = TheorySettings::default();
    let theory = TheorySettings {
        delta: th.f64("delta").unwrap_or(defaults.delta),
        failure_prob: th.f64("failure_prob").unwrap_or(defaults.failure_prob),
        contraction_target: th.f64("contraction_target").unwrap_or(defaults.contraction_target),
        step: th.u64("step").unwrap_or(defaults.step),
    };
    th.finish();

    let mut sw = Section::new(&root, "sweep", &mut issues);
    let sweep = if sw.table.is_some() {
        let name = sw.string("parameter");
        let name = sw.required("parameter", name);
        let parameter = name.as_deref().and_then(|n| {
            let p = SweepParameter::parse(n);
            if p.is_none() {
                sw.issue("parameter", format!("cannot sweep `{n}`"));
            }
            p
        });
        let values = sw.typed("values", "an array of numbers", |v| {
            v.as_array()?
                .iter()
                .map(|x| match x {
                    toml::Value::Float(f) => Some(*f),
                    toml::Value::Integer(i) => Some(*i as f64),
                    _ => None,
                })
                .collect::<Option<Vec<f64>>>()
        });
        let values = sw.required("values", values);
        sw.finish();
        parameter.zip(values).map(|(parameter, values)| Sweep { parameter, values })
    } else {
        None
    };

    let (Some(kind), Some(environment), Some(seeds), Some(max_iters), Some(lambda), Some(discount)) =
        (kind, environment, seeds, max_iters, lambda, discount)
    else {
        return Err(ConfigErrors(issues));
    };
    let config = ExperimentConfig {
        kind,
        environment,
        seeds,
        max_iters,
        stop_tol,
        converge_tol,
        reference_budget,
        record_gap,
        record_time,
        output_dir,
        lambda,
        discount,
        eta: if kind == ExperimentKind::Rga { eta } else { None },
        samples: if kind.is_finite() { samples } else { None },
        overlap,
        saddle_rounds,
        solve_mode,
        clamp_projection,
        estimator: SampleEstimator {
            source,
            weights,
            reward_noise,
        },
        theory,
        sweep,
    };
    issues.extend(config.range_issues());
    if let Some(sweep) = &config.sweep {
        if sweep.values.is_empty() {
            issues.push(ConfigIssue {
                key: "sweep.values".into(),
                message: "must not be empty".into(),
            });
        }
        for &value in &sweep.values {
            match config.with_sweep_value(sweep.parameter, value) {
                Ok(variant) => issues.extend(variant.range_issues().into_iter().map(|i| ConfigIssue {
                    key: "sweep.values".into(),
                    message: format!("{} = {value}: {}", i.key, i.message),
                })),
                Err(message) => issues.push(ConfigIssue {
                    key: "sweep.values".into(),
                    message,
                }),
            }
        }
    }
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(ConfigErrors(issues))
    }
}

/// Reads a configuration file. A relative grid path is resolved against the
/// file's directory and the grid is parsed eagerly.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut config = parse_config(&text)?;
    if let Environment::Gridworld(env) = &mut config.environment {
        if let Some(grid) = &env.grid {
            let resolved = if grid.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(grid)
            } else {
                grid.clone()
            };
            if let Err(message) = load_grid(Some(&resolved)) {
                return Err(ConfigErrors(vec![ConfigIssue {
                    key: "environment.grid".into(),
                    message,
                }])
                .into());
            }
            env.grid = Some(resolved);
        }
    }
    Ok(config)
}

fn load_grid(path: Option<&Path>) -> Result<GridSpec, String> {
    match path {
        None => Ok(default_grid()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            parse_grid(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

impl ExperimentConfig {
    fn range_issues(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, key: &str, message: &str| {
            if !ok {
                issues.push(ConfigIssue {
                    key: key.into(),
                    message: message.into(),
                });
            }
        };
        check(!self.seeds.is_empty(), "experiment.seeds", "must not be empty");
        check(
            self.seeds.iter().collect::<BTreeSet<_>>().len() == self.seeds.len(),
            "experiment.seeds",
            "must not repeat",
        );
        check(self.max_iters >= 1, "experiment.max_iters", "must be at least 1");
        check(self.stop_tol >= 0.0 && self.stop_tol.is_finite(), "experiment.stop_tol", "must be finite and ≥ 0");
        check(self.converge_tol > 0.0 && self.converge_tol.is_finite(), "experiment.converge_tol", "must be finite and > 0");
        check(self.lambda > 0.0 && self.lambda.is_finite(), "parameters.lambda", "must be finite and > 0");
        check(self.discount > 0.0 && self.discount < 1.0, "parameters.discount", "must lie in (0, 1)");
        if let Some(eta) = self.eta {
            check(eta > 0.0 && eta.is_finite(), "parameters.eta", "must be finite and > 0");
        }
        if let Some(m) = self.samples {
            check(m >= 1, "parameters.samples", "must be at least 1");
        }
        check(self.overlap > 0.0 && self.overlap.is_finite(), "parameters.overlap", "must be finite and > 0");
        check(self.saddle_rounds >= 1, "parameters.saddle_rounds", "must be at least 1");
        let noise = self.estimator.reward_noise;
        check(noise >= 0.0 && noise.is_finite(), "parameters.reward_noise", "must be finite and ≥ 0");
        let th = &self.theory;
        check(th.delta > 0.0 && th.delta.is_finite(), "theory.delta", "must be finite and > 0");
        check(th.failure_prob > 0.0 && th.failure_prob < 1.0, "theory.failure_prob", "must lie in (0, 1)");
        check(
            th.contraction_target > 0.0 && th.contraction_target < 1.0,
            "theory.contraction_target",
            "must lie in (0, 1)",
        );
        check(th.step >= 1, "theory.step", "must be at least 1");
        match &self.environment {
            Environment::Gridworld(g) => {
                check(g.followers >= 1, "environment.followers", "must be at least 1");
                check(
                    g.beta_softmax >= 0.0 && g.beta_softmax.is_finite(),
                    "environment.beta_softmax",
                    "must be finite and ≥ 0",
                );
                check(
                    (0.0..1.0).contains(&g.initial_epsilon),
                    "environment.initial_epsilon",
                    "must lie in [0, 1)",
                );
            }
            Environment::Synthetic(s) => {
                check(s.num_states >= 1, "environment.num_states", "must be at least 1");
                check(s.num_actions >= 1, "environment.num_actions", "must be at least 1");
                check(
                    s.epsilon_r >= 0.0 && s.epsilon_r.is_finite(),
                    "environment.epsilon_r",
                    "must be finite and ≥ 0",
                );
                check(
                    s.epsilon_p >= 0.0 && s.epsilon_p.is_finite(),
                    "environment.epsilon_p",
                    "must be finite and ≥ 0",
                );
            }
        }
        issues
    }

    /// Copy with one swept parameter replaced; the copy carries no sweep.
    pub fn with_sweep_value(&self, parameter: SweepParameter, value: f64) -> Result<Self, String> {
        let mut out = self.clone();
        out.sweep = None;
        let integer = |v: f64| -> Result<u64, String> {
            if v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 {
                Ok(v as u64)
            } else {
                Err(format!("{} needs nonnegative integers, got {v}", parameter.as_str()))
            }
        };
        match (parameter, &mut out.environment) {
            (SweepParameter::Lambda, _) => out.lambda = value,
            (SweepParameter::Eta, _) if out.kind == ExperimentKind::Rga => out.eta = Some(value),
            (SweepParameter::Samples, _) if out.kind.is_finite() => {
                out.samples = Some(integer(value)? as usize)
            }
            (SweepParameter::BetaSoftmax, Environment::Gridworld(g)) => g.beta_softmax = value,
            (SweepParameter::PerturbationSeed, Environment::Gridworld(g)) => {
                g.perturbation_seed = integer(value)?
            }
            (SweepParameter::EpsilonR, Environment::Synthetic(s)) => s.epsilon_r = value,
            (SweepParameter::EpsilonP, Environment::Synthetic(s)) => s.epsilon_p = value,
            _ => {
                return Err(format!(
                    "`{}` cannot be swept for this kind and environment",
                    parameter.as_str()
                ))
            }
        }
        Ok(out)
    }

    /// One configuration per sweep value, each tagged `parameter=value`.
    pub fn families(&self) -> Result<Vec<(Option<String>, ExperimentConfig)>, String> {
        match &self.sweep {
            None => Ok(vec![(None, self.clone())]),
            Some(sweep) => sweep
                .values
                .iter()
                .map(|&v| {
                    let label = format!("{}={v}", sweep.parameter.as_str());
                    Ok((Some(label), self.with_sweep_value(sweep.parameter, v)?))
                })
                .collect(),
        }
    }

    pub fn strategy_params(&self, seed: u64) -> StrategyParams {
        StrategyParams {
            lambda: self.lambda,
            eta: self.eta,
            mode: self.solve_mode,
            clamp_projection: self.clamp_projection,
            samples: self.samples,
            overlap: self.overlap,
            saddle_rounds: self.saddle_rounds,
            seed,
            estimator: self.estimator,
        }
    }

    /// Closed-form constants; only certified (synthetic) environments have them.
    pub fn theorem_constants(&self) -> Option<TheoremConstants> {
        let Environment::Synthetic(env) = &self.environment else {
            return None;
        };
        let inputs = TheoremInputs {
            num_states: env.num_states,
            num_actions: env.num_actions,
            discount: self.discount,
            epsilon_r: env.epsilon_r,
            epsilon_p: env.epsilon_p,
            lambda: self.lambda,
            overlap: self.overlap,
            delta: self.theory.delta,
            failure_prob: self.theory.failure_prob,
            beta: self.theory.contraction_target,
            step: self.theory.step,
        };
        theorem_constants(&inputs).ok()
    }

    /// Response model and starting occupancy for one seed.
    pub fn build_model(&self) -> Result<(Box<dyn ResponseModel>, OccupancyMeasure), String> {
        match &self.environment {
            Environment::Gridworld(env) => {
                let grid = load_grid(env.grid.as_deref())?;
                let ensemble =
                    FollowerEnsemble::new(&grid, env.followers, env.beta_softmax, env.perturbation_seed)
                        .map_err(|e| e.to_string())?;
                let policy = initial_policy_eps_optimal(&grid, self.discount, env.initial_epsilon)
                    .map_err(|e| e.to_string())?;
                let model = GridworldResponse::new(grid, ensemble, self.discount)
                    .with_intervention_cost(env.intervention_cost);
                let d0 = model.occupancy_in_base(&policy).map_err(|e| e.to_string())?;
                Ok((Box::new(model), d0))
            }
            Environment::Synthetic(env) => {
                let model = certified_response(
                    env.num_states,
                    env.num_actions,
                    self.discount,
                    env.epsilon_r,
                    env.epsilon_p,
                    env.instance_seed,
                )
                .map_err(|e| e.to_string())?;
                let d0 = default_initial_occupancy(model.as_ref()).map_err(|e| e.to_string())?;
                Ok((model, d0))
            }
        }
    }
}

/// Largest observed `‖d_{t+1} − d_S‖ / ‖d_t − d_S‖` against `β + slack`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionCheck {
    pub max_ratio: Option<f64>,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedChecks {
    pub converged: bool,
    pub contraction: Option<ContractionCheck>,
    /// Dual of the regularized problem in the environment induced by `d_T`.
    pub dual_norm: Option<DualNormCheck>,
    /// Only evaluated for converged runs with `λ` above the contraction threshold.
    pub stable_gap: Option<StableGap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub trace: RetrainingTrace,
    pub reference: Option<ReferencePoint>,
    pub checks: SeedChecks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: Result<SeedOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct TraceFamily {
    pub label: Option<String>,
    pub config: ExperimentConfig,
    pub constants: Option<TheoremConstants>,
    /// Seed-ordered.
    pub runs: Vec<SeedRun>,
}

impl TraceFamily {
    pub fn successes(&self) -> impl Iterator<Item = (u64, &SeedOutcome)> {
        self.runs
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|o| (r.seed, o)))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub families: Vec<TraceFamily>,
}

/// Runs every `(family, seed)` pair on a pool of `jobs` threads (0 selects
/// the available parallelism). Per-seed failures are recorded; the call only
/// fails when no seed succeeds.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput, ExperimentError> {
    let families = config
        .families()
        .map_err(|message| ConfigErrors(vec![ConfigIssue { key: "sweep.values".into(), message }]))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ExperimentError::ThreadPool(e.to_string()))?;
    let tasks: Vec<(usize, u64)> = (0..families.len())
        .flat_map(|f| config.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let mut results: Vec<SeedRun> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(f, seed)| SeedRun {
                seed,
                outcome: run_seed(&families[f].1, seed),
            })
            .collect()
    });

    let per_family = config.seeds.len();
    let mut out = Vec::with_capacity(families.len());
    for (label, family_config) in families.into_iter().rev() {
        let runs = results.split_off(results.len() - per_family);
        out.push(TraceFamily {
            constants: family_config.theorem_constants(),
            label,
            config: family_config,
            runs,
        });
    }
    out.reverse();

    if out.iter().all(|f| f.successes().next().is_none()) {
        let errors = out
            .iter()
            .flat_map(|f| {
                f.runs.iter().filter_map(move |r| {
                    r.outcome.as_ref().err().map(|e| match &f.label {
                        Some(l) => format!("{l} seed {}: {e}", r.seed),
                        None => format!("seed {}: {e}", r.seed),
                    })
                })
            })
            .collect();
        return Err(ExperimentError::AllSeedsFailed(errors));
    }
    Ok(ExperimentOutput { families: out })
}

/// The sequential pipeline of one seed.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, String> {
    let (model, d0) = config.build_model()?;
    let model = model.as_ref();
    let reference = if config.reference_budget > 0 {
        Some(
            reference_stable_point(model, d0.clone(), config.lambda, config.solve_mode, config.reference_budget)
                .map_err(|e| format!("reference stable point: {e}"))?,
        )
    } else {
        None
    };
    let strategy = StrategyRegistry::with_defaults()
        .create(config.kind.as_str(), &config.strategy_params(seed))
        .map_err(|e| e.to_string())?;
    let mut options = RunOptions::new(config.max_iters, config.stop_tol);
    options.reference = reference.as_ref().map(|r| r.occupancy.clone());
    options.record_gap = config.record_gap;
    options.record_time = config.record_time;
    let trace = run_retraining(strategy.as_ref(), model, d0, &options).map_err(|e| e.to_string())?;
    let checks = seed_checks(config, model, &trace, reference.as_ref())?;
    Ok(SeedOutcome {
        trace,
        reference,
        checks,
    })
}

fn seed_checks(
    config: &ExperimentConfig,
    model: &dyn ResponseModel,
    trace: &RetrainingTrace,
    reference: Option<&ReferencePoint>,
) -> Result<SeedChecks, String> {
    let converged = trace.converged
        || trace
            .final_step_distance()
            .is_some_and(|d| d < config.converge_tol);
    let constants = config.theorem_constants();

    let contraction = match (&constants, reference) {
        (Some(c), Some(r)) if config.kind == ExperimentKind::Rpo && c.rpo.beta < 1.0 => {
            let distances: Vec<f64> = trace.iterates.iter().map(|d| d.distance(&r.occupancy)).collect();
            let max_ratio = distances
                .windows(2)
                .filter(|w| w[0] > CONTRACTION_FLOOR)
                .map(|w| w[1] / w[0])
                .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))));
            let bound = c.rpo.beta + CONTRACTION_SLACK;
            Some(ContractionCheck {
                max_ratio,
                bound,
                holds: max_ratio.is_none_or(|m| m <= bound),
            })
        }
        _ => None,
    };

    let last = trace.last();
    let environment = model.respond(last).map_err(|e| e.to_string())?;
    let dual_norm = solve_regularized(&environment, config.lambda, config.solve_mode)
        .ok()
        .map(|s| check_dual_norm(&s.h, environment.num_states(), environment.discount));

    let stable_gap = match &constants {
        Some(c) if converged && config.lambda >= c.rpo.lambda_threshold => Some(
            stable_gap_unregularized(model, last, config.lambda).map_err(|e| e.to_string())?,
        ),
        _ => None,
    };

    Ok(SeedChecks {
        converged,
        contraction,
        dual_norm,
        stable_gap,
    })
}

fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

/// One row per `(seed, iteration)` of the successful runs.
pub fn write_trace_csv<W: Write>(family: &TraceFamily, mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (seed, outcome) in family.successes() {
        for r in &outcome.trace.records {
            writeln!(
                out,
                "{seed},{},{},{},{},{},{}",
                r.iteration,
                fmt_float(r.normalized_step_distance),
                fmt_opt(r.distance_to_stable),
                fmt_opt(r.subopt_gap),
                fmt_float(r.min_primal_entry),
                fmt_opt(r.wall_ms),
            )?;
        }
    }
    out.flush()
}

/// Long-format dump of every iterate, `d₀` included as iteration 0.
pub fn write_iterates_csv<W: Write>(family: &TraceFamily, mut out: W) -> io::Result<()> {
    writeln!(out, "{ITERATE_HEADER}")?;
    for (seed, outcome) in family.successes() {
        for (t, d) in outcome.trace.iterates.iter().enumerate() {
            for ((s, a), v) in d.values().indexed_iter() {
                writeln!(out, "{seed},{t},{s},{a},{}", fmt_float(*v))?;
            }
        }
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation over `√count`; 0 for a single seed.
    pub stderr: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(Self {
            count: values.len(),
            mean,
            stderr,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub status: &'static str,
    pub error: Option<String>,
    pub iterations: Option<usize>,
    pub final_step_distance: Option<f64>,
    pub final_distance_to_stable: Option<f64>,
    pub reference_converged: Option<bool>,
    pub checks: Option<SeedChecks>,
}

/// `None` when no successful seed could evaluate the check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdicts {
    pub converged: bool,
    pub contraction_respected: Option<bool>,
    pub dual_norm_bound_respected: Option<bool>,
    pub stable_gap_within_theory: Option<bool>,
    pub stable_gap_within_regularization: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub format_version: u32,
    pub crate_version: &'static str,
    pub family: Option<String>,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    pub final_step_distance: Option<Aggregate>,
    pub final_distance_to_stable: Option<Aggregate>,
    pub theorem_constants: Option<TheoremConstants>,
    pub verdicts: Verdicts,
}

fn all_of(values: impl Iterator<Item = bool>) -> Option<bool> {
    values.fold(None, |acc, v| Some(acc.unwrap_or(true) && v))
}

pub fn summarize(family: &TraceFamily) -> Result<Summary, ExperimentError> {
    if family.successes().next().is_none() {
        return Err(ExperimentError::EmptyTraces);
    }
    let runs: Vec<RunSummary> = family
        .runs
        .iter()
        .map(|run| match &run.outcome {
            Ok(o) => RunSummary {
                seed: run.seed,
                status: "ok",
                error: None,
                iterations: Some(o.trace.records.len()),
                final_step_distance: o.trace.final_step_distance(),
                final_distance_to_stable: o.trace.records.last().and_then(|r| r.distance_to_stable),
                reference_converged: o.reference.as_ref().map(|r| r.converged),
                checks: Some(o.checks.clone()),
            },
            Err(e) => RunSummary {
                seed: run.seed,
                status: "failed",
                error: Some(e.clone()),
                iterations: None,
                final_step_distance: None,
                final_distance_to_stable: None,
                reference_converged: None,
                checks: None,
            },
        })
        .collect();
    let finals: Vec<f64> = runs.iter().filter_map(|r| r.final_step_distance).collect();
    let to_stable: Vec<f64> = runs.iter().filter_map(|r| r.final_distance_to_stable).collect();
    let checks: Vec<&SeedChecks> = family.successes().map(|(_, o)| &o.checks).collect();
    let verdicts = Verdicts {
        converged: checks.iter().all(|c| c.converged),
        contraction_respected: all_of(checks.iter().filter_map(|c| c.contraction.map(|x| x.holds))),
        dual_norm_bound_respected: all_of(checks.iter().filter_map(|c| c.dual_norm.map(|x| x.holds))),
        stable_gap_within_theory: all_of(
            checks
                .iter()
                .filter_map(|c| c.stable_gap.as_ref().and_then(StableGap::within_theory)),
        ),
        stable_gap_within_regularization: all_of(
            checks
                .iter()
                .filter_map(|c| c.stable_gap.as_ref().map(StableGap::within_regularization)),
        ),
    };
    Ok(Summary {
        format_version: SUMMARY_FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION"),
        family: family.label.clone(),
        config: family.config.clone(),
        seeds: family.runs.iter().map(|r| r.seed).collect(),
        runs,
        final_step_distance: Aggregate::of(&finals),
        final_distance_to_stable: Aggregate::of(&to_stable),
        theorem_constants: family.constants.clone(),
        verdicts,
    })
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut writer = BufWriter::new(file);
    body(&mut writer).map_err(|e| io_error(path, e))
}

pub fn emit_trace_csv(family: &TraceFamily, path: &Path) -> Result<(), ExperimentError> {
    if family.successes().next().is_none() {
        return Err(ExperimentError::EmptyTraces);
    }
    write_file(path, |w| write_trace_csv(family, w))
}

pub fn emit_summary_json(summary: &Summary, path: &Path) -> Result<(), ExperimentError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, summary).map_err(io::Error::other)?;
        writeln!(w)?;
        w.flush()
    })
}

/// Writes `traces.csv`, `summary.json` and optionally `iterates.csv` for each
/// family: into `dir` itself without a sweep, else into `dir/<label>/`.
/// Summaries are built first so that nothing is written for an empty family.
pub fn write_outputs(
    output: &ExperimentOutput,
    dir: &Path,
    dump_iterates: bool,
) -> Result<Vec<PathBuf>, ExperimentError> {
    let summaries = output
        .families
        .iter()
        .map(summarize)
        .collect::<Result<Vec<_>, _>>()?;
    let mut written = Vec::new();
    for (family, summary) in output.families.iter().zip(&summaries) {
        let target = match &family.label {
            Some(label) => dir.join(label),
            None => dir.to_path_buf(),
        };
        fs::create_dir_all(&target).map_err(|e| io_error(&target, e))?;
        let csv = target.join("traces.csv");
        emit_trace_csv(family, &csv)?;
        written.push(csv);
        let json = target.join("summary.json");
        emit_summary_json(summary, &json)?;
        written.push(json);
        if dump_iterates {
            let iterates = target.join("iterates.csv");
            write_file(&iterates, |w| write_iterates_csv(family, w))?;
            written.push(iterates);
        }
    }
    Ok(written)
}
