//! Two-team gridworld: agent A₁ steers an actor while `n` followers, each
//! planning on its own perturbed copy of the grid, may override the move.
//!
//! Followers are aggregated into one Boltzmann policy over
//! `{no-op, force-L, force-R, force-U, force-D}` computed from their averaged
//! optimal Q-values, which becomes A₁'s policy-dependent environment.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Mutex;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::mdp::{
    occupancy_from_policy, optimal_unregularized, policy_from_occupancy, OccupancyMeasure, Policy,
    TabularMdp,
};
use crate::response::{ResponseError, ResponseModel};
use crate::synthetic::derive_seed;

pub const BLANK_COST: f64 = -0.01;
pub const FIRE_COST: f64 = -0.02;
pub const HOLE_COST: f64 = -0.5;
pub const GOAL_REWARD: f64 = 1.0;
pub const INTERVENTION_COST: f64 = -0.05;
pub const KEEP_PROBABILITY: f64 = 0.7;
pub const DEFAULT_FOLLOWERS: usize = 3;
/// Follower perturbation seed used by the shipped experiments.
pub const DEFAULT_PERTURBATION_SEED: u64 = 10;
/// Mixing weight toward uniform in the leader's starting policy.
pub const DEFAULT_INITIAL_EPSILON: f64 = 0.1;
pub const VALUE_ITERATION_TOL: f64 = 1e-10;
pub const VALUE_ITERATION_CAP: usize = 100_000;

/// Stand-in layout; the original figure's placement is not recoverable.
pub const DEFAULT_GRID: &str = include_str!("../assets/default_grid.txt");

const CACHE_CAPACITY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Cell {
    Start,
    Goal,
    Blank,
    Fire,
    Hole,
}

impl Cell {
    fn from_char(c: char) -> Option<Self> {
        match c {
            'S' => Some(Cell::Start),
            'G' => Some(Cell::Goal),
            '.' => Some(Cell::Blank),
            'F' => Some(Cell::Fire),
            'H' => Some(Cell::Hole),
            _ => None,
        }
    }

    fn as_char(self) -> char {
        match self {
            Cell::Start => 'S',
            Cell::Goal => 'G',
            Cell::Blank => '.',
            Cell::Fire => 'F',
            Cell::Hole => 'H',
        }
    }

    /// Reward for entering the cell.
    pub fn cost(self) -> f64 {
        match self {
            Cell::Start | Cell::Blank => BLANK_COST,
            Cell::Fire => FIRE_COST,
            Cell::Hole => HOLE_COST,
            Cell::Goal => GOAL_REWARD,
        }
    }
}

/// Actor moves, in A₁'s action order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];
}

/// Follower actions: index 0 is no-op, `1 + dir` forces `dir`.
pub const FOLLOWER_ACTIONS: usize = 5;
pub const NOOP: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("row {row} has {found} cells, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },
    #[error("unknown cell {found:?} at ({row}, {col})")]
    UnknownCell { row: usize, col: usize, found: char },
    #[error("grid is empty")]
    Empty,
    #[error("grid has no start cell")]
    NoStart,
    #[error("grid needs exactly one goal cell, found {0}")]
    Goals(usize),
    #[error("invalid gridworld parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct GridSpec {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
}

impl GridSpec {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, index: usize) -> Cell {
        self.cells[index]
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn goal(&self) -> usize {
        self.cells.iter().position(|c| *c == Cell::Goal).expect("validated grid has a goal")
    }

    pub fn starts(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i] == Cell::Start).collect()
    }

    /// Deterministic move with wall clamping; the goal absorbs.
    pub fn step(&self, state: usize, dir: Direction) -> usize {
        if self.cells[state] == Cell::Goal {
            return state;
        }
        let (row, col) = (state / self.width, state % self.width);
        let (row, col) = match dir {
            Direction::Left => (row, col.saturating_sub(1)),
            Direction::Right => (row, (col + 1).min(self.width - 1)),
            Direction::Up => (row.saturating_sub(1), col),
            Direction::Down => ((row + 1).min(self.height - 1), col),
        };
        self.index(row, col)
    }

    /// Reward collected on `state → next`; zero once absorbed at the goal.
    pub fn transition_reward(&self, state: usize, next: usize) -> f64 {
        if self.cells[state] == Cell::Goal {
            0.0
        } else {
            self.cells[next].cost()
        }
    }

    fn validate(self) -> Result<Self, GridError> {
        if self.cells.is_empty() {
            return Err(GridError::Empty);
        }
        if !self.cells.contains(&Cell::Start) {
            return Err(GridError::NoStart);
        }
        let goals = self.cells.iter().filter(|c| **c == Cell::Goal).count();
        if goals != 1 {
            return Err(GridError::Goals(goals));
        }
        Ok(self)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.cells.chunks(self.width) {
            let line: String = row.iter().map(|c| c.as_char()).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Rectangular grid of `S G . F H`, one row per line.
pub fn parse_grid(text: &str) -> Result<GridSpec, GridError> {
    let rows: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    let rows: &[&str] = match rows.iter().rposition(|r| !r.is_empty()) {
        Some(last) => &rows[..=last],
        None => return Err(GridError::Empty),
    };
    let width = rows[0].chars().count();
    let mut cells = Vec::with_capacity(width * rows.len());
    for (row, line) in rows.iter().enumerate() {
        let found = line.chars().count();
        if found != width {
            return Err(GridError::Ragged { row, found, expected: width });
        }
        for (col, c) in line.chars().enumerate() {
            cells.push(Cell::from_char(c).ok_or(GridError::UnknownCell { row, col, found: c })?);
        }
    }
    GridSpec { width, height: rows.len(), cells }.validate()
}

pub fn default_grid() -> GridSpec {
    parse_grid(DEFAULT_GRID).expect("shipped grid is valid")
}

/// Each non-terminal cell keeps its type with probability 0.7, otherwise it is
/// redrawn uniformly from `{., F, H}`.
pub fn perturb_grid(grid: &GridSpec, seed: u64) -> GridSpec {
    const POOL: [Cell; 3] = [Cell::Blank, Cell::Fire, Cell::Hole];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = grid
        .cells
        .iter()
        .map(|&cell| match cell {
            Cell::Start | Cell::Goal => cell,
            _ if rng.random::<f64>() < KEEP_PROBABILITY => cell,
            _ => POOL[rng.random_range(0..POOL.len())],
        })
        .collect();
    GridSpec { cells, ..grid.clone() }
}

/// Single-agent MDP over the four moves with `r(s,a)` the successor's reward.
pub fn single_agent_mdp(grid: &GridSpec, discount: f64) -> TabularMdp {
    let ns = grid.num_cells();
    let mut transitions = Array3::zeros((ns, 4, ns));
    let mut rewards = Array2::zeros((ns, 4));
    for s in 0..ns {
        for (a, dir) in Direction::ALL.into_iter().enumerate() {
            let next = grid.step(s, dir);
            transitions[[s, a, next]] = 1.0;
            rewards[[s, a]] = grid.transition_reward(s, next);
        }
    }
    TabularMdp {
        transitions,
        rewards,
        discount,
        initial: start_distribution(grid),
    }
}

fn start_distribution(grid: &GridSpec) -> Array1<f64> {
    let starts = grid.starts();
    let mut rho = Array1::zeros(grid.num_cells());
    for s in &starts {
        rho[*s] = 1.0 / starts.len() as f64;
    }
    rho
}

/// `(1−ε) π* + ε · uniform` for the single-agent optimal `π*`.
pub fn initial_policy_eps_optimal(
    grid: &GridSpec,
    discount: f64,
    epsilon: f64,
) -> Result<Policy, GridError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(GridError::Parameter(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    let mdp = single_agent_mdp(grid, discount);
    let optimal = optimal_unregularized(&mdp).map_err(|e| GridError::Parameter(e.to_string()))?;
    Ok(Policy::uniform(grid.num_cells(), 4).mix(&optimal.policy, 1.0 - epsilon))
}

/// Optimal follower Q-values (`S × 5`) on `perturbed`, given A₁'s `policy`.
pub fn follower_q(
    perturbed: &GridSpec,
    policy: &Policy,
    discount: f64,
) -> Result<Array2<f64>, ResponseError> {
    let ns = perturbed.num_cells();
    if policy.dim() != (ns, 4) {
        return Err(ResponseError::Parameter(format!(
            "leader policy has shape {:?}, expected ({ns}, 4)",
            policy.dim()
        )));
    }
    let succ: Vec<[usize; 4]> = (0..ns)
        .map(|s| Direction::ALL.map(|dir| perturbed.step(s, dir)))
        .collect();
    let goal = perturbed.goal();
    let mut values = Array1::<f64>::zeros(ns);
    let mut q = Array2::<f64>::zeros((ns, FOLLOWER_ACTIONS));
    for _ in 0..VALUE_ITERATION_CAP {
        for s in 0..ns {
            if s == goal {
                // Absorbing: every follower action is free and worthless.
                q.row_mut(s).fill(discount * values[s]);
                continue;
            }
            let backup = |next: usize| perturbed.transition_reward(s, next) + discount * values[next];
            let mut noop = 0.0;
            for (a, &next) in succ[s].iter().enumerate() {
                let target = backup(next);
                noop += policy[[s, a]] * target;
                q[[s, 1 + a]] = INTERVENTION_COST + target;
            }
            q[[s, NOOP]] = noop;
        }
        let mut residual: f64 = 0.0;
        for s in 0..ns {
            let best = q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((best - values[s]).abs());
            values[s] = best;
        }
        if residual <= VALUE_ITERATION_TOL {
            return Ok(q);
        }
    }
    Err(ResponseError::Planning(format!(
        "follower value iteration exceeded {VALUE_ITERATION_CAP} sweeps"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FollowerEnsemble {
    pub grids: Vec<GridSpec>,
    pub beta: f64,
    pub seed: u64,
}

impl FollowerEnsemble {
    /// `n` followers on independently perturbed copies of `grid`.
    pub fn new(grid: &GridSpec, n: usize, beta: f64, seed: u64) -> Result<Self, GridError> {
        if n == 0 {
            return Err(GridError::Parameter("need at least one follower".into()));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(GridError::Parameter(format!("softmax temperature must be ≥ 0, got {beta}")));
        }
        let grids = (0..n).map(|j| perturb_grid(grid, derive_seed(seed, j as u64))).collect();
        Ok(Self { grids, beta, seed })
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// `π₂(a|s) ∝ exp(β Q̄(s, a))` for the followers' mean Q-values.
pub fn aggregate_softmax_policy(
    ensemble: &FollowerEnsemble,
    policy: &Policy,
    discount: f64,
) -> Result<Policy, ResponseError> {
    let mut mean: Option<Array2<f64>> = None;
    for grid in &ensemble.grids {
        let q = follower_q(grid, policy, discount)?;
        mean = Some(match mean {
            Some(acc) => acc + q,
            None => q,
        });
    }
    let mean = mean.ok_or_else(|| ResponseError::Parameter("empty follower ensemble".into()))?
        / ensemble.len() as f64;
    Ok(softmax_rows(&mean, ensemble.beta))
}

fn softmax_rows(q: &Array2<f64>, beta: f64) -> Policy {
    let mut probs = q.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (beta * (v - max)).exp());
        let total = row.sum();
        row /= total;
    }
    Policy::from_rows_unchecked(probs)
}

/// A₁'s MDP when the followers act with `π₂`.
pub fn leader_mdp(
    grid: &GridSpec,
    followers: &Policy,
    discount: f64,
    charge_interventions: bool,
) -> TabularMdp {
    let ns = grid.num_cells();
    let mut transitions = Array3::zeros((ns, 4, ns));
    let mut rewards = Array2::zeros((ns, 4));
    for s in 0..ns {
        let forced: f64 = 1.0 - followers[[s, NOOP]];
        let absorbed = grid.cell(s) == Cell::Goal;
        for (a, dir) in Direction::ALL.into_iter().enumerate() {
            let own = grid.step(s, dir);
            transitions[[s, a, own]] += followers[[s, NOOP]];
            rewards[[s, a]] += followers[[s, NOOP]] * grid.transition_reward(s, own);
            for (f, forced_dir) in Direction::ALL.into_iter().enumerate() {
                let next = grid.step(s, forced_dir);
                let w = followers[[s, 1 + f]];
                transitions[[s, a, next]] += w;
                rewards[[s, a]] += w * grid.transition_reward(s, next);
            }
            if charge_interventions && !absorbed {
                rewards[[s, a]] += forced * INTERVENTION_COST;
            }
        }
    }
    TabularMdp {
        transitions,
        rewards,
        discount,
        initial: start_distribution(grid),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Followers {
    Softmax(FollowerEnsemble),
    /// Followers never intervene.
    Disabled,
}

/// A₁'s environment as a function of its deployed occupancy.
#[derive(Debug)]
pub struct GridworldResponse {
    grid: GridSpec,
    followers: Followers,
    charge_interventions: bool,
    base: TabularMdp,
    cache: Mutex<VecDeque<(u64, Policy, TabularMdp)>>,
}

impl GridworldResponse {
    pub fn new(grid: GridSpec, ensemble: FollowerEnsemble, discount: f64) -> Self {
        Self::build(grid, Followers::Softmax(ensemble), discount)
    }

    /// `π₂(no-op) ≡ 1`: reduces to the single-agent problem.
    pub fn single_agent(grid: GridSpec, discount: f64) -> Self {
        Self::build(grid, Followers::Disabled, discount)
    }

    fn build(grid: GridSpec, followers: Followers, discount: f64) -> Self {
        let base = single_agent_mdp(&grid, discount);
        Self {
            grid,
            followers,
            charge_interventions: true,
            base,
            cache: Mutex::new(VecDeque::with_capacity(CACHE_CAPACITY)),
        }
    }

    /// Whether A₁'s reward includes the expected intervention cost.
    pub fn with_intervention_cost(mut self, charge: bool) -> Self {
        self.charge_interventions = charge;
        self
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn follower_policy(&self, policy: &Policy) -> Result<Policy, ResponseError> {
        match &self.followers {
            Followers::Softmax(ensemble) => {
                aggregate_softmax_policy(ensemble, policy, self.base.discount)
            }
            Followers::Disabled => {
                let mut probs = Array2::zeros((self.grid.num_cells(), FOLLOWER_ACTIONS));
                probs.column_mut(NOOP).fill(1.0);
                Ok(Policy::from_rows_unchecked(probs))
            }
        }
    }

    /// Environment induced by deploying `policy`.
    pub fn respond_to_policy(&self, policy: &Policy) -> Result<TabularMdp, ResponseError> {
        let key = policy_key(policy);
        {
            let cache = self.cache.lock().expect("response cache poisoned");
            if let Some((_, _, mdp)) = cache.iter().find(|(k, p, _)| *k == key && p == policy) {
                return Ok(mdp.clone());
            }
        }
        let followers = self.follower_policy(policy)?;
        let mdp = leader_mdp(&self.grid, &followers, self.base.discount, self.charge_interventions);
        let mut cache = self.cache.lock().expect("response cache poisoned");
        if cache.len() == CACHE_CAPACITY {
            cache.pop_front();
        }
        cache.push_back((key, policy.clone(), mdp.clone()));
        Ok(mdp)
    }

    /// Occupancy of `policy` in the single-agent base model.
    pub fn occupancy_in_base(&self, policy: &Policy) -> Result<OccupancyMeasure, ResponseError> {
        Ok(occupancy_from_policy(&self.base, policy)?)
    }
}

fn policy_key(policy: &Policy) -> u64 {
    let mut hasher = DefaultHasher::new();
    for p in policy.iter() {
        p.to_bits().hash(&mut hasher);
    }
    hasher.finish()
}

impl ResponseModel for GridworldResponse {
    fn name(&self) -> &str {
        "gridworld"
    }

    fn base(&self) -> &TabularMdp {
        &self.base
    }

    fn respond(&self, d: &OccupancyMeasure) -> Result<TabularMdp, ResponseError> {
        self.respond_to_policy(&policy_from_occupancy(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::validate_mdp;

    #[test]
    fn parse_examples() {
        let g = parse_grid("SG").unwrap();
        assert_eq!((g.width(), g.height()), (2, 1));
        let g = parse_grid("S.\n.G\n").unwrap();
        assert_eq!((g.width(), g.height(), g.goal()), (2, 2, 3));
        assert_eq!(
            parse_grid("SX"),
            Err(GridError::UnknownCell { row: 0, col: 1, found: 'X' })
        );
        assert!(matches!(parse_grid("S.\n.G."), Err(GridError::Ragged { row: 1, .. })));
        assert_eq!(parse_grid("..\n.G"), Err(GridError::NoStart));
        assert_eq!(parse_grid("SG\nG."), Err(GridError::Goals(2)));
        assert_eq!(parse_grid("S.\r\n.G\r\n").unwrap().to_string(), "S.\n.G\n");
    }

    #[test]
    fn moves() {
        let g = parse_grid("S..\n...\n..G").unwrap();
        assert_eq!(g.step(0, Direction::Up), 0);
        assert_eq!(g.step(0, Direction::Left), 0);
        assert_eq!(g.step(4, Direction::Right), 5);
        assert_eq!(g.step(4, Direction::Down), 7);
        for dir in Direction::ALL {
            assert_eq!(g.step(8, dir), 8);
        }
    }

    #[test]
    fn perturbation_keeps_terminals_and_is_reproducible() {
        let g = default_grid();
        let a = perturb_grid(&g, 11);
        assert_eq!(a, perturb_grid(&g, 11));
        assert_eq!(a.starts(), g.starts());
        assert_eq!(a.goal(), g.goal());
        let tiny = parse_grid("SG").unwrap();
        assert_eq!(perturb_grid(&tiny, 3), tiny);
    }

    #[test]
    fn two_state_follower_q_by_hand() {
        // From S every move that reaches G pays +1; then G absorbs at 0.
        let g = parse_grid("SG").unwrap();
        let right = Policy::deterministic(&[1, 1], 4);
        let gamma = 0.9;
        let q = follower_q(&g, &right, gamma).unwrap();
        // V(S) = 1 via the leader's own move.
        assert!((q[[0, NOOP]] - 1.0).abs() < 1e-9);
        assert!((q[[0, 2]] - (INTERVENTION_COST + 1.0)).abs() < 1e-9);
        // Forcing left stays at S: -0.05 - 0.01 + γ V(S).
        assert!((q[[0, 1]] - (INTERVENTION_COST + BLANK_COST + gamma)).abs() < 1e-9);
        assert!(q.row(1).iter().all(|v| v.abs() < 1e-12));

        let myopic = follower_q(&g, &right, 0.0).unwrap();
        assert!((myopic[[0, 1]] - (INTERVENTION_COST + BLANK_COST)).abs() < 1e-12);
    }

    #[test]
    fn followers_do_not_intervene_on_an_optimal_path() {
        let g = parse_grid("S.\n.G").unwrap();
        let pi = initial_policy_eps_optimal(&g, 0.9, 0.0).unwrap();
        let q = follower_q(&g, &pi, 0.9).unwrap();
        let greedy = (0..FOLLOWER_ACTIONS)
            .fold(0, |best, a| if q[[0, a]] > q[[0, best]] { a } else { best });
        assert_eq!(greedy, NOOP);
    }

    #[test]
    fn softmax_limits() {
        let g = default_grid();
        let pi = Policy::uniform(g.num_cells(), 4);
        let flat = FollowerEnsemble::new(&g, 3, 0.0, 1).unwrap();
        let p = aggregate_softmax_policy(&flat, &pi, 0.9).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));

        let sharp = FollowerEnsemble::new(&g, 3, 1e4, 1).unwrap();
        let p = aggregate_softmax_policy(&sharp, &pi, 0.9).unwrap();
        let s = g.starts()[0];
        let top = p.row(s).iter().copied().fold(0.0, f64::max);
        assert!(top >= 1.0 - 1e-6);

        let twins = FollowerEnsemble { grids: vec![flat.grids[0].clone(); 2], beta: 2.0, seed: 0 };
        let single = FollowerEnsemble { grids: vec![flat.grids[0].clone()], beta: 2.0, seed: 0 };
        let a = aggregate_softmax_policy(&twins, &pi, 0.9).unwrap();
        let b = aggregate_softmax_policy(&single, &pi, 0.9).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn single_agent_reduction_is_exact() {
        let g = default_grid();
        let model = GridworldResponse::single_agent(g.clone(), 0.9);
        let d = model.occupancy_in_base(&Policy::uniform(g.num_cells(), 4)).unwrap();
        let mdp = model.respond(&d).unwrap();
        let base = single_agent_mdp(&g, 0.9);
        assert_eq!(mdp.transitions, base.transitions);
        assert_eq!(mdp.rewards, base.rewards);
    }

    #[test]
    fn zero_temperature_response_ignores_deployment() {
        let g = default_grid();
        let ensemble = FollowerEnsemble::new(&g, 3, 0.0, 5).unwrap();
        let model = GridworldResponse::new(g.clone(), ensemble, 0.9);
        let a = model.respond_to_policy(&Policy::uniform(g.num_cells(), 4)).unwrap();
        let b = model
            .respond_to_policy(&initial_policy_eps_optimal(&g, 0.9, 0.1).unwrap())
            .unwrap();
        assert_eq!(a.transitions, b.transitions);
        assert_eq!(a.rewards, b.rewards);
        assert!(validate_mdp(&a).is_valid());
    }

    #[test]
    fn eps_optimal_on_two_cells() {
        let g = parse_grid("SG").unwrap();
        let pi = initial_policy_eps_optimal(&g, 0.9, 0.1).unwrap();
        assert!((pi[[0, 1]] - 0.925).abs() < 1e-12);
        let exact = initial_policy_eps_optimal(&g, 0.9, 0.0).unwrap();
        assert_eq!(exact[[0, 1]], 1.0);
        assert!(initial_policy_eps_optimal(&g, 0.9, 1.0).is_err());
    }

    #[test]
    fn cache_returns_identical_environments() {
        let g = default_grid();
        let model = GridworldResponse::new(g.clone(), FollowerEnsemble::new(&g, 3, 5.0, 2).unwrap(), 0.9);
        let pi = initial_policy_eps_optimal(&g, 0.9, 0.1).unwrap();
        let first = model.respond_to_policy(&pi).unwrap();
        let second = model.respond_to_policy(&pi).unwrap();
        assert_eq!(first, second);
        assert!(validate_mdp(&first).is_valid());
    }
}
