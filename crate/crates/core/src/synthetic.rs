//! Seeded generators for random tabular instances and probe occupancies.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mdp::{occupancy_from_policy, OccupancyMeasure, Policy, TabularMdp};
use crate::response::{
    make_linear_reward_response, make_mixture_transition_response, ResponseError, ResponseModel,
    SplitResponse,
};

/// Flat-Dirichlet sample via normalized exponentials.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

pub fn random_transitions<R: Rng + ?Sized>(
    rng: &mut R,
    num_states: usize,
    num_actions: usize,
) -> Array3<f64> {
    let mut p = Array3::zeros((num_states, num_actions, num_states));
    for s in 0..num_states {
        for a in 0..num_actions {
            for (next, v) in random_simplex(rng, num_states).into_iter().enumerate() {
                p[[s, a, next]] = v;
            }
        }
    }
    p
}

/// Random MDP with Dirichlet(1) rows, rewards uniform on `[0, 1]` and a
/// uniform start distribution.
pub fn random_mdp(num_states: usize, num_actions: usize, discount: f64, seed: u64) -> TabularMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions = random_transitions(&mut rng, num_states, num_actions);
    let rewards = Array2::from_shape_fn((num_states, num_actions), |_| rng.random::<f64>());
    let initial = Array1::from_elem(num_states, 1.0 / num_states as f64);
    TabularMdp {
        transitions,
        rewards,
        discount,
        initial,
    }
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize) -> Policy {
    let mut probs = Array2::zeros((num_states, num_actions));
    for s in 0..num_states {
        for (a, v) in random_simplex(rng, num_actions).into_iter().enumerate() {
            probs[[s, a]] = v;
        }
    }
    Policy::from_rows_unchecked(probs)
}

/// Occupancies of `count` pairs of random policies under `mdp`.
pub fn random_occupancy_pairs(
    mdp: &TabularMdp,
    count: usize,
    seed: u64,
) -> Vec<(OccupancyMeasure, OccupancyMeasure)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    (0..count)
        .map(|_| {
            let a = random_policy(&mut rng, ns, na);
            let b = random_policy(&mut rng, ns, na);
            (
                occupancy_from_policy(mdp, &a).expect("valid random policy"),
                occupancy_from_policy(mdp, &b).expect("valid random policy"),
            )
        })
        .collect()
}

/// Random instance whose response carries an exact `(ε_r, ε_p)` certificate:
/// rewards move linearly around the uniform policy's occupancy and transitions
/// mix toward a second random kernel along the all-ones direction.
pub fn certified_response(
    num_states: usize,
    num_actions: usize,
    discount: f64,
    epsilon_r: f64,
    epsilon_p: f64,
    seed: u64,
) -> Result<Box<dyn ResponseModel>, ResponseError> {
    let base = random_mdp(num_states, num_actions, discount, seed);
    let reference = occupancy_from_policy(&base, &Policy::uniform(num_states, num_actions))?;
    let rewards = make_linear_reward_response(base.clone(), epsilon_r, &reference)?;
    if epsilon_p == 0.0 {
        return Ok(Box::new(rewards));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let alternative = random_transitions(&mut rng, num_states, num_actions);
    let direction = Array2::from_elem(
        (num_states, num_actions),
        1.0 / ((num_states * num_actions) as f64).sqrt(),
    );
    let transitions = make_mixture_transition_response(base, alternative, epsilon_p, direction)?;
    Ok(Box::new(SplitResponse::new(rewards, transitions)))
}

/// splitmix64 finalizer; derives independent stream seeds from `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
