//! Seeded random MDP/policy/confidence generators shared by the verification
//! suites and the test oracles.

use rand::Rng;

use crate::mdp::{FiniteMdp, TabularPolicy};
use crate::residual::ConfidenceTable;
use crate::solver::projection::project_box_hyperplane;

/// Random distribution row with entries at least `floor` before normalizing;
/// the row sums to exactly 1.0 after a compensating adjustment.
pub fn random_distribution<R: Rng>(rng: &mut R, n: usize, floor: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + floor).collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= sum);
    let fix: f64 = row.iter().sum();
    row[0] += 1.0 - fix;
    row
}

/// Random dense MDP with full-support transitions and rewards in `[0, 1]`.
pub fn random_mdp<R: Rng>(
    rng: &mut R,
    max_states: usize,
    max_actions: usize,
    gammas: &[f64],
) -> FiniteMdp {
    let n_states = rng.gen_range(2..=max_states.max(2));
    let n_actions = rng.gen_range(2..=max_actions.max(2));
    let gamma = gammas[rng.gen_range(0..gammas.len())];
    let reward: Vec<f64> = (0..n_states * n_actions).map(|_| rng.gen()).collect();
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(random_distribution(rng, n_states, 1e-3));
    }
    let start = random_distribution(rng, n_states, 1e-3);
    FiniteMdp::new(n_states, n_actions, gamma, 1.0, reward, transition, start)
        .expect("random MDP is valid")
}

/// Random full-support policy.
pub fn random_policy<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize) -> TabularPolicy {
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        probs.extend(random_distribution(rng, n_actions, 1e-2));
    }
    TabularPolicy::new(n_states, n_actions, probs).expect("random policy is valid")
}

/// Random confidence table feasible for `(beta, rho)`: uniform labels pushed
/// through the exact per-state projection onto the constraint set.
pub fn random_feasible_confidence<R: Rng>(
    rng: &mut R,
    beta: &TabularPolicy,
    rho: &TabularPolicy,
) -> ConfidenceTable {
    let (n_states, n_actions) = (beta.n_states(), beta.n_actions());
    let mut lam = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        let label: Vec<f64> = (0..n_actions).map(|_| rng.gen()).collect();
        let delta: Vec<f64> = (0..n_actions)
            .map(|a| rho.prob(s, a) - beta.prob(s, a))
            .collect();
        lam.extend(project_box_hyperplane(&label, &delta));
    }
    ConfidenceTable::new(n_states, n_actions, lam).expect("projected confidence is valid")
}
