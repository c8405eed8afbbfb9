//! Finite MDP representation and exact dynamic-programming oracles.
//!
//! Everything here is computed by direct dense linear solves rather than
//! iteration: state spaces stay small and the bound certifications downstream
//! assert 1e-8 tolerances, so exactness matters more than asymptotics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::Batch;
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

#[inline]
pub(crate) fn sa_index(s: usize, a: usize, n_actions: usize) -> usize {
    s * n_actions + a
}

// ---------------------------------------------------------------------------
// FiniteMdp
// ---------------------------------------------------------------------------

/// A tabular MDP `(S, A, R, T, P0, gamma)` with rewards in `[0, r_max]`.
///
/// `reward` is indexed `[s * n_actions + a]`, `transition` is indexed
/// `[(s * n_actions + a) * n_states + s']`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    reward: Vec<f64>,
    transition: Vec<f64>,
    start: Vec<f64>,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        r_max: f64,
        reward: Vec<f64>,
        transition: Vec<f64>,
        start: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Config(
                "MDP must have at least one state and action".into(),
            ));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidValue {
                what: "gamma",
                value: gamma,
            });
        }
        if r_max < 0.0 || !r_max.is_finite() {
            return Err(Error::InvalidValue {
                what: "r_max",
                value: r_max,
            });
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::DimensionMismatch(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if start.len() != n_states {
            return Err(Error::DimensionMismatch(format!(
                "start distribution has {} entries, expected {}",
                start.len(),
                n_states
            )));
        }
        for (i, &r) in reward.iter().enumerate() {
            if !(0.0..=r_max).contains(&r) {
                return Err(Error::InvalidValue {
                    what: "reward entry",
                    value: r,
                });
            }
            let _ = i;
        }
        for sa in 0..n_states * n_actions {
            let row = &transition[sa * n_states..(sa + 1) * n_states];
            check_distribution("transition", sa, row)?;
        }
        check_distribution("start", 0, &start)?;
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            r_max,
            reward,
            transition,
            start,
        })
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[sa_index(s, a, self.n_actions)]
    }

    #[inline]
    pub fn transition(&self, s: usize, a: usize, sp: usize) -> f64 {
        self.transition[sa_index(s, a, self.n_actions) * self.n_states + sp]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let sa = sa_index(s, a, self.n_actions);
        &self.transition[sa * self.n_states..(sa + 1) * self.n_states]
    }

    #[inline]
    pub fn start(&self) -> &[f64] {
        &self.start
    }

    /// `T_pi(s'|s) = sum_a pi(a|s) T(s'|s,a)` as a dense matrix.
    pub fn policy_transition(&self, pi: &TabularPolicy) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_states, |s, sp| {
            (0..self.n_actions)
                .map(|a| pi.prob(s, a) * self.transition(s, a, sp))
                .sum()
        })
    }

    /// `R_pi(s) = sum_a pi(a|s) R(s,a)`.
    pub fn policy_reward(&self, pi: &TabularPolicy) -> DVector<f64> {
        DVector::from_fn(self.n_states, |s, _| {
            (0..self.n_actions)
                .map(|a| pi.prob(s, a) * self.reward(s, a))
                .sum()
        })
    }

    pub fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.n_states() != self.n_states || pi.n_actions() != self.n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                pi.n_states(),
                pi.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    /// A state is absorbing when every action self-loops with probability one.
    pub fn is_absorbing(&self, s: usize) -> bool {
        (0..self.n_actions).all(|a| (self.transition(s, a, s) - 1.0).abs() <= ROW_SUM_TOL)
    }

    pub fn to_json(&self) -> MdpFile {
        MdpFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            r_max: self.r_max,
            reward: (0..self.n_states)
                .map(|s| (0..self.n_actions).map(|a| self.reward(s, a)).collect())
                .collect(),
            transition: (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| self.transition_row(s, a).to_vec())
                        .collect()
                })
                .collect(),
            start: self.start.clone(),
        }
    }

    pub fn from_json(file: MdpFile) -> Result<Self> {
        let MdpFile {
            n_states,
            n_actions,
            gamma,
            r_max,
            reward,
            transition,
            start,
        } = file;
        let mut flat_r = Vec::with_capacity(n_states * n_actions);
        for row in &reward {
            flat_r.extend_from_slice(row);
        }
        let mut flat_t = Vec::with_capacity(n_states * n_actions * n_states);
        for per_state in &transition {
            for row in per_state {
                flat_t.extend_from_slice(row);
            }
        }
        Self::new(n_states, n_actions, gamma, r_max, flat_r, flat_t, start)
    }
}

fn check_distribution(what: &'static str, index: usize, row: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if p < 0.0 || !p.is_finite() {
            return Err(Error::InvalidDistribution {
                what,
                index,
                sum: p,
            });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::InvalidDistribution { what, index, sum });
    }
    Ok(())
}

/// On-disk JSON layout for [`FiniteMdp`]; row-major nested arrays of 64-bit floats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub reward: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub start: Vec<f64>,
}

// ---------------------------------------------------------------------------
// TabularPolicy
// ---------------------------------------------------------------------------

/// A stochastic policy table; each state's row lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            check_distribution("policy", s, &probs[s * n_actions..(s + 1) * n_actions])?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Builds from rows, clipping float dust in `[-1e-12, 0)` up to zero.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for row in rows {
            for p in row {
                probs.push(if (-ROW_SUM_TOL..0.0).contains(&p) {
                    0.0
                } else {
                    p
                });
            }
        }
        Self::new(n_states, n_actions, probs)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != n_states {
            return Err(Error::DimensionMismatch(format!(
                "need one action per state, got {} for {} states",
                actions.len(),
                n_states
            )));
        }
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::IndexOutOfRange {
                    what: "action",
                    index: a,
                    bound: n_actions,
                });
            }
            probs[sa_index(s, a, n_actions)] = 1.0;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[sa_index(s, a, self.n_actions)]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Row-wise convex combination `(1 - w) * self + w * other`.
    pub fn blend(&self, other: &TabularPolicy, w: f64) -> Result<TabularPolicy> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::DimensionMismatch(
                "policy blend shapes differ".into(),
            ));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(&p, &q)| (1.0 - w) * p + w * q)
            .collect();
        TabularPolicy::new(self.n_states, self.n_actions, probs)
    }

    pub fn to_json(&self) -> PolicyFile {
        PolicyFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            probs: (0..self.n_states).map(|s| self.row(s).to_vec()).collect(),
        }
    }

    pub fn from_json(file: PolicyFile) -> Result<Self> {
        let mut probs = Vec::with_capacity(file.n_states * file.n_actions);
        for row in &file.probs {
            probs.extend_from_slice(row);
        }
        Self::new(file.n_states, file.n_actions, probs)
    }
}

/// On-disk JSON layout for [`TabularPolicy`], mirroring the MDP format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Value / Q / advantage tables, occupancy measures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub values: Vec<f64>,
}

impl ValueTable {
    #[inline]
    pub fn get(&self, s: usize) -> f64 {
        self.values[s]
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[sa_index(s, a, self.n_actions)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl AdvantageTable {
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[sa_index(s, a, self.n_actions)]
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }
}

/// Which state distribution an occupancy measure is conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Start {
    /// The MDP's own initial distribution `P0`.
    Initial,
    /// A single start state.
    State(usize),
    /// An explicit distribution over states.
    Distribution(Vec<f64>),
}

/// Normalized discounted state(-action) visitation under a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub state: Vec<f64>,
    pub state_action: Vec<f64>,
    pub start_state: Start,
    pub normalized: bool,
}

impl OccupancyMeasure {
    #[inline]
    pub fn state_action(&self, s: usize, a: usize, n_actions: usize) -> f64 {
        self.state_action[sa_index(s, a, n_actions)]
    }
}

// ---------------------------------------------------------------------------
// Exact evaluation
// ---------------------------------------------------------------------------

const SOLVE_RESIDUAL_LIMIT: f64 = 1e-10;

fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let x = a.clone().lu().solve(b).ok_or(Error::SingularSystem(what))?;
    let residual = (a * &x - b).amax();
    if residual > SOLVE_RESIDUAL_LIMIT {
        return Err(Error::SolveResidual {
            what,
            residual,
            limit: SOLVE_RESIDUAL_LIMIT,
        });
    }
    Ok(x)
}

/// Exact policy evaluation: solves `(I - gamma T_pi) V = R_pi` directly.
pub fn evaluate_policy(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<ValueTable> {
    mdp.check_policy(pi)?;
    let n = mdp.n_states();
    let system = DMatrix::identity(n, n) - mdp.policy_transition(pi) * mdp.gamma();
    let v = solve_checked(&system, &mdp.policy_reward(pi), "policy evaluation")?;
    Ok(ValueTable {
        values: v.iter().copied().collect(),
    })
}

/// `Q(s,a) = R(s,a) + gamma sum_s' T(s'|s,a) V(s')` and the centered advantage.
pub fn q_and_advantage(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<(QTable, AdvantageTable)> {
    let v = evaluate_policy(mdp, pi)?;
    let (n_states, n_actions) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![0.0; n_states * n_actions];
    let mut adv = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        for a in 0..n_actions {
            let backup: f64 = (0..n_states)
                .map(|sp| mdp.transition(s, a, sp) * v.get(sp))
                .sum();
            let qsa = mdp.reward(s, a) + mdp.gamma() * backup;
            q[sa_index(s, a, n_actions)] = qsa;
            adv[sa_index(s, a, n_actions)] = qsa - v.get(s);
        }
    }
    Ok((
        QTable {
            n_actions,
            values: q,
        },
        AdvantageTable {
            n_actions,
            values: adv,
        },
    ))
}

/// `J_pi = sum_s P0(s) V_pi(s)`.
pub fn expected_return(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<f64> {
    let v = evaluate_policy(mdp, pi)?;
    Ok(mdp
        .start()
        .iter()
        .zip(&v.values)
        .map(|(&p, &val)| p * val)
        .sum())
}

fn start_vector(mdp: &FiniteMdp, start: &Start) -> Result<DVector<f64>> {
    match start {
        Start::Initial => Ok(DVector::from_column_slice(mdp.start())),
        Start::State(s0) => {
            if *s0 >= mdp.n_states() {
                return Err(Error::IndexOutOfRange {
                    what: "start state",
                    index: *s0,
                    bound: mdp.n_states(),
                });
            }
            let mut v = DVector::zeros(mdp.n_states());
            v[*s0] = 1.0;
            Ok(v)
        }
        Start::Distribution(d) => {
            if d.len() != mdp.n_states() {
                return Err(Error::DimensionMismatch(format!(
                    "start distribution has {} entries, expected {}",
                    d.len(),
                    mdp.n_states()
                )));
            }
            check_distribution("start", 0, d)?;
            Ok(DVector::from_column_slice(d))
        }
    }
}

/// Normalized discounted occupancy `d = (1 - gamma) start^T (I - gamma T_pi)^{-1}`,
/// with the state-action form `d(s,a) = d(s) pi(a|s)`.
pub fn occupancy(mdp: &FiniteMdp, pi: &TabularPolicy, start: Start) -> Result<OccupancyMeasure> {
    mdp.check_policy(pi)?;
    let n = mdp.n_states();
    let p0 = start_vector(mdp, &start)?;
    let system = (DMatrix::identity(n, n) - mdp.policy_transition(pi) * mdp.gamma()).transpose();
    let d = solve_checked(&system, &p0, "occupancy measure")? * (1.0 - mdp.gamma());
    let state: Vec<f64> = d.iter().copied().collect();
    let mut state_action = vec![0.0; n * mdp.n_actions()];
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            state_action[sa_index(s, a, mdp.n_actions())] = state[s] * pi.prob(s, a);
        }
    }
    Ok(OccupancyMeasure {
        state,
        state_action,
        start_state: start,
        normalized: true,
    })
}

/// All rows of `(1 - gamma)(I - gamma T_pi)^{-1}`: row `s0` is the occupancy
/// conditioned on starting at `s0`. One inverse serves every start state.
pub fn occupancy_matrix(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<DMatrix<f64>> {
    mdp.check_policy(pi)?;
    let n = mdp.n_states();
    let system = DMatrix::identity(n, n) - mdp.policy_transition(pi) * mdp.gamma();
    let inv = system
        .lu()
        .try_inverse()
        .ok_or(Error::SingularSystem("occupancy matrix"))?;
    Ok(inv * (1.0 - mdp.gamma()))
}

// ---------------------------------------------------------------------------
// Empirical model from a batch
// ---------------------------------------------------------------------------

/// Maximum-likelihood tabular model built from batch counts, plus support
/// information for algorithms that need it.
#[derive(Debug, Clone)]
pub struct EmpiricalModel {
    pub mdp: FiniteMdp,
    /// Visit count per `(s, a)` pair.
    pub visits: Vec<u64>,
    /// True where `(s, a)` never appears in the batch; such rows fall back to a
    /// uniform transition and zero reward.
    pub unsupported: Vec<bool>,
}

impl EmpiricalModel {
    #[inline]
    pub fn visit_count(&self, s: usize, a: usize) -> u64 {
        self.visits[sa_index(s, a, self.mdp.n_actions())]
    }

    #[inline]
    pub fn is_supported(&self, s: usize, a: usize) -> bool {
        !self.unsupported[sa_index(s, a, self.mdp.n_actions())]
    }
}

/// Builds the count-based empirical MDP from a batch.
pub fn empirical_mdp(
    batch: &Batch,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
) -> Result<EmpiricalModel> {
    if batch.transitions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_sa = n_states * n_actions;
    let mut visits = vec![0u64; n_sa];
    let mut reward_sum = vec![0.0; n_sa];
    let mut next_counts = vec![0u64; n_sa * n_states];
    for t in &batch.transitions {
        if t.state >= n_states || t.next_state >= n_states {
            return Err(Error::IndexOutOfRange {
                what: "batch state",
                index: t.state.max(t.next_state),
                bound: n_states,
            });
        }
        if t.action >= n_actions {
            return Err(Error::IndexOutOfRange {
                what: "batch action",
                index: t.action,
                bound: n_actions,
            });
        }
        let sa = sa_index(t.state, t.action, n_actions);
        visits[sa] += 1;
        reward_sum[sa] += t.reward;
        next_counts[sa * n_states + t.next_state] += 1;
    }
    let mut reward = vec![0.0; n_sa];
    let mut transition = vec![0.0; n_sa * n_states];
    let mut unsupported = vec![false; n_sa];
    let uniform = 1.0 / n_states as f64;
    for sa in 0..n_sa {
        if visits[sa] == 0 {
            unsupported[sa] = true;
            for sp in 0..n_states {
                transition[sa * n_states + sp] = uniform;
            }
        } else {
            let n = visits[sa] as f64;
            reward[sa] = reward_sum[sa] / n;
            for sp in 0..n_states {
                transition[sa * n_states + sp] = next_counts[sa * n_states + sp] as f64 / n;
            }
        }
    }
    let r_max = reward.iter().cloned().fold(0.0, f64::max);
    let mdp = FiniteMdp::new(
        n_states,
        n_actions,
        gamma,
        r_max,
        reward,
        transition,
        batch.meta.start_distribution(n_states),
    )?;
    Ok(EmpiricalModel {
        mdp,
        visits,
        unsupported,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
