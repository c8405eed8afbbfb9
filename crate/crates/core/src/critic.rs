//! Advantage estimation: exact behavior advantage, the mixed-mu Bellman fixed
//! point, and the weighted advantage built from it.
//!
//! The mixed backup `V(s) = (1-mu) E_beta[Q] + mu max_a Q` interpolates
//! between behavior evaluation (mu = 0) and optimal planning (mu = 1) and is
//! a gamma-contraction for every mu, so plain sweeps converge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{q_and_advantage, AdvantageTable, FiniteMdp, QTable, TabularPolicy, ValueTable};

/// Where the critic gets its model from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticSource {
    ExactModel,
    EmpiricalModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    /// Mixing between behavior backup and optimal backup.
    pub mu: f64,
    /// Maximum fixed-point sweeps.
    pub sweeps: usize,
    /// Sup-norm stopping tolerance.
    pub tol: f64,
    pub source: CriticSource,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            mu: 0.9,
            sweeps: 100_000,
            tol: 1e-10,
            source: CriticSource::EmpiricalModel,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidValue {
                what: "critic mu",
                value: self.mu,
            });
        }
        if self.tol <= 0.0 {
            return Err(Error::InvalidValue {
                what: "critic tol",
                value: self.tol,
            });
        }
        if self.sweeps == 0 {
            return Err(Error::InvalidValue {
                what: "critic sweeps",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Converged mixed fixed point with its sweep history.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub q: QTable,
    pub v: ValueTable,
    pub sweeps_used: usize,
    /// Sup-norm change per sweep; decays at ratio <= gamma.
    pub residuals: Vec<f64>,
}

/// Exact behavior advantage `A_beta = Q_beta - V_beta` on the given model
/// (true or empirical), via direct linear solve.
pub fn advantage_behavior(model: &FiniteMdp, beta: &TabularPolicy) -> Result<AdvantageTable> {
    Ok(q_and_advantage(model, beta)?.1)
}

/// Fixed point of `Q = R + gamma T V`, `V = (1-mu) E_beta[Q] + mu max_a Q`.
pub fn mixed_fixed_point(
    model: &FiniteMdp,
    beta: &TabularPolicy,
    mu: f64,
    sweeps: usize,
    tol: f64,
) -> Result<FixedPoint> {
    model.check_policy(beta)?;
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidValue {
            what: "mu",
            value: mu,
        });
    }
    let (n_states, n_actions) = (model.n_states(), model.n_actions());
    let mut q = vec![0.0; n_states * n_actions];
    let mut v = vec![0.0; n_states];
    let mut residuals = Vec::new();
    for sweep in 0..sweeps {
        for s in 0..n_states {
            let mut avg = 0.0;
            let mut best = f64::NEG_INFINITY;
            for a in 0..n_actions {
                let qsa = q[s * n_actions + a];
                avg += beta.prob(s, a) * qsa;
                best = best.max(qsa);
            }
            v[s] = (1.0 - mu) * avg + mu * best;
        }
        let mut delta = 0.0f64;
        for s in 0..n_states {
            for a in 0..n_actions {
                let mut backup = 0.0;
                for sp in 0..n_states {
                    backup += model.transition(s, a, sp) * v[sp];
                }
                let next = model.reward(s, a) + model.gamma() * backup;
                delta = delta.max((next - q[s * n_actions + a]).abs());
                q[s * n_actions + a] = next;
            }
        }
        residuals.push(delta);
        if delta <= tol {
            for s in 0..n_states {
                let mut avg = 0.0;
                let mut best = f64::NEG_INFINITY;
                for a in 0..n_actions {
                    let qsa = q[s * n_actions + a];
                    avg += beta.prob(s, a) * qsa;
                    best = best.max(qsa);
                }
                v[s] = (1.0 - mu) * avg + mu * best;
            }
            return Ok(FixedPoint {
                q: QTable {
                    n_actions,
                    values: q,
                },
                v: ValueTable { values: v },
                sweeps_used: sweep + 1,
                residuals,
            });
        }
    }
    Err(Error::NotConverged {
        what: "mixed fixed point",
        sweeps,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// Weighted advantage `W(s,a) = Q_mu(s,a) - V_mu(s)` from the mixed fixed
/// point; equals `A_beta` at mu = 0 and the optimal advantage at mu = 1.
pub fn weighted_advantage(
    model: &FiniteMdp,
    beta: &TabularPolicy,
    mu: f64,
    sweeps: usize,
    tol: f64,
) -> Result<AdvantageTable> {
    let fp = mixed_fixed_point(model, beta, mu, sweeps, tol)?;
    let n_actions = model.n_actions();
    let values = (0..model.n_states() * n_actions)
        .map(|sa| fp.q.values[sa] - fp.v.values[sa / n_actions])
        .collect();
    Ok(AdvantageTable { n_actions, values })
}

/// Advantage table per a [`CriticConfig`], given both models.
pub fn advantage_from_config(
    config: &CriticConfig,
    exact: Option<&FiniteMdp>,
    empirical: Option<&FiniteMdp>,
    beta: &TabularPolicy,
) -> Result<AdvantageTable> {
    config.validate()?;
    let model = match config.source {
        CriticSource::ExactModel => {
            exact.ok_or_else(|| Error::Config("exact model required but not provided".into()))?
        }
        CriticSource::EmpiricalModel => empirical
            .ok_or_else(|| Error::Config("empirical model required but not provided".into()))?,
    };
    weighted_advantage(model, beta, config.mu, config.sweeps, config.tol)
}

/// Greedy deterministic policy from the mu = 1 fixed point; argmax ties break
/// to the lowest action index.
pub fn greedy_policy(model: &FiniteMdp) -> Result<TabularPolicy> {
    let beta = TabularPolicy::uniform(model.n_states(), model.n_actions());
    let fp = mixed_fixed_point(model, &beta, 1.0, 100_000, 1e-10)?;
    greedy_from_q(&fp.q, model.n_states())
}

pub fn greedy_from_q(q: &QTable, n_states: usize) -> Result<TabularPolicy> {
    let actions: Vec<usize> = (0..n_states)
        .map(|s| {
            let mut best = 0;
            for a in 1..q.n_actions {
                if q.get(s, a) > q.get(s, best) {
                    best = a;
                }
            }
            best
        })
        .collect();
    TabularPolicy::deterministic(n_states, q.n_actions, &actions)
}
