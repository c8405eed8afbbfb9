//! Comparison algorithms for the batch setting: behavior cloning, greedy
//! planning on the empirical model, KL-regularized soft backups, safe
//! improvement with baseline bootstrapping, and the constant-confidence
//! residual variant.

use serde::{Deserialize, Serialize};

use crate::critic::{greedy_from_q, mixed_fixed_point, CriticConfig};
use crate::datagen::Batch;
use crate::error::{Error, Result};
use crate::mdp::{empirical_mdp, AdvantageTable, TabularPolicy};
use crate::residual::{mix, ConfidenceTable, ResidualPolicy};
use crate::solver::{candidate_policy, temperature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineAlgo {
    Bc,
    BatchQ,
    KlQ,
    Spibb,
    BrpoC,
}

/// How the SPIBB certainty threshold is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpibbThresholdMode {
    /// Fraction of the maximum per-pair visit count in the batch.
    Fraction,
    /// Raw visit count.
    Count,
}

fn default_kl_weight() -> f64 {
    0.1
}
fn default_spibb_threshold() -> f64 {
    0.2
}
fn default_spibb_mode() -> SpibbThresholdMode {
    SpibbThresholdMode::Fraction
}
fn default_const_lambda() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub algo: BaselineAlgo,
    #[serde(default = "default_kl_weight")]
    pub kl_weight: f64,
    #[serde(default = "default_spibb_threshold")]
    pub spibb_threshold: f64,
    #[serde(default = "default_spibb_mode")]
    pub spibb_threshold_mode: SpibbThresholdMode,
    #[serde(default = "default_const_lambda")]
    pub const_lambda: f64,
    #[serde(default)]
    pub critic: CriticConfig,
}

impl BaselineConfig {
    pub fn new(algo: BaselineAlgo) -> Self {
        Self {
            algo,
            kl_weight: default_kl_weight(),
            spibb_threshold: default_spibb_threshold(),
            spibb_threshold_mode: default_spibb_mode(),
            const_lambda: default_const_lambda(),
            critic: CriticConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.algo {
            BaselineAlgo::KlQ if self.kl_weight <= 0.0 => Err(Error::InvalidValue {
                what: "kl_weight",
                value: self.kl_weight,
            }),
            BaselineAlgo::BrpoC if !(0.0..=1.0).contains(&self.const_lambda) => {
                Err(Error::InvalidValue {
                    what: "const_lambda",
                    value: self.const_lambda,
                })
            }
            _ => self.critic.validate(),
        }
    }
}

// ---------------------------------------------------------------------------
// Behavior cloning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BehaviorClone {
    pub policy: TabularPolicy,
    /// States never visited in the batch; their rows fall back to uniform.
    pub unvisited: Vec<bool>,
}

/// Returns the known behavior policy when available, otherwise empirical
/// action frequencies per visited state.
pub fn behavior_cloning(
    batch: &Batch,
    known_beta: Option<&TabularPolicy>,
    n_states: usize,
    n_actions: usize,
) -> Result<BehaviorClone> {
    if let Some(beta) = known_beta {
        return Ok(BehaviorClone {
            policy: beta.clone(),
            unvisited: vec![false; beta.n_states()],
        });
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut counts = vec![0.0f64; n_states * n_actions];
    for t in &batch.transitions {
        counts[t.state * n_actions + t.action] += 1.0;
    }
    let mut unvisited = vec![false; n_states];
    let mut rows = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let row = &counts[s * n_actions..(s + 1) * n_actions];
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            unvisited[s] = true;
            rows.push(vec![1.0 / n_actions as f64; n_actions]);
        } else {
            rows.push(row.iter().map(|&c| c / total).collect());
        }
    }
    Ok(BehaviorClone {
        policy: TabularPolicy::from_rows(rows)?,
        unvisited,
    })
}

// ---------------------------------------------------------------------------
// Batch Q (greedy planning on the empirical model)
// ---------------------------------------------------------------------------

/// Greedy deterministic policy on the empirical model's optimal fixed point;
/// ties break to the lowest action index.
pub fn batch_q_policy(
    batch: &Batch,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    critic: &CriticConfig,
) -> Result<TabularPolicy> {
    let model = empirical_mdp(batch, n_states, n_actions, gamma)?;
    let uniform = TabularPolicy::uniform(n_states, n_actions);
    let fp = mixed_fixed_point(&model.mdp, &uniform, 1.0, critic.sweeps, critic.tol)?;
    greedy_from_q(&fp.q, n_states)
}

// ---------------------------------------------------------------------------
// KL-regularized Q
// ---------------------------------------------------------------------------

/// Soft backup with the behavior prior on the empirical model:
/// `V = alpha log sum_a beta exp(Q / alpha)`, `Q = R + gamma T V`,
/// returning `pi ~ beta exp(Q / alpha)`.
pub fn kl_q_policy(
    batch: &Batch,
    beta: &TabularPolicy,
    config: &BaselineConfig,
    gamma: f64,
) -> Result<TabularPolicy> {
    let alpha = config.kl_weight;
    if alpha <= 0.0 {
        return Err(Error::InvalidValue {
            what: "kl_weight",
            value: alpha,
        });
    }
    let (n_states, n_actions) = (beta.n_states(), beta.n_actions());
    let model = empirical_mdp(batch, n_states, n_actions, gamma)?.mdp;
    let soft_v = |q: &[f64], s: usize| -> f64 {
        // weighted log-sum-exp over the behavior support
        let mut m = f64::NEG_INFINITY;
        for a in 0..n_actions {
            if beta.prob(s, a) > 0.0 {
                m = m.max(q[s * n_actions + a] / alpha);
            }
        }
        let z: f64 = (0..n_actions)
            .filter(|&a| beta.prob(s, a) > 0.0)
            .map(|a| beta.prob(s, a) * (q[s * n_actions + a] / alpha - m).exp())
            .sum();
        alpha * (m + z.ln())
    };
    let mut q = vec![0.0; n_states * n_actions];
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..config.critic.sweeps {
        let v: Vec<f64> = (0..n_states).map(|s| soft_v(&q, s)).collect();
        residual = 0.0f64;
        for s in 0..n_states {
            for a in 0..n_actions {
                let backup: f64 = (0..n_states)
                    .map(|sp| model.transition(s, a, sp) * v[sp])
                    .sum();
                let next = model.reward(s, a) + gamma * backup;
                residual = residual.max((next - q[s * n_actions + a]).abs());
                q[s * n_actions + a] = next;
            }
        }
        if residual <= config.critic.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged {
            what: "soft backup",
            sweeps: config.critic.sweeps,
            residual,
        });
    }
    let mut rows = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let mut m = f64::NEG_INFINITY;
        for a in 0..n_actions {
            if beta.prob(s, a) > 0.0 {
                m = m.max(q[s * n_actions + a] / alpha);
            }
        }
        let mut row: Vec<f64> = (0..n_actions)
            .map(|a| {
                if beta.prob(s, a) > 0.0 {
                    beta.prob(s, a) * (q[s * n_actions + a] / alpha - m).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
        rows.push(row);
    }
    TabularPolicy::from_rows(rows)
}

// ---------------------------------------------------------------------------
// SPIBB-style bootstrapping
// ---------------------------------------------------------------------------

/// Keeps the behavior policy's mass on uncertain pairs and moves the rest to
/// the best certain action under the empirical optimal value.
pub fn spibb_policy(
    batch: &Batch,
    beta: &TabularPolicy,
    config: &BaselineConfig,
    gamma: f64,
) -> Result<TabularPolicy> {
    let (n_states, n_actions) = (beta.n_states(), beta.n_actions());
    let model = empirical_mdp(batch, n_states, n_actions, gamma)?;
    let uniform = TabularPolicy::uniform(n_states, n_actions);
    let fp = mixed_fixed_point(
        &model.mdp,
        &uniform,
        1.0,
        config.critic.sweeps,
        config.critic.tol,
    )?;
    let max_count = model.visits.iter().copied().max().unwrap_or(0) as f64;
    let threshold = match config.spibb_threshold_mode {
        SpibbThresholdMode::Fraction => config.spibb_threshold * max_count,
        SpibbThresholdMode::Count => config.spibb_threshold,
    };
    let mut rows = Vec::with_capacity(n_states);
    for s in 0..n_states {
        let certain: Vec<usize> = (0..n_actions)
            .filter(|&a| model.visit_count(s, a) as f64 >= threshold)
            .collect();
        let mut row: Vec<f64> = (0..n_actions).map(|a| beta.prob(s, a)).collect();
        if let Some(&first) = certain.first() {
            let mut free_mass = 0.0;
            for &a in &certain {
                free_mass += row[a];
                row[a] = 0.0;
            }
            let best = certain.iter().copied().fold(first, |best, a| {
                if fp.q.get(s, a) > fp.q.get(s, best) {
                    a
                } else {
                    best
                }
            });
            row[best] = free_mass;
        }
        rows.push(row);
    }
    TabularPolicy::from_rows(rows)
}

// ---------------------------------------------------------------------------
// Constant-confidence residual policy
// ---------------------------------------------------------------------------

/// Runs the candidate update with a constant confidence (feasible for any
/// candidate), skipping the confidence program entirely.
pub fn brpo_constant(
    beta: &TabularPolicy,
    adv: &AdvantageTable,
    gamma: f64,
    const_lambda: f64,
    kappa_max: Option<f64>,
) -> Result<ResidualPolicy> {
    if !(0.0..=1.0).contains(&const_lambda) {
        return Err(Error::InvalidValue {
            what: "const_lambda",
            value: const_lambda,
        });
    }
    let lam = ConfidenceTable::constant(beta.n_states(), beta.n_actions(), const_lambda)?;
    let tau = temperature(beta, &lam, adv, gamma, kappa_max, 1.0);
    let rho = candidate_policy(beta, adv, &lam, &tau)?;
    mix(beta, &rho, &lam)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
