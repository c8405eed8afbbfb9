//! The batch residual-policy learner: closed-form candidate updates, the
//! confidence program over batch samples, nearest-neighbor confidence
//! generalization, and the two-step coordinate-ascent loop.

pub mod projection;
pub mod qp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{expected_return, AdvantageTable, FiniteMdp, TabularPolicy};
use crate::residual::{mix, ConfidenceTable, ResidualPolicy};
use crate::value_gap::kappa;
use projection::project_confidence;
use qp::{build_confidence_qp, solve_confidence, QpMethod, SaaTerms};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// State metric for nearest-neighbor confidence generalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnMetric {
    /// Exact-match-or-nothing on raw state indices.
    Hamming,
    /// Manhattan distance on environment-declared state coordinates.
    Manhattan,
}

fn default_iterations() -> usize {
    20
}
fn default_mu() -> f64 {
    0.9
}
fn default_qp_method() -> QpMethod {
    QpMethod::ActiveSet
}
fn default_qp_tol() -> f64 {
    1e-8
}
fn default_qp_ridge() -> f64 {
    1e-6
}
fn default_nn_metric() -> NnMetric {
    NnMetric::Manhattan
}
fn default_bootstrap() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Coordinate-ascent iterations K.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Critic mixing weight for the weighted advantage.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Optional cap applied to the temperature numerator.
    #[serde(default)]
    pub kappa_max: Option<f64>,
    /// Optional temperature decay factor per iteration, in `[0, 1)`.
    #[serde(default)]
    pub decay_eps: Option<f64>,
    #[serde(default = "default_qp_method")]
    pub qp_method: QpMethod,
    #[serde(default = "default_qp_tol")]
    pub qp_tol: f64,
    /// Tikhonov ridge for the closed-form method.
    #[serde(default = "default_qp_ridge")]
    pub qp_ridge: f64,
    #[serde(default = "default_nn_metric")]
    pub nn_metric: NnMetric,
    /// Extend solved confidences to unvisited states by nearest neighbor
    /// plus projection instead of pinning them to zero.
    #[serde(default)]
    pub generalize: bool,
    /// Confidence used to propose the first candidate policy. The all-zero
    /// initialization is a fixed point of the coordinate scheme (a zero
    /// confidence reproduces the behavior policy, whose program is
    /// degenerate), so the first candidate step twists with this constant
    /// instead; the deployed confidence always comes from the program.
    #[serde(default = "default_bootstrap")]
    pub bootstrap_confidence: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            mu: default_mu(),
            kappa_max: None,
            decay_eps: None,
            qp_method: default_qp_method(),
            qp_tol: default_qp_tol(),
            qp_ridge: default_qp_ridge(),
            nn_metric: default_nn_metric(),
            generalize: false,
            bootstrap_confidence: default_bootstrap(),
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidValue {
                what: "solver mu",
                value: self.mu,
            });
        }
        if let Some(k) = self.kappa_max {
            if k <= 0.0 {
                return Err(Error::InvalidValue {
                    what: "kappa_max",
                    value: k,
                });
            }
        }
        if let Some(e) = self.decay_eps {
            if !(0.0..1.0).contains(&e) {
                return Err(Error::InvalidValue {
                    what: "decay_eps",
                    value: e,
                });
            }
        }
        if self.qp_tol <= 0.0 {
            return Err(Error::InvalidValue {
                what: "qp_tol",
                value: self.qp_tol,
            });
        }
        if self.qp_ridge < 0.0 {
            return Err(Error::InvalidValue {
                what: "qp_ridge",
                value: self.qp_ridge,
            });
        }
        if !(0.0..=1.0).contains(&self.bootstrap_confidence) {
            return Err(Error::InvalidValue {
                what: "bootstrap_confidence",
                value: self.bootstrap_confidence,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Temperature and candidate policy
// ---------------------------------------------------------------------------

/// State-dependent entropy-penalty weight
/// `tau(s) = gamma * max(kappa_lambda, kappa_{|adv| lambda}) / (2 - 2 gamma)`,
/// with the kappa level capped and decayed when configured.
pub fn temperature_at(
    beta_row: &[f64],
    lam_row: &[f64],
    adv_row: &[f64],
    gamma: f64,
    kappa_max: Option<f64>,
    decay: f64,
) -> f64 {
    let scaled: Vec<f64> = lam_row
        .iter()
        .zip(adv_row)
        .map(|(&l, &a)| l * a.abs())
        .collect();
    let mut level = kappa(beta_row, lam_row).max(kappa(beta_row, &scaled));
    if let Some(cap) = kappa_max {
        level = level.min(cap);
    }
    gamma * (level * decay) / (2.0 - 2.0 * gamma)
}

/// Per-state temperatures across the whole state space.
pub fn temperature(
    beta: &TabularPolicy,
    lam: &ConfidenceTable,
    adv: &AdvantageTable,
    gamma: f64,
    kappa_max: Option<f64>,
    decay: f64,
) -> Vec<f64> {
    (0..beta.n_states())
        .map(|s| {
            let adv_row: Vec<f64> = (0..beta.n_actions()).map(|a| adv.get(s, a)).collect();
            temperature_at(beta.row(s), lam.row(s), &adv_row, gamma, kappa_max, decay)
        })
        .collect()
}

/// Relative-softmax candidate
/// `rho(a|s) ~ beta(a|s) exp(lambda(s,a) adv(s,a) / tau(s))`,
/// computed with max subtraction over the supported actions. The candidate
/// shares the behavior policy's support.
pub fn candidate_policy(
    beta: &TabularPolicy,
    adv: &AdvantageTable,
    lam: &ConfidenceTable,
    tau: &[f64],
) -> Result<TabularPolicy> {
    if tau.len() != beta.n_states() {
        return Err(Error::DimensionMismatch(
            "one temperature per state required".into(),
        ));
    }
    let mut rows = Vec::with_capacity(beta.n_states());
    for s in 0..beta.n_states() {
        if tau[s] <= 0.0 {
            return Err(Error::NonPositiveTemperature {
                state: s,
                tau: tau[s],
            });
        }
        let exponents: Vec<Option<f64>> = (0..beta.n_actions())
            .map(|a| (beta.prob(s, a) > 0.0).then(|| lam.get(s, a) * adv.get(s, a) / tau[s]))
            .collect();
        let m = exponents
            .iter()
            .flatten()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut row: Vec<f64> = (0..beta.n_actions())
            .map(|a| match exponents[a] {
                Some(x) => beta.prob(s, a) * (x - m).exp(),
                None => 0.0,
            })
            .collect();
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
        rows.push(row);
    }
    TabularPolicy::from_rows(rows)
}

// ---------------------------------------------------------------------------
// Confidence labels and nearest-neighbor generalization
// ---------------------------------------------------------------------------

/// Solved per-state confidence blocks, keyed for nearest-neighbor lookup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceLabelSet {
    pub states: Vec<usize>,
    pub labels: Vec<Vec<f64>>,
    /// Coordinates for every state of the environment (not just batch
    /// states); absent falls back to the Hamming metric.
    pub coordinates: Option<Vec<Vec<f64>>>,
    pub metric: NnMetric,
}

impl ConfidenceLabelSet {
    fn distance(&self, from: usize, to: usize) -> f64 {
        match (&self.coordinates, self.metric) {
            (Some(coords), NnMetric::Manhattan) => coords[from]
                .iter()
                .zip(&coords[to])
                .map(|(&a, &b)| (a - b).abs())
                .sum(),
            _ => {
                if from == to {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Nearest batch state to `query`; ties break to the lowest state index.
    pub fn nearest(&self, query: usize) -> Result<usize> {
        if self.states.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &s) in self.states.iter().enumerate() {
            let d = self.distance(query, s);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(best)
    }
}

/// Looks up the nearest batch state's solved confidence block and projects it
/// onto the query state's constraint set.
pub fn generalize_confidence(
    labels: &ConfidenceLabelSet,
    query_state: usize,
    beta: &TabularPolicy,
    rho: &TabularPolicy,
) -> Result<Vec<f64>> {
    let idx = labels.nearest(query_state)?;
    let label = &labels.labels[idx];
    Ok(project_confidence(label, beta.row(query_state), rho.row(query_state)).projected)
}

// ---------------------------------------------------------------------------
// Coordinate ascent
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfStep {
    Candidate,
    Confidence,
}

/// One trace row per half-step of the ascent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub half_step: HalfStep,
    pub l_bar: f64,
    pub l_prime: f64,
    pub l_double: f64,
    pub l_triple: f64,
    pub j_exact: Option<f64>,
}

impl TraceRow {
    fn from_terms(iter: usize, half_step: HalfStep, t: SaaTerms, j: Option<f64>) -> Self {
        Self {
            iter,
            half_step,
            l_bar: t.objective,
            l_prime: t.l_prime,
            l_double: t.l_double,
            l_triple: t.l_triple,
            j_exact: j,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentOutcome {
    pub policy: ResidualPolicy,
    pub trace: Vec<TraceRow>,
    pub labels: ConfidenceLabelSet,
}

/// Two-step coordinate ascent: candidate update by the relative softmax,
/// confidence update by the batch program, extended tabularly (or by nearest
/// neighbor when generalization is enabled). The trace records the SAA
/// objective before and after every confidence step.
pub fn coordinate_ascent(
    batch: &crate::datagen::Batch,
    beta: &TabularPolicy,
    adv: &AdvantageTable,
    gamma: f64,
    config: &SolverConfig,
    exact_env: Option<&FiniteMdp>,
    coordinates: Option<Vec<Vec<f64>>>,
) -> Result<AscentOutcome> {
    config.validate()?;
    if batch.is_empty() && config.iterations > 0 {
        return Err(Error::EmptyBatch);
    }
    let (n_states, n_actions) = (beta.n_states(), beta.n_actions());
    let mut lam = ConfidenceTable::zeros(n_states, n_actions);
    let mut rho = beta.clone();
    let mut labels = ConfidenceLabelSet {
        states: Vec::new(),
        labels: Vec::new(),
        coordinates,
        metric: config.nn_metric,
    };
    let mut trace = vec![TraceRow {
        iter: 0,
        half_step: HalfStep::Confidence,
        l_bar: 0.0,
        l_prime: 0.0,
        l_double: 0.0,
        l_triple: 0.0,
        j_exact: exact_env
            .map(|env| expected_return(env, beta))
            .transpose()?,
    }];

    for k in 1..=config.iterations {
        // candidate step; the confidence driving the exponential twist
        let twist = if k == 1 {
            ConfidenceTable::constant(n_states, n_actions, config.bootstrap_confidence)?
        } else {
            lam.clone()
        };
        let decay = config.decay_eps.map_or(1.0, |e| e.powi(k as i32));
        let tau = temperature(beta, &twist, adv, gamma, config.kappa_max, decay);
        rho = candidate_policy(beta, adv, &twist, &tau)?;

        let qp = build_confidence_qp(batch, beta, &rho, adv, gamma)?;
        // The previous confidence enters the new program through the same
        // constraint projection the algorithm applies everywhere: a candidate
        // update changes the constraint set, and the carried-over confidence
        // is whatever that projection admits. The half-step trace records the
        // carried value, and the confidence step can never fall below it.
        let carried = qp.project_feasible(&qp.restrict_table(&lam));
        trace.push(TraceRow::from_terms(
            k,
            HalfStep::Candidate,
            qp.saa_terms(&carried),
            None,
        ));

        // confidence step; the carried confidence competes as a warm start
        let solved = solve_confidence(&qp, config.qp_method, config.qp_tol, config.qp_ridge)?;
        let warm = qp::polish_blocks(&qp, carried);
        let lambda_vec = if qp.objective(&warm) > solved.objective {
            warm
        } else {
            solved.lambda
        };
        let blocks: Vec<Vec<f64>> = lambda_vec.chunks(n_actions).map(<[f64]>::to_vec).collect();
        labels.states = qp.states.clone();
        labels.labels = blocks.clone();
        lam = if config.generalize {
            let mut rows = Vec::with_capacity(n_states);
            for s in 0..n_states {
                match qp.states.binary_search(&s) {
                    Ok(i) => rows.push(blocks[i].clone()),
                    Err(_) => rows.push(generalize_confidence(&labels, s, beta, &rho)?),
                }
            }
            ConfidenceTable::from_state_blocks(
                n_states,
                n_actions,
                &(0..n_states).collect::<Vec<_>>(),
                &rows,
            )?
        } else {
            ConfidenceTable::from_state_blocks(n_states, n_actions, &qp.states, &blocks)?
        };

        let j_exact = match exact_env {
            Some(env) => Some(expected_return(env, &mix(beta, &rho, &lam)?.mixed)?),
            None => None,
        };
        trace.push(TraceRow::from_terms(
            k,
            HalfStep::Confidence,
            qp.saa_terms(&lambda_vec),
            j_exact,
        ));
    }

    let policy = mix(beta, &rho, &lam)?;
    Ok(AscentOutcome {
        policy,
        trace,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
