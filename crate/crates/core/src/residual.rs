//! Residual-policy mixtures `pi = (1 - lambda) beta + lambda rho` and the
//! per-state confidence constraint set that keeps them on the simplex.

use serde::{Deserialize, Serialize};

use crate::datagen::Batch;
use crate::error::{Error, Result};
use crate::mdp::{sa_index, TabularPolicy};

/// Tolerance for the per-state equality constraint
/// `sum_a lambda(s,a) (beta(a|s) - rho(a|s)) = 0`.
pub const CONSTRAINT_TOL: f64 = 1e-9;
/// Float dust below zero that gets clipped rather than rejected.
const DUST: f64 = 1e-12;

// ---------------------------------------------------------------------------
// ConfidenceTable
// ---------------------------------------------------------------------------

/// State-action confidence weights `lambda(s,a)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTable {
    n_states: usize,
    n_actions: usize,
    lam: Vec<f64>,
}

impl ConfidenceTable {
    pub fn new(n_states: usize, n_actions: usize, lam: Vec<f64>) -> Result<Self> {
        if lam.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "confidence table has {} entries, expected {}",
                lam.len(),
                n_states * n_actions
            )));
        }
        let mut clipped = lam;
        for v in &mut clipped {
            if !v.is_finite() || *v < -DUST || *v > 1.0 + DUST {
                return Err(Error::InvalidValue {
                    what: "confidence entry",
                    value: *v,
                });
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            n_states,
            n_actions,
            lam: clipped,
        })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            lam: vec![0.0; n_states * n_actions],
        }
    }

    /// State-constant confidence, feasible for any `(beta, rho)` pair.
    pub fn constant(n_states: usize, n_actions: usize, c: f64) -> Result<Self> {
        Self::new(n_states, n_actions, vec![c; n_states * n_actions])
    }

    /// Builds from full per-state blocks at the listed states, zero elsewhere.
    pub fn from_state_blocks(
        n_states: usize,
        n_actions: usize,
        states: &[usize],
        blocks: &[Vec<f64>],
    ) -> Result<Self> {
        if states.len() != blocks.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} states but {} blocks",
                states.len(),
                blocks.len()
            )));
        }
        let mut lam = vec![0.0; n_states * n_actions];
        for (&s, block) in states.iter().zip(blocks) {
            if s >= n_states {
                return Err(Error::IndexOutOfRange {
                    what: "state",
                    index: s,
                    bound: n_states,
                });
            }
            if block.len() != n_actions {
                return Err(Error::DimensionMismatch(format!(
                    "block for state {s} has {} entries, expected {n_actions}",
                    block.len()
                )));
            }
            lam[s * n_actions..(s + 1) * n_actions].copy_from_slice(block);
        }
        Self::new(n_states, n_actions, lam)
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
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.lam[sa_index(s, a, self.n_actions)]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.lam[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        self.lam[sa_index(s, a, self.n_actions)] = value;
    }

    pub fn to_json(&self) -> ConfidenceFile {
        ConfidenceFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            lam: (0..self.n_states).map(|s| self.row(s).to_vec()).collect(),
        }
    }

    pub fn from_json(file: ConfidenceFile) -> Result<Self> {
        let mut lam = Vec::with_capacity(file.n_states * file.n_actions);
        for row in &file.lam {
            lam.extend_from_slice(row);
        }
        Self::new(file.n_states, file.n_actions, lam)
    }
}

/// On-disk JSON layout for [`ConfidenceTable`], mirroring the policy format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub lam: Vec<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Per-state equality residual `sum_a lambda(s,a) (beta(a|s) - rho(a|s))`.
pub fn equality_residual(lam_row: &[f64], beta_row: &[f64], rho_row: &[f64]) -> f64 {
    lam_row
        .iter()
        .zip(beta_row.iter().zip(rho_row))
        .map(|(&l, (&b, &r))| l * (b - r))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub max_equality_residual: f64,
    pub worst_state: usize,
    pub box_violations: usize,
    pub max_box_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks `lambda` against the constraint set for `(beta, rho)`; always
/// returns a report rather than erroring.
pub fn validate_confidence(
    lam: &ConfidenceTable,
    beta: &TabularPolicy,
    rho: &TabularPolicy,
) -> Result<ConfidenceReport> {
    check_shapes(lam, beta, rho)?;
    let mut max_residual = 0.0f64;
    let mut worst_state = 0;
    let mut box_violations = 0;
    let mut max_box = 0.0f64;
    for s in 0..lam.n_states {
        let residual = equality_residual(lam.row(s), beta.row(s), rho.row(s)).abs();
        if residual > max_residual {
            max_residual = residual;
            worst_state = s;
        }
        for &v in lam.row(s) {
            let excess = (-v).max(v - 1.0).max(0.0);
            if excess > 0.0 {
                box_violations += 1;
                max_box = max_box.max(excess);
            }
        }
    }
    let pass = max_residual <= CONSTRAINT_TOL && box_violations == 0;
    Ok(ConfidenceReport {
        max_equality_residual: max_residual,
        worst_state,
        box_violations,
        max_box_violation: max_box,
        tolerance: CONSTRAINT_TOL,
        pass,
    })
}

fn check_shapes(lam: &ConfidenceTable, beta: &TabularPolicy, rho: &TabularPolicy) -> Result<()> {
    if beta.n_states() != rho.n_states()
        || beta.n_actions() != rho.n_actions()
        || lam.n_states != beta.n_states()
        || lam.n_actions != beta.n_actions()
    {
        return Err(Error::DimensionMismatch(
            "confidence, behavior, and candidate shapes differ".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

/// A materialized residual policy together with its parts.
#[derive(Debug, Clone)]
pub struct ResidualPolicy {
    pub behavior: TabularPolicy,
    pub candidate: TabularPolicy,
    pub confidence: ConfidenceTable,
    pub mixed: TabularPolicy,
}

/// Materializes `pi(a|s) = (1 - lambda(s,a)) beta(a|s) + lambda(s,a) rho(a|s)`.
///
/// Rejects confidences that violate the constraint set beyond tolerance; rows
/// are renormalized, which moves entries by at most the feasibility residual.
pub fn mix(
    beta: &TabularPolicy,
    rho: &TabularPolicy,
    lam: &ConfidenceTable,
) -> Result<ResidualPolicy> {
    check_shapes(lam, beta, rho)?;
    let report = validate_confidence(lam, beta, rho)?;
    if !report.pass {
        return Err(Error::ConfidenceInfeasible {
            state: report.worst_state,
            residual: report.max_equality_residual.max(report.max_box_violation),
            tolerance: CONSTRAINT_TOL,
        });
    }
    let mut rows = Vec::with_capacity(beta.n_states());
    for s in 0..beta.n_states() {
        let mut row: Vec<f64> = (0..beta.n_actions())
            .map(|a| {
                let l = lam.get(s, a);
                (1.0 - l) * beta.prob(s, a) + l * rho.prob(s, a)
            })
            .collect();
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > CONSTRAINT_TOL {
            return Err(Error::ConfidenceInfeasible {
                state: s,
                residual: (sum - 1.0).abs(),
                tolerance: CONSTRAINT_TOL,
            });
        }
        row.iter_mut().for_each(|p| *p /= sum);
        rows.push(row);
    }
    Ok(ResidualPolicy {
        behavior: beta.clone(),
        candidate: rho.clone(),
        confidence: lam.clone(),
        mixed: TabularPolicy::from_rows(rows)?,
    })
}

// ---------------------------------------------------------------------------
// Tabular extension of batch confidences
// ---------------------------------------------------------------------------

/// Builds a full confidence table from per-sample values: `lambda(s,a)` takes
/// the batch value where `(s,a)` appears in the batch and 0 elsewhere.
/// Duplicate `(s,a)` samples must carry identical values.
pub fn extend_tabular(
    batch_lam: &[f64],
    batch: &Batch,
    n_states: usize,
    n_actions: usize,
) -> Result<ConfidenceTable> {
    if batch_lam.len() != batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} confidence values for {} transitions",
            batch_lam.len(),
            batch.len()
        )));
    }
    let mut lam = vec![0.0; n_states * n_actions];
    let mut seen = vec![false; n_states * n_actions];
    for (t, &value) in batch.transitions.iter().zip(batch_lam) {
        if t.state >= n_states || t.action >= n_actions {
            return Err(Error::IndexOutOfRange {
                what: "batch state-action",
                index: t.state,
                bound: n_states,
            });
        }
        let sa = sa_index(t.state, t.action, n_actions);
        if seen[sa] && lam[sa] != value {
            return Err(Error::ConflictingDuplicate {
                state: t.state,
                action: t.action,
                first: lam[sa],
                second: value,
            });
        }
        lam[sa] = value;
        seen[sa] = true;
    }
    ConfidenceTable::new(n_states, n_actions, lam)
}
