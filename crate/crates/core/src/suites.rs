//! Certification sweeps over random instances, shared by the command-line
//! `verify` subcommand and the acceptance tests. Each run is deterministic
//! given its seed and reports one row per check with the measured slack.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::instances::{random_feasible_confidence, random_mdp, random_policy};
use crate::mdp::{evaluate_policy, ValueTable};
use crate::residual::mix;
use crate::solver::qp::{build_confidence_qp, solve_confidence, QpMethod, FEASIBILITY_TOL};
use crate::value_gap::{
    diff_value_identity, lagrangian_objective, residual_cpi_bound, vanilla_cpi_bound,
    verify_matrix_identities, BoundReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    Identities,
    Bounds,
    Qp,
    Proofs,
}

impl FromStr for SuiteName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identities" => Ok(SuiteName::Identities),
            "bounds" => Ok(SuiteName::Bounds),
            "qp" => Ok(SuiteName::Qp),
            "proofs" => Ok(SuiteName::Proofs),
            other => Err(Error::Config(format!("unknown suite '{other}'"))),
        }
    }
}

impl std::fmt::Display for SuiteName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SuiteName::Identities => "identities",
            SuiteName::Bounds => "bounds",
            SuiteName::Qp => "qp",
            SuiteName::Proofs => "proofs",
        };
        write!(f, "{name}")
    }
}

/// One check on one instance. `value` is oriented so that `value >= 0` means
/// pass (a slack for inequalities, `tolerance - |residual|` for identities).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteRow {
    pub instance: usize,
    pub check: String,
    /// Right-hand side, residual, or objective being compared.
    pub measured: f64,
    /// Reference value the measurement is compared against.
    pub reference: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: SuiteName,
    pub trials: usize,
    pub seed: u64,
    pub rows: Vec<SuiteRow>,
    /// Full bound reports (bounds suite only), one JSON object per instance.
    pub reports: Vec<BoundReport>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> Vec<&SuiteRow> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    pub fn worst_slack(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.slack)
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn run_suite(suite: SuiteName, trials: usize, seed: u64) -> Result<SuiteReport> {
    match suite {
        SuiteName::Identities => identity_suite(trials, seed),
        SuiteName::Bounds => bounds_suite(trials, seed),
        SuiteName::Qp => qp_suite(trials, seed),
        SuiteName::Proofs => proofs_suite(trials, seed),
    }
}

fn row(instance: usize, check: &str, measured: f64, reference: f64, slack: f64) -> SuiteRow {
    SuiteRow {
        instance,
        check: check.to_string(),
        measured,
        reference,
        slack,
        pass: slack >= 0.0,
    }
}

type Instance = (
    crate::mdp::FiniteMdp,
    crate::mdp::TabularPolicy,
    crate::mdp::TabularPolicy,
    crate::residual::ConfidenceTable,
);

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let mdp = random_mdp(rng, 8, 4, &[0.5, 0.9, 0.95]);
    let beta = random_policy(rng, mdp.n_states(), mdp.n_actions());
    let rho = random_policy(rng, mdp.n_states(), mdp.n_actions());
    let lam = random_feasible_confidence(rng, &beta, &rho);
    (mdp, beta, rho, lam)
}

/// The three difference-value computations agree within 1e-8 sup-norm.
pub fn identity_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(trials);
    for i in 0..trials {
        let (mdp, beta, rho, lam) = random_instance(&mut rng);
        let report = diff_value_identity(&mdp, &beta, &rho, &lam)?;
        rows.push(row(
            i,
            "identity_max_deviation",
            report.max_pairwise_deviation,
            1e-8,
            1e-8 - report.max_pairwise_deviation,
        ));
    }
    Ok(SuiteReport {
        suite: SuiteName::Identities,
        trials,
        seed,
        rows,
        reports: Vec::new(),
    })
}

/// Every bound certifies against the exact gap; the tight configuration of
/// the vanilla bound matches the gap; the anchors are exactly zero; the
/// relaxed objective dominates the max-penalized right-hand side.
pub fn bounds_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for i in 0..trials {
        let (mdp, beta, rho, lam) = random_instance(&mut rng);
        let mut tables: Vec<(String, ValueTable)> = (0..5)
            .map(|k| {
                let values = (0..mdp.n_states())
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect();
                (format!("random{k}"), ValueTable { values })
            })
            .collect();
        tables.push(("v_beta".into(), evaluate_policy(&mdp, &beta)?));
        let report = BoundReport::compute(&mdp, &beta, &rho, &lam, &tables, &[0.0, 0.5, 1.0])?;
        for cert in &report.certifications {
            rows.push(row(
                i,
                &cert.name,
                cert.rhs,
                cert.exact_gap,
                cert.slack + crate::value_gap::CERT_SLACK_TOL,
            ));
        }
        // tightness: with U = V_pi the vanilla bound equals the gap
        let pi = mix(&beta, &rho, &lam)?.mixed;
        let v_pi = evaluate_policy(&mdp, &pi)?;
        let tight = vanilla_cpi_bound(&mdp, &beta, &rho, &lam, &v_pi, "v_pi")?;
        let dev = (tight.rhs - report.exact_gap).abs();
        rows.push(row(
            i,
            "vanilla_tightness",
            tight.rhs,
            report.exact_gap,
            1e-8 - dev,
        ));
        // relaxation ordering
        let residual = residual_cpi_bound(&mdp, &beta, &rho, &lam)?;
        rows.push(row(
            i,
            "lagrangian_dominates",
            report.lagrangian.objective,
            residual.rhs,
            report.lagrangian.objective - residual.rhs + 1e-12,
        ));
        // anchors are exactly zero
        let zero = crate::residual::ConfidenceTable::zeros(mdp.n_states(), mdp.n_actions());
        let anchor_zero = lagrangian_objective(&mdp, &beta, &rho, &zero)?.objective;
        rows.push(row(
            i,
            "anchor_lambda_zero",
            anchor_zero,
            0.0,
            -anchor_zero.abs(),
        ));
        let lam_same = random_feasible_confidence(&mut rng, &beta, &beta);
        let anchor_same = lagrangian_objective(&mdp, &beta, &beta, &lam_same)?.objective;
        rows.push(row(
            i,
            "anchor_rho_eq_beta",
            anchor_same,
            0.0,
            -anchor_same.abs(),
        ));
        reports.push(report);
    }
    Ok(SuiteReport {
        suite: SuiteName::Bounds,
        trials,
        seed,
        rows,
        reports,
    })
}

/// Solver cross-checks on small programs: the exact and gradient methods
/// reach the grid oracle, outputs are feasible, and the clipped closed form
/// never beats the exact method.
pub fn qp_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut i = 0;
    while i < trials {
        let mdp = random_mdp(&mut rng, 3, 3, &[0.5, 0.9]);
        let beta = random_policy(&mut rng, mdp.n_states(), mdp.n_actions());
        let rho = random_policy(&mut rng, mdp.n_states(), mdp.n_actions());
        let (_, adv) = crate::mdp::q_and_advantage(&mdp, &beta)?;
        let mut transitions = Vec::new();
        for s in 0..mdp.n_states() {
            for _ in 0..rng.gen_range(1..=3) {
                transitions.push(crate::datagen::Transition {
                    state: s,
                    action: rng.gen_range(0..mdp.n_actions()),
                    reward: 0.0,
                    next_state: 0,
                });
            }
        }
        let batch = crate::datagen::Batch::from_transitions(transitions, seed);
        let qp = build_confidence_qp(&batch, &beta, &rho, &adv, mdp.gamma())?;
        if qp.dim() > 6 {
            continue;
        }
        let brute = solve_confidence(&qp, QpMethod::BruteForce, 1e-10, 1e-6)?;
        let active = solve_confidence(&qp, QpMethod::ActiveSet, 1e-10, 1e-6)?;
        let pg = solve_confidence(&qp, QpMethod::ProjectedGradient, 1e-10, 1e-6)?;
        let cf = solve_confidence(&qp, QpMethod::ClosedFormClip, 1e-10, 1e-6)?;
        rows.push(row(
            i,
            "active_vs_brute",
            active.objective,
            brute.objective,
            1e-6 - (active.objective - brute.objective).abs(),
        ));
        rows.push(row(
            i,
            "pg_vs_brute",
            pg.objective,
            brute.objective,
            1e-6 - (pg.objective - brute.objective).abs(),
        ));
        rows.push(row(
            i,
            "closed_form_dominated",
            cf.objective,
            active.objective,
            active.objective - cf.objective + 1e-9,
        ));
        for (name, out) in [
            ("active", &active),
            ("pg", &pg),
            ("closed_form", &cf),
            ("brute", &brute),
        ] {
            rows.push(row(
                i,
                &format!("{name}_feasible"),
                out.constraint_residual,
                FEASIBILITY_TOL,
                FEASIBILITY_TOL - out.constraint_residual,
            ));
        }
        i += 1;
    }
    Ok(SuiteReport {
        suite: SuiteName::Qp,
        trials,
        seed,
        rows,
        reports: Vec::new(),
    })
}

/// Matrix identities behind the difference-value analysis.
pub fn proofs_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for i in 0..trials {
        let (mdp, beta, rho, lam) = random_instance(&mut rng);
        let report = verify_matrix_identities(&mdp, &beta, &rho, &lam)?;
        rows.push(row(
            i,
            "resolvent_identity",
            report.identity_residual,
            1e-8,
            1e-8 - report.identity_residual,
        ));
        rows.push(row(
            i,
            "perturbed_rows_stochastic",
            report.row_stochastic_residual,
            1e-10,
            1e-10 - report.row_stochastic_residual,
        ));
        rows.push(row(
            i,
            "occupancy_perturbation_rows_zero",
            report.occupancy_rowsum_residual,
            1e-10,
            1e-10 - report.occupancy_rowsum_residual,
        ));
        rows.push(row(
            i,
            "unit_rowsum",
            report.unit_rowsum_residual,
            1e-10,
            1e-10 - report.unit_rowsum_residual,
        ));
    }
    Ok(SuiteReport {
        suite: SuiteName::Proofs,
        trials,
        seed,
        rows,
        reports: Vec::new(),
    })
}
