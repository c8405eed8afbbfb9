//! The batch confidence program: a box- and equality-constrained quadratic
//! maximization over one confidence vector per distinct batch state.
//!
//! The objective is `c^T x - alpha (u^T x)(w^T x)` with nonnegative `u`, `w`
//! and `w = diag(|adv|) u`. Written as `c^T x - x^T Theta x / 2` the matrix
//! `Theta = alpha (u w^T + w u^T)` has rank at most two, and unless `u` and
//! `w` are parallel it carries one negative eigenvalue, so the program is not
//! concave in general. The solvers below handle that honestly:
//!
//! - `active_set`: exact stationary-face enumeration at small dimension,
//!   falling back to a multiplier-grid global search with exact per-block
//!   polish for larger instances;
//! - `projected_gradient`: multi-start ascent with Dykstra feasibility
//!   projections;
//! - `closed_form_clip`: the ridge-regularized stationary formula, clipped to
//!   the box and then projected back onto the constraint set (the raw clip
//!   violates the equalities); kept as a comparison heuristic;
//! - `brute_force`: feasible-manifold grid search with local refinement, the
//!   oracle the others are measured against.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::Batch;
use crate::error::{Error, Result};
use crate::mdp::{AdvantageTable, TabularPolicy};
use crate::solver::projection::{dykstra_box_affine, project_box_hyperplane};

const ZERO_TOL: f64 = 1e-14;
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Dimension bound for the exact stationary-face enumeration.
const EXACT_ENUM_LIMIT: usize = 10;

// ---------------------------------------------------------------------------
// Problem assembly
// ---------------------------------------------------------------------------

/// Sample-average approximations of the three bound terms at one confidence
/// vector, and their combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaaTerms {
    pub l_prime: f64,
    pub l_double: f64,
    pub l_triple: f64,
    /// `l_prime - l_double * l_triple`.
    pub objective: f64,
}

/// The assembled program over distinct batch states. Duplicate samples weight
/// their state's block by frequency; with no duplicates the quadratic reduces
/// to `gamma / (|B|(1-gamma)) (D d d^T + d d^T D)` with `d = |rho - beta|`.
#[derive(Debug, Clone)]
pub struct ConfidenceQp {
    /// Sorted distinct batch states, one `n_actions` block each.
    pub states: Vec<usize>,
    /// Sample count per distinct state.
    pub counts: Vec<f64>,
    pub n_actions: usize,
    pub batch_size: usize,
    pub gamma: f64,
    /// Linear term: per block `count * (rho - beta) * adv`.
    pub linear: Vec<f64>,
    /// `count * |rho - beta|` stacked.
    pub u: Vec<f64>,
    /// `count * |rho - beta| * |adv|` stacked.
    pub w: Vec<f64>,
    /// Per-block `rho - beta` rows (the equality constraints).
    pub deltas: Vec<Vec<f64>>,
}

/// Assembles the confidence program for a batch at the current candidate.
pub fn build_confidence_qp(
    batch: &Batch,
    beta: &TabularPolicy,
    rho: &TabularPolicy,
    adv: &AdvantageTable,
    gamma: f64,
) -> Result<ConfidenceQp> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if beta.n_states() != rho.n_states() || beta.n_actions() != rho.n_actions() {
        return Err(Error::DimensionMismatch(
            "behavior and candidate shapes differ".into(),
        ));
    }
    let n_actions = beta.n_actions();
    let states = batch.distinct_states();
    let mut counts = vec![0.0; states.len()];
    for t in &batch.transitions {
        if t.state >= beta.n_states() || t.action >= n_actions {
            return Err(Error::IndexOutOfRange {
                what: "batch state-action",
                index: t.state,
                bound: beta.n_states(),
            });
        }
        if beta.prob(t.state, t.action) <= 0.0 {
            return Err(Error::UndefinedImportanceRatio {
                state: t.state,
                action: t.action,
            });
        }
        let block = states.binary_search(&t.state).expect("state is distinct");
        counts[block] += 1.0;
    }
    let dim = states.len() * n_actions;
    let mut linear = Vec::with_capacity(dim);
    let mut u = Vec::with_capacity(dim);
    let mut w = Vec::with_capacity(dim);
    let mut deltas = Vec::with_capacity(states.len());
    for (block, &s) in states.iter().enumerate() {
        let mut delta = Vec::with_capacity(n_actions);
        for a in 0..n_actions {
            let d = rho.prob(s, a) - beta.prob(s, a);
            let adv_sa = adv.get(s, a);
            linear.push(counts[block] * d * adv_sa);
            u.push(counts[block] * d.abs());
            w.push(counts[block] * d.abs() * adv_sa.abs());
            delta.push(d);
        }
        deltas.push(delta);
    }
    Ok(ConfidenceQp {
        states,
        counts,
        n_actions,
        batch_size: batch.len(),
        gamma,
        linear,
        u,
        w,
        deltas,
    })
}

impl ConfidenceQp {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    /// Quadratic coupling strength `gamma / ((1 - gamma) |B|)`.
    pub fn alpha(&self) -> f64 {
        self.gamma / ((1.0 - self.gamma) * self.batch_size as f64)
    }

    /// `c^T x - alpha (u^T x)(w^T x)`, the scaled SAA objective.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let c = dot(&self.linear, x);
        let tu = dot(&self.u, x);
        let tw = dot(&self.w, x);
        c - self.alpha() * tu * tw
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let tu = dot(&self.u, x);
        let tw = dot(&self.w, x);
        let a = self.alpha();
        self.linear
            .iter()
            .zip(self.u.iter().zip(&self.w))
            .map(|(&c, (&ui, &wi))| c - a * (tw * ui + tu * wi))
            .collect()
    }

    /// Dense `Theta = alpha (u w^T + w u^T)`.
    pub fn theta(&self) -> DMatrix<f64> {
        let n = self.dim();
        let a = self.alpha();
        DMatrix::from_fn(n, n, |i, j| {
            a * (self.u[i] * self.w[j] + self.w[i] * self.u[j])
        })
    }

    /// Closed-form extreme eigenvalues of the rank-two quadratic:
    /// `alpha (<u,w> +- |u||w|)`.
    pub fn theta_eigen_bounds(&self) -> (f64, f64) {
        let a = self.alpha();
        let uw = dot(&self.u, &self.w);
        let nu = dot(&self.u, &self.u).sqrt();
        let nw = dot(&self.w, &self.w).sqrt();
        (a * (uw - nu * nw), a * (uw + nu * nw))
    }

    /// SAA functionals at a confidence vector over the batch blocks.
    pub fn saa_terms(&self, x: &[f64]) -> SaaTerms {
        let scale = 1.0 / ((1.0 - self.gamma) * self.batch_size as f64);
        let l_prime = dot(&self.linear, x) * scale;
        let l_double = dot(&self.u, x) * scale;
        let l_triple = dot(&self.w, x) * scale * self.gamma;
        SaaTerms {
            l_prime,
            l_double,
            l_triple,
            objective: l_prime - l_double * l_triple,
        }
    }

    /// SAA terms for a full confidence table restricted to the batch blocks.
    pub fn saa_terms_of_table(&self, lam: &crate::residual::ConfidenceTable) -> SaaTerms {
        let x = self.restrict_table(lam);
        self.saa_terms(&x)
    }

    /// Stacks a full confidence table into this program's variable layout.
    pub fn restrict_table(&self, lam: &crate::residual::ConfidenceTable) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        for &s in &self.states {
            x.extend_from_slice(lam.row(s));
        }
        x
    }

    /// Max per-block equality residual.
    pub fn constraint_residual(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (b, delta) in self.deltas.iter().enumerate() {
            let r: f64 = (0..self.n_actions)
                .map(|a| delta[a] * x[b * self.n_actions + a])
                .sum();
            worst = worst.max(r.abs());
        }
        let box_excess = x
            .iter()
            .map(|&v| (-v).max(v - 1.0).max(0.0))
            .fold(0.0, f64::max);
        worst.max(box_excess)
    }

    /// Exact blockwise projection onto the feasible set.
    pub fn project_feasible(&self, y: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (b, delta) in self.deltas.iter().enumerate() {
            let block = &y[b * self.n_actions..(b + 1) * self.n_actions];
            out.extend(project_box_hyperplane(block, delta));
        }
        out
    }

    /// True when advantages vanish on the batch blocks: linear term and
    /// quadratic are identically zero and every feasible point scores zero.
    pub fn is_degenerate(&self) -> bool {
        self.linear.iter().all(|&c| c.abs() <= ZERO_TOL)
            && self.w.iter().all(|&w| w.abs() <= ZERO_TOL)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Configuration and outcome
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpMethod {
    ClosedFormClip,
    ProjectedGradient,
    ActiveSet,
    BruteForce,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub method: QpMethod,
    pub constraint_residual: f64,
    pub theta_min_eigenvalue: f64,
    /// Closed-form only: whether the box clip was active and how far the
    /// final feasibility projection moved the clipped point.
    pub clip_active: bool,
    pub projection_shift: f64,
}

/// Maximizes the program with the requested method. Every output satisfies
/// the box and equality constraints within `FEASIBILITY_TOL`; the degenerate
/// zero objective ties break to the all-zero (most conservative) vector.
pub fn solve_confidence(
    qp: &ConfidenceQp,
    method: QpMethod,
    qp_tol: f64,
    qp_ridge: f64,
) -> Result<SolveOutcome> {
    let (min_eig, _) = qp.theta_eigen_bounds();
    if qp.is_degenerate() {
        return Ok(SolveOutcome {
            lambda: vec![0.0; qp.dim()],
            objective: 0.0,
            method,
            constraint_residual: 0.0,
            theta_min_eigenvalue: min_eig,
            clip_active: false,
            projection_shift: 0.0,
        });
    }
    let mut clip_active = false;
    let mut projection_shift = 0.0;
    let mut lambda = match method {
        QpMethod::ClosedFormClip => {
            let (x, clipped, shift) = solve_closed_form(qp, qp_ridge)?;
            clip_active = clipped;
            projection_shift = shift;
            x
        }
        QpMethod::ProjectedGradient => solve_projected_gradient(qp, qp_tol),
        QpMethod::ActiveSet => solve_active_set(qp),
        QpMethod::BruteForce => solve_brute_force(qp),
    };
    if qp.constraint_residual(&lambda) > FEASIBILITY_TOL * 0.5 {
        lambda = qp.project_feasible(&lambda);
    }
    let constraint_residual = qp.constraint_residual(&lambda);
    debug_assert!(constraint_residual <= FEASIBILITY_TOL);
    Ok(SolveOutcome {
        objective: qp.objective(&lambda),
        lambda,
        method,
        constraint_residual,
        theta_min_eigenvalue: min_eig,
        clip_active,
        projection_shift,
    })
}

// ---------------------------------------------------------------------------
// Block linear programs (used by the multiplier search and range bounds)
// ---------------------------------------------------------------------------

/// Maximizes `g^T x` over `{x in [0,1]^n : delta^T x = 0}` exactly via the
/// piecewise-linear dual.
fn block_lp(g: &[f64], delta: &[f64]) -> Vec<f64> {
    let n = g.len();
    if delta.iter().all(|d| d.abs() <= ZERO_TOL) {
        return g
            .iter()
            .map(|&gi| if gi > 0.0 { 1.0 } else { 0.0 })
            .collect();
    }
    // dual value phi(mu) = sum_a max(0, g_a - mu delta_a); minimize over the
    // breakpoints mu = g_a / delta_a
    let mut bps: Vec<f64> = g
        .iter()
        .zip(delta)
        .filter(|(_, &d)| d.abs() > ZERO_TOL)
        .map(|(&gi, &di)| gi / di)
        .collect();
    bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let phi = |mu: f64| -> f64 {
        g.iter()
            .zip(delta)
            .map(|(&gi, &di)| (gi - mu * di).max(0.0))
            .sum()
    };
    let mut best_mu = bps[0];
    let mut best_phi = phi(best_mu);
    for &mu in &bps[1..] {
        let v = phi(mu);
        if v < best_phi {
            best_phi = v;
            best_mu = mu;
        }
    }
    // primal recovery: decided coordinates by reduced-cost sign, ties soak up
    // the equality residual
    let tie_tol = 1e-12 * (1.0 + best_mu.abs());
    let mut x = vec![0.0; n];
    let mut ties = Vec::new();
    let mut residual = 0.0;
    for a in 0..n {
        let v = g[a] - best_mu * delta[a];
        if v > tie_tol {
            x[a] = 1.0;
            residual += delta[a];
        } else if v >= -tie_tol && delta[a].abs() > ZERO_TOL {
            ties.push(a);
        }
    }
    for &a in &ties {
        let need = -residual / delta[a];
        let val = need.clamp(0.0, 1.0);
        x[a] = val;
        residual += delta[a] * val;
    }
    if residual.abs() > 1e-12 {
        return project_box_hyperplane(&x, delta);
    }
    x
}

/// Exact optimal value of `max g^T x` over a block, via the dual: the
/// piecewise-linear convex `phi(mu) = sum_a (g_a - mu delta_a)^+` attains its
/// minimum at a breakpoint.
fn block_lp_value(g: &[f64], delta: &[f64]) -> f64 {
    if delta.iter().all(|d| d.abs() <= ZERO_TOL) {
        return g.iter().map(|&gi| gi.max(0.0)).sum();
    }
    let phi = |mu: f64| -> f64 {
        g.iter()
            .zip(delta)
            .map(|(&gi, &di)| (gi - mu * di).max(0.0))
            .sum()
    };
    g.iter()
        .zip(delta)
        .filter(|(_, &d)| d.abs() > ZERO_TOL)
        .map(|(&gi, &di)| phi(gi / di))
        .fold(f64::INFINITY, f64::min)
}

/// Range of `v^T x` over the feasible set, summed blockwise.
fn linear_range(qp: &ConfidenceQp, v: &[f64]) -> (f64, f64) {
    let mut lo = 0.0;
    let mut hi = 0.0;
    for (b, delta) in qp.deltas.iter().enumerate() {
        let seg = &v[b * qp.n_actions..(b + 1) * qp.n_actions];
        let x_hi = block_lp(seg, delta);
        hi += dot(seg, &x_hi);
        let neg: Vec<f64> = seg.iter().map(|&z| -z).collect();
        let x_lo = block_lp(&neg, delta);
        lo += dot(seg, &x_lo);
    }
    (lo, hi)
}

// ---------------------------------------------------------------------------
// Exact stationary-face enumeration (small instances)
// ---------------------------------------------------------------------------

/// Exact global maximizer for `dim <= EXACT_ENUM_LIMIT`: enumerates every
/// lower/free/upper assignment, solves the stationary system on the free
/// coordinates with block equality multipliers, and keeps the best feasible
/// candidate. Local maxima of the (possibly indefinite) program all appear
/// among these candidates.
fn solve_exact_enumeration(qp: &ConfidenceQp) -> Vec<f64> {
    let n = qp.dim();
    let theta = qp.theta();
    let mut best = vec![0.0; n];
    let mut best_val = qp.objective(&best);
    let mut assignment = vec![0u8; n]; // 0 = lower, 1 = upper, 2 = free
    loop {
        if let Some(x) = stationary_candidate(qp, &theta, &assignment) {
            if qp.constraint_residual(&x) <= FEASIBILITY_TOL {
                let v = qp.objective(&x);
                if v > best_val + 1e-15 {
                    best_val = v;
                    best = x;
                }
            }
        }
        // odometer over assignments
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            assignment[k] += 1;
            if assignment[k] <= 2 {
                break;
            }
            assignment[k] = 0;
            k += 1;
        }
    }
}

fn stationary_candidate(
    qp: &ConfidenceQp,
    theta: &DMatrix<f64>,
    assignment: &[u8],
) -> Option<Vec<f64>> {
    let n = qp.dim();
    let free: Vec<usize> = (0..n).filter(|&i| assignment[i] == 2).collect();
    let fixed_value = |i: usize| -> f64 {
        match assignment[i] {
            0 => 0.0,
            1 => 1.0,
            _ => unreachable!(),
        }
    };
    // equality rows restricted to blocks with free support in delta
    let mut rows: Vec<(usize, f64)> = Vec::new(); // (block, rhs)
    for (b, delta) in qp.deltas.iter().enumerate() {
        let base = b * qp.n_actions;
        let mut free_norm = 0.0;
        let mut fixed_residual = 0.0;
        for a in 0..qp.n_actions {
            let i = base + a;
            if assignment[i] == 2 {
                free_norm += delta[a] * delta[a];
            } else {
                fixed_residual += delta[a] * fixed_value(i);
            }
        }
        if free_norm > ZERO_TOL {
            rows.push((b, -fixed_residual));
        } else if fixed_residual.abs() > FEASIBILITY_TOL {
            return None; // fully pinned block violates its constraint
        }
    }
    let f = free.len();
    let m = rows.len();
    if f == 0 {
        let x: Vec<f64> = (0..n).map(fixed_value).collect();
        return Some(x);
    }
    let mut system = DMatrix::zeros(f + m, f + m);
    let mut rhs = DVector::zeros(f + m);
    for (fi, &i) in free.iter().enumerate() {
        let mut r = qp.linear[i];
        for j in 0..n {
            if assignment[j] != 2 {
                r -= theta[(i, j)] * fixed_value(j);
            }
        }
        rhs[fi] = r;
        for (fj, &j) in free.iter().enumerate() {
            system[(fi, fj)] = theta[(i, j)];
        }
    }
    for (mi, &(b, row_rhs)) in rows.iter().enumerate() {
        let base = b * qp.n_actions;
        for (fi, &i) in free.iter().enumerate() {
            if i >= base && i < base + qp.n_actions {
                let coeff = qp.deltas[b][i - base];
                system[(fi, f + mi)] = coeff;
                system[(f + mi, fi)] = coeff;
            }
        }
        rhs[f + mi] = row_rhs;
    }
    let sol = system.lu().solve(&rhs)?;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            if assignment[i] == 2 {
                f64::NAN
            } else {
                fixed_value(i)
            }
        })
        .collect();
    for (fi, &i) in free.iter().enumerate() {
        let v = sol[fi];
        if !(-1e-10..=1.0 + 1e-10).contains(&v) {
            return None;
        }
        x[i] = v.clamp(0.0, 1.0);
    }
    Some(x)
}

// ---------------------------------------------------------------------------
// Multiplier-grid global search with exact block polish (large instances)
// ---------------------------------------------------------------------------

/// At the optimum the gradient `c - alpha (t2 u + t1 w)` with the optimal
/// scalars `t1 = u^T x`, `t2 = w^T x` supports `x` as a block-separable LP
/// solution. Gridding the two scalars, solving the induced LPs, and
/// polishing blocks exactly yields a strong deterministic global search.
fn solve_kappa_grid(qp: &ConfidenceQp) -> Vec<f64> {
    let alpha = qp.alpha();
    let (_, t1_hi) = linear_range(qp, &qp.u);
    let (_, t2_hi) = linear_range(qp, &qp.w);
    let lp_for = |t1: f64, t2: f64| -> Vec<f64> {
        let cost: Vec<f64> = qp
            .linear
            .iter()
            .zip(qp.u.iter().zip(&qp.w))
            .map(|(&c, (&ui, &wi))| c - alpha * (t2 * ui + t1 * wi))
            .collect();
        let mut x = Vec::with_capacity(qp.dim());
        for (b, delta) in qp.deltas.iter().enumerate() {
            x.extend(block_lp(
                &cost[b * qp.n_actions..(b + 1) * qp.n_actions],
                delta,
            ));
        }
        x
    };

    let mut best = vec![0.0; qp.dim()];
    let mut best_val = qp.objective(&best);
    let consider = |x: Vec<f64>, best: &mut Vec<f64>, best_val: &mut f64| {
        let v = qp.objective(&x);
        if v > *best_val + 1e-15 {
            *best_val = v;
            *best = x;
        }
    };

    let steps = 16usize;
    for i in 0..=steps {
        for j in 0..=steps {
            let t1 = t1_hi * i as f64 / steps as f64;
            let t2 = t2_hi * j as f64 / steps as f64;
            consider(lp_for(t1, t2), &mut best, &mut best_val);
        }
    }
    // refine around the incumbent's own multipliers
    for round in 0..3 {
        let t1c = dot(&qp.u, &best);
        let t2c = dot(&qp.w, &best);
        let w1 = t1_hi * 0.25f64.powi(round + 1);
        let w2 = t2_hi * 0.25f64.powi(round + 1);
        for i in 0..=8 {
            for j in 0..=8 {
                let t1 = (t1c - w1 + 2.0 * w1 * i as f64 / 8.0).max(0.0);
                let t2 = (t2c - w2 + 2.0 * w2 * j as f64 / 8.0).max(0.0);
                consider(lp_for(t1, t2), &mut best, &mut best_val);
            }
        }
    }
    polish_blocks(qp, best)
}

/// Exact coordinate ascent over blocks: each block subproblem shares the
/// bilinear structure and is solved by the small-face enumeration.
pub(crate) fn polish_blocks(qp: &ConfidenceQp, mut x: Vec<f64>) -> Vec<f64> {
    let alpha = qp.alpha();
    for _ in 0..60 {
        let before = qp.objective(&x);
        for (b, delta) in qp.deltas.iter().enumerate() {
            let base = b * qp.n_actions;
            let range = base..base + qp.n_actions;
            let mut t1_rest = dot(&qp.u, &x);
            let mut t2_rest = dot(&qp.w, &x);
            for i in range.clone() {
                t1_rest -= qp.u[i] * x[i];
                t2_rest -= qp.w[i] * x[i];
            }
            // block objective: [c - alpha (t2_rest u + t1_rest w)]^T y
            //                  - alpha (u^T y)(w^T y)
            let sub = ConfidenceQp {
                states: vec![qp.states[b]],
                counts: vec![qp.counts[b]],
                n_actions: qp.n_actions,
                batch_size: qp.batch_size,
                gamma: qp.gamma,
                linear: range
                    .clone()
                    .map(|i| qp.linear[i] - alpha * (t2_rest * qp.u[i] + t1_rest * qp.w[i]))
                    .collect(),
                u: qp.u[range.clone()].to_vec(),
                w: qp.w[range.clone()].to_vec(),
                deltas: vec![delta.clone()],
            };
            let y = solve_exact_enumeration(&sub);
            let mut trial = x.clone();
            trial[range].copy_from_slice(&y);
            if qp.objective(&trial) > qp.objective(&x) + 1e-15 {
                x = trial;
            }
        }
        if qp.objective(&x) <= before + 1e-13 {
            break;
        }
    }
    x
}

fn solve_active_set(qp: &ConfidenceQp) -> Vec<f64> {
    let exact = if qp.dim() <= EXACT_ENUM_LIMIT {
        solve_exact_enumeration(qp)
    } else {
        solve_kappa_grid(qp)
    };
    // never fall below the projected closed-form heuristic
    if let Ok((cf, _, _)) = solve_closed_form(qp, 1e-6) {
        if qp.objective(&cf) > qp.objective(&exact) {
            return polish_blocks(qp, cf);
        }
    }
    exact
}

// ---------------------------------------------------------------------------
// Projected gradient with Dykstra feasibility projections
// ---------------------------------------------------------------------------

fn solve_projected_gradient(qp: &ConfidenceQp, qp_tol: f64) -> Vec<f64> {
    let n = qp.dim();
    let (lo_eig, hi_eig) = qp.theta_eigen_bounds();
    let lipschitz = hi_eig.abs().max(lo_eig.abs()).max(1e-12);
    let step = 1.0 / lipschitz;
    let project = |y: &[f64]| dykstra_box_affine(y, &qp.deltas, qp.n_actions, 20_000, 1e-13);

    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; n], vec![0.5; n], vec![1.0; n]];
    let scale = qp
        .linear
        .iter()
        .fold(0.0f64, |m, &c| m.max(c.abs()))
        .max(1e-12);
    starts.push(
        qp.linear
            .iter()
            .map(|&c| (c / scale).clamp(0.0, 1.0))
            .collect(),
    );
    if let Ok((cf, _, _)) = solve_closed_form(qp, 1e-6) {
        starts.push(cf);
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in starts {
        let mut x = project(&start);
        let mut val = qp.objective(&x);
        for _ in 0..50_000 {
            let g = qp.gradient(&x);
            let y: Vec<f64> = x.iter().zip(&g).map(|(&xi, &gi)| xi + step * gi).collect();
            let next = project(&y);
            let next_val = qp.objective(&next);
            let shift = x
                .iter()
                .zip(&next)
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0, f64::max);
            x = next;
            let improved = next_val - val;
            val = next_val;
            if shift <= 1e-13 || improved.abs() <= qp_tol * 1e-4 {
                break;
            }
        }
        if best.as_ref().is_none_or(|(v, _)| val > *v) {
            best = Some((val, x));
        }
    }
    // Dykstra stops at a tolerance; the exact blockwise projection clears the
    // remaining dust so the output is hard-feasible. Ascent crawls near flat
    // faces, so the incumbent gets the exact per-block polish before it is
    // returned.
    let x = best.map(|(_, x)| x).unwrap_or_else(|| vec![0.0; n]);
    polish_blocks(qp, qp.project_feasible(&x))
}

// ---------------------------------------------------------------------------
// Closed-form stationary formula with ridge, clip, and repair projection
// ---------------------------------------------------------------------------

fn solve_closed_form(qp: &ConfidenceQp, ridge: f64) -> Result<(Vec<f64>, bool, f64)> {
    if ridge < 0.0 {
        return Err(Error::InvalidValue {
            what: "qp_ridge",
            value: ridge,
        });
    }
    let n = qp.dim();
    let mut theta = qp.theta();
    for i in 0..n {
        theta[(i, i)] += ridge;
    }
    let lu = theta.lu();
    let inv = match lu.try_inverse() {
        Some(inv) => inv,
        None => return Err(Error::SingularTheta),
    };
    // guard against a formally invertible but numerically useless factorization
    if ridge == 0.0 {
        let (lo, hi) = qp.theta_eigen_bounds();
        if lo.abs().min(hi.abs()) <= 1e-12 || n > 2 {
            return Err(Error::SingularTheta);
        }
    }
    let c = DVector::from_column_slice(&qp.linear);
    // equality rows for blocks with a nonzero delta
    let active: Vec<usize> = (0..qp.deltas.len())
        .filter(|&b| qp.deltas[b].iter().any(|d| d.abs() > ZERO_TOL))
        .collect();
    let raw = if active.is_empty() {
        &inv * &c
    } else {
        let m = active.len();
        let mut mat = DMatrix::zeros(m, n);
        for (row, &b) in active.iter().enumerate() {
            for a in 0..qp.n_actions {
                mat[(row, b * qp.n_actions + a)] = qp.deltas[b][a];
            }
        }
        let m_inv = &mat * &inv;
        let gram = &m_inv * mat.transpose();
        let nu = gram
            .lu()
            .solve(&(&m_inv * &c))
            .ok_or(Error::SingularTheta)?
            .map(|v| -v);
        &inv * (&c + mat.transpose() * nu)
    };
    let clipped: Vec<f64> = raw.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    let clip_active = raw.iter().any(|&v| !(0.0..=1.0).contains(&v));
    let projected = qp.project_feasible(&clipped);
    let shift = clipped
        .iter()
        .zip(&projected)
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((projected, clip_active, shift))
}

// ---------------------------------------------------------------------------
// Brute force: feasible-manifold grid with local refinement
// ---------------------------------------------------------------------------

/// On the slice `u^T x = t` the quadratic collapses and the program becomes
/// an LP; its exact value comes from dualizing the coupling row and summing
/// exact block values. Scanning and refining over `t` yields a near-global
/// objective estimate plus primal recovery points used as search seeds.
fn slice_scan(qp: &ConfidenceQp) -> Vec<(f64, Vec<f64>)> {
    let alpha = qp.alpha();
    let (t_lo, t_hi) = linear_range(qp, &qp.u);
    if t_hi - t_lo <= ZERO_TOL {
        return Vec::new();
    }
    // dual value of the slice LP at multiplier theta
    let phi = |t: f64, theta: f64| -> f64 {
        let mut total = theta * t;
        for (b, delta) in qp.deltas.iter().enumerate() {
            let base = b * qp.n_actions;
            let g: Vec<f64> = (0..qp.n_actions)
                .map(|a| qp.linear[base + a] - alpha * t * qp.w[base + a] - theta * qp.u[base + a])
                .collect();
            total += block_lp_value(&g, delta);
        }
        total
    };
    let slice_value = |t: f64| -> (f64, f64) {
        // ternary search on the convex dual over an adaptive bracket
        let scale = qp.linear.iter().map(|c| c.abs()).fold(1.0, f64::max)
            + alpha * t.abs() * qp.w.iter().map(|w| w.abs()).fold(0.0, f64::max);
        let (mut lo, mut hi) = (-scale * 100.0, scale * 100.0);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if phi(t, m1) < phi(t, m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let theta = 0.5 * (lo + hi);
        (phi(t, theta), theta)
    };
    // scan and refine over t
    let mut lo = t_lo;
    let mut hi = t_hi;
    let mut best_t = t_lo;
    let mut best_v = f64::NEG_INFINITY;
    for round in 0..5 {
        let nodes = if round == 0 { 256 } else { 64 };
        for i in 0..=nodes {
            let t = lo + (hi - lo) * i as f64 / nodes as f64;
            let (v, _) = slice_value(t);
            if v > best_v {
                best_v = v;
                best_t = t;
            }
        }
        let step = (hi - lo) / nodes as f64;
        lo = (best_t - 2.0 * step).max(t_lo);
        hi = (best_t + 2.0 * step).min(t_hi);
    }
    // primal recovery at the best slices: solve the dualized LP blockwise
    let mut seeds = Vec::new();
    for &t in &[best_t, t_lo, t_hi] {
        let (_, theta) = slice_value(t);
        let mut x = Vec::with_capacity(qp.dim());
        for (b, delta) in qp.deltas.iter().enumerate() {
            let base = b * qp.n_actions;
            let g: Vec<f64> = (0..qp.n_actions)
                .map(|a| qp.linear[base + a] - alpha * t * qp.w[base + a] - theta * qp.u[base + a])
                .collect();
            x.extend(block_lp(&g, delta));
        }
        seeds.push((qp.objective(&x), x));
    }
    seeds
}

/// Coordinate pattern search on the pivot-parameterized feasible manifold,
/// used to close small primal-recovery gaps around a seed.
fn pattern_search(qp: &ConfidenceQp, start: Vec<f64>) -> (f64, Vec<f64>) {
    let mut x = qp.project_feasible(&start);
    let mut val = qp.objective(&x);
    let mut step = 0.1f64;
    let mut sweeps = 0;
    while step > 1e-9 && sweeps < 5_000 {
        sweeps += 1;
        let mut improved = false;
        for i in 0..qp.dim() {
            for dir in [-1.0, 1.0] {
                let mut trial = x.clone();
                trial[i] = (trial[i] + dir * step).clamp(0.0, 1.0);
                let trial = qp.project_feasible(&trial);
                let v = qp.objective(&trial);
                if v > val + 1e-15 {
                    val = v;
                    x = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (val, x)
}

fn solve_brute_force(qp: &ConfidenceQp) -> Vec<f64> {
    let mut best = vec![0.0; qp.dim()];
    let mut best_val = qp.objective(&best);
    for (_, seed) in slice_scan(qp) {
        let (v, x) = pattern_search(qp, seed);
        if v > best_val {
            best_val = v;
            best = x;
        }
    }
    let (v, x) = brute_force_grid(qp);
    if v > best_val {
        best = x;
    }
    best
}

fn brute_force_grid(qp: &ConfidenceQp) -> (f64, Vec<f64>) {
    // Pivot candidates per block (the coordinate solved from the equality);
    // enumerating pivot choices avoids trapping when the optimum pins the
    // solved coordinate at a bound.
    let pivot_sets: Vec<Vec<Option<usize>>> = qp
        .deltas
        .iter()
        .map(|delta| {
            let usable: Vec<Option<usize>> = (0..qp.n_actions)
                .filter(|&a| delta[a].abs() > ZERO_TOL)
                .map(Some)
                .collect();
            if usable.is_empty() {
                vec![None]
            } else {
                usable
            }
        })
        .collect();
    let combos: usize = pivot_sets.iter().map(Vec::len).product();
    let mut best = vec![0.0; qp.dim()];
    let mut best_val = qp.objective(&best);
    let combo_budget = if combos <= 64 { combos } else { 1 };
    for combo in 0..combo_budget {
        let mut idx = combo;
        let pivots: Vec<Option<usize>> = pivot_sets
            .iter()
            .enumerate()
            .map(|(b, set)| {
                if combo_budget == 1 {
                    // fall back to the largest-magnitude pivot
                    (0..qp.n_actions)
                        .filter(|&a| qp.deltas[b][a].abs() > ZERO_TOL)
                        .max_by(|&i, &j| {
                            qp.deltas[b][i]
                                .abs()
                                .partial_cmp(&qp.deltas[b][j].abs())
                                .unwrap()
                        })
                        .map(|a| b * qp.n_actions + a)
                } else {
                    let choice = set[idx % set.len()];
                    idx /= set.len();
                    choice.map(|a| b * qp.n_actions + a)
                }
            })
            .collect();
        let (val, x) = brute_force_with_pivots(qp, &pivots);
        if val > best_val {
            best_val = val;
            best = x;
        }
    }
    // a cheap pattern-search polish tightens the last digits
    let (polished_val, polished) = pattern_search(qp, best.clone());
    if polished_val > best_val {
        return (polished_val, polished);
    }
    (best_val, best)
}

fn brute_force_with_pivots(qp: &ConfidenceQp, pivots: &[Option<usize>]) -> (f64, Vec<f64>) {
    let free: Vec<usize> = (0..qp.dim())
        .filter(|&i| !pivots.contains(&Some(i)))
        .collect();
    let d = free.len();
    let steps = match d {
        0 => 1,
        1 => 1000,
        2 => 100,
        3 => 20,
        4 => 10,
        5 => 7,
        _ => 5,
    };
    let assemble = |coords: &[f64]| -> Option<Vec<f64>> {
        let mut x = vec![0.0; qp.dim()];
        for (k, &i) in free.iter().enumerate() {
            x[i] = coords[k];
        }
        for (b, delta) in qp.deltas.iter().enumerate() {
            if let Some(p) = pivots[b] {
                let base = b * qp.n_actions;
                let partial: f64 = (0..qp.n_actions)
                    .filter(|&a| base + a != p)
                    .map(|a| delta[a] * x[base + a])
                    .sum();
                let v = -partial / delta[p - base];
                if !(-1e-12..=1.0 + 1e-12).contains(&v) {
                    return None;
                }
                x[p] = v.clamp(0.0, 1.0);
            }
        }
        Some(x)
    };
    let scan = |center: &[f64], width: f64, s: usize| -> Vec<(f64, Vec<f64>)> {
        // top few grid points, best first
        let mut top: Vec<(f64, Vec<f64>)> = Vec::new();
        let mut counters = vec![0usize; d];
        loop {
            let coords: Vec<f64> = (0..d)
                .map(|k| {
                    (center[k] - width + 2.0 * width * counters[k] as f64 / s as f64)
                        .clamp(0.0, 1.0)
                })
                .collect();
            if let Some(x) = assemble(&coords) {
                let v = qp.objective(&x);
                if top.len() < 4 || v > top.last().unwrap().0 {
                    top.push((v, coords));
                    top.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                    top.truncate(4);
                }
            }
            if d == 0 {
                break;
            }
            let mut k = 0;
            loop {
                if k == d {
                    break;
                }
                counters[k] += 1;
                if counters[k] <= s {
                    break;
                }
                counters[k] = 0;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        top
    };

    let mut best = vec![0.0; qp.dim()];
    let mut best_val = qp.objective(&best);
    // coarse scan, then shrinking refinements from each surviving seed
    for (_, seed) in scan(&vec![0.5; d], 0.5, steps) {
        let mut center = seed;
        let mut width = 2.0 * 0.5 / steps as f64;
        for _ in 0..30 {
            let local = scan(&center, width, 8);
            if let Some((v, coords)) = local.into_iter().next() {
                if let Some(x) = assemble(&coords) {
                    if v > best_val {
                        best_val = v;
                        best = x;
                    }
                }
                center = coords;
            }
            width = (width * 4.0 / 8.0).max(1e-9);
        }
        if d == 0 {
            break;
        }
    }
    (best_val, best)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
