//! Euclidean projection onto the per-state confidence set
//! `{lambda in [0,1]^A : sum_a lambda_a (rho(a|s) - beta(a|s)) = 0}`.
//!
//! The exact projection comes from the 1-D dual of the KKT system: the
//! projection is `clip(y - mu * delta)` for the multiplier `mu` that zeroes
//! the constraint, and that scalar is found by bisection on a monotone
//! piecewise-linear function. Dykstra's alternating projection onto the
//! box/affine pair is provided as well; the projected-gradient QP solver uses
//! it, and the two routes agree to tight tolerance.

use serde::{Deserialize, Serialize};

/// Entries of `rho - beta` smaller than this are treated as a vacuous
/// constraint (projection reduces to a box clip).
const DELTA_EPS: f64 = 1e-14;

fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// `clip(y - mu * delta)` evaluated against the constraint.
fn dual_residual(y: &[f64], delta: &[f64], mu: f64) -> f64 {
    y.iter()
        .zip(delta)
        .map(|(&yi, &di)| clip01(yi - mu * di) * di)
        .sum()
}

/// Exact projection of `y` onto `{x in [0,1]^n : delta^T x = 0}`.
pub fn project_box_hyperplane(y: &[f64], delta: &[f64]) -> Vec<f64> {
    debug_assert_eq!(y.len(), delta.len());
    if delta.iter().all(|d| d.abs() <= DELTA_EPS) {
        return y.iter().map(|&v| clip01(v)).collect();
    }
    // Bracket the dual root using the clipping breakpoints.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&yi, &di) in y.iter().zip(delta) {
        if di.abs() > DELTA_EPS {
            let a = yi / di;
            let b = (yi - 1.0) / di;
            lo = lo.min(a.min(b));
            hi = hi.max(a.max(b));
        }
    }
    let mut lo = lo - 1.0;
    let mut hi = hi + 1.0;
    // dual_residual is nonincreasing in mu with a sign change inside [lo, hi]
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dual_residual(y, delta, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    y.iter()
        .zip(delta)
        .map(|(&yi, &di)| clip01(yi - mu * di))
        .collect()
}

/// Outcome of projecting a confidence label at one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionOutcome {
    /// Exact Euclidean projection onto the constraint set.
    pub projected: Vec<f64>,
    /// The one-shot clipped formula `clip(y + delta * mu)` with
    /// `mu = -delta^T y / ||delta||^2`; exact only when no clipping binds.
    pub one_shot: Vec<f64>,
    /// True when the one-shot heuristic differs from the exact projection.
    pub one_shot_differs: bool,
}

/// Projects a per-action confidence label onto the feasible set at a state
/// with rows `beta_row`, `rho_row`.
pub fn project_confidence(label: &[f64], beta_row: &[f64], rho_row: &[f64]) -> ProjectionOutcome {
    let delta: Vec<f64> = rho_row.iter().zip(beta_row).map(|(&r, &b)| r - b).collect();
    let projected = project_box_hyperplane(label, &delta);
    let norm2: f64 = delta.iter().map(|d| d * d).sum();
    let one_shot = if norm2 <= DELTA_EPS {
        label.iter().map(|&v| clip01(v)).collect::<Vec<f64>>()
    } else {
        let mu = -label.iter().zip(&delta).map(|(&l, &d)| l * d).sum::<f64>() / norm2;
        label
            .iter()
            .zip(&delta)
            .map(|(&l, &d)| clip01(l + d * mu))
            .collect()
    };
    let one_shot_differs = projected
        .iter()
        .zip(&one_shot)
        .any(|(&a, &b)| (a - b).abs() > 1e-9);
    ProjectionOutcome {
        projected,
        one_shot,
        one_shot_differs,
    }
}

/// Dykstra's alternating projection onto the intersection of the box
/// `[0,1]^n` and the block-affine set `{delta_s^T x_s = 0 for each block}`.
/// `deltas` holds one `rho - beta` row per block of `block_len` coordinates.
pub fn dykstra_box_affine(
    y: &[f64],
    deltas: &[Vec<f64>],
    block_len: usize,
    max_iter: usize,
    tol: f64,
) -> Vec<f64> {
    let n = y.len();
    debug_assert_eq!(n, deltas.len() * block_len);
    let mut x = y.to_vec();
    let mut p = vec![0.0; n]; // box correction
    let mut q = vec![0.0; n]; // affine correction
    for _ in 0..max_iter {
        let mut shift = 0.0f64;
        // box step
        for i in 0..n {
            let yi = x[i] + p[i];
            let xi = clip01(yi);
            p[i] = yi - xi;
            shift = shift.max((xi - x[i]).abs());
            x[i] = xi;
        }
        // affine step, blockwise hyperplane projection
        for (b, delta) in deltas.iter().enumerate() {
            let range = b * block_len..(b + 1) * block_len;
            let norm2: f64 = delta.iter().map(|d| d * d).sum();
            if norm2 <= DELTA_EPS {
                for i in range {
                    let yi = x[i] + q[i];
                    q[i] = 0.0;
                    shift = shift.max((yi - x[i]).abs());
                    x[i] = yi;
                }
                continue;
            }
            let mut dot = 0.0;
            for (k, i) in range.clone().enumerate() {
                dot += (x[i] + q[i]) * delta[k];
            }
            let scale = dot / norm2;
            for (k, i) in range.enumerate() {
                let yi = x[i] + q[i];
                let xi = yi - delta[k] * scale;
                q[i] = yi - xi;
                shift = shift.max((xi - x[i]).abs());
                x[i] = xi;
            }
        }
        if shift <= tol {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn feasible_point_is_fixed() {
        let beta = [0.5, 0.5];
        let rho = [0.9, 0.1];
        // label (c, c) is feasible for any c
        let out = project_confidence(&[0.3, 0.3], &beta, &rho);
        assert_abs_diff_eq!(out.projected[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(out.projected[1], 0.3, epsilon = 1e-12);
        assert!(!out.one_shot_differs);
    }

    #[test]
    fn two_action_projection_by_hand() {
        // delta = (0.4, -0.4) forces lambda_0 = lambda_1; projecting (1, 0)
        // onto the diagonal gives (0.5, 0.5).
        let out = project_confidence(&[1.0, 0.0], &[0.5, 0.5], &[0.9, 0.1]);
        assert_abs_diff_eq!(out.projected[0], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(out.projected[1], 0.5, epsilon = 1e-10);
    }

    #[test]
    fn identical_policies_reduce_to_box_clip() {
        let beta = [0.4, 0.6];
        let out = project_confidence(&[1.4, -0.2], &beta, &beta);
        assert_eq!(out.projected, vec![1.0, 0.0]);
    }

    fn random_simplex(rng: &mut StdRng, n: usize) -> Vec<f64> {
        let mut row: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
        let fix: f64 = row.iter().sum();
        row[0] += 1.0 - fix;
        row
    }

    /// Grid oracle: nearest feasible point on the parameterized constraint
    /// surface, refined locally, best over every pivot choice. Independent of
    /// the dual-based projection.
    fn grid_nearest(label: &[f64], delta: &[f64], steps: usize, rounds: usize) -> Vec<f64> {
        let n = label.len();
        let mut best_overall: Option<(f64, Vec<f64>)> = None;
        for pivot in 0..n {
            if delta[pivot].abs() < 1e-9 {
                continue;
            }
            let x = grid_nearest_with_pivot(label, delta, steps, rounds, pivot);
            let dist: f64 = x.iter().zip(label).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if best_overall.as_ref().is_none_or(|(d, _)| dist < *d) {
                best_overall = Some((dist, x));
            }
        }
        best_overall.map(|(_, x)| x).unwrap_or_else(|| vec![0.0; n])
    }

    fn grid_nearest_with_pivot(
        label: &[f64],
        delta: &[f64],
        steps: usize,
        rounds: usize,
        pivot: usize,
    ) -> Vec<f64> {
        let n = label.len();
        let free: Vec<usize> = (0..n).filter(|&i| i != pivot).collect();
        let mut center: Vec<f64> = vec![0.5; free.len()];
        let mut width = 0.5f64;
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..rounds {
            let mut counters = vec![0usize; free.len()];
            'grid: loop {
                let mut x = vec![0.0; n];
                for (k, &i) in free.iter().enumerate() {
                    let t = counters[k] as f64 / steps as f64;
                    x[i] = (center[k] - width + 2.0 * width * t).clamp(0.0, 1.0);
                }
                let partial: f64 = free.iter().map(|&i| x[i] * delta[i]).sum();
                let xp = -partial / delta[pivot];
                if (0.0..=1.0).contains(&xp) {
                    x[pivot] = xp;
                    let dist: f64 = x.iter().zip(label).map(|(&a, &b)| (a - b) * (a - b)).sum();
                    if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                        best = Some((dist, x));
                    }
                }
                // odometer over the free coordinates
                let mut k = 0;
                loop {
                    if k == counters.len() {
                        break 'grid;
                    }
                    counters[k] += 1;
                    if counters[k] <= steps {
                        break;
                    }
                    counters[k] = 0;
                    k += 1;
                }
            }
            if let Some((_, x)) = &best {
                for (k, &i) in free.iter().enumerate() {
                    center[k] = x[i];
                }
            }
            width = (width * 4.0 / steps as f64).max(1e-6);
        }
        best.map(|(_, x)| x).unwrap_or_else(|| vec![0.0; n])
    }

    #[test]
    fn projection_matches_grid_oracle() {
        let mut rng = StdRng::seed_from_u64(47);
        for _ in 0..60 {
            let n = rng.gen_range(2..=4);
            let beta = random_simplex(&mut rng, n);
            let rho = random_simplex(&mut rng, n);
            let delta: Vec<f64> = rho.iter().zip(&beta).map(|(&r, &b)| r - b).collect();
            let label: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..1.3)).collect();
            let exact = project_box_hyperplane(&label, &delta);
            let residual: f64 = exact.iter().zip(&delta).map(|(&x, &d)| x * d).sum();
            assert!(residual.abs() <= 1e-9, "constraint residual {residual}");
            let oracle = grid_nearest(&label, &delta, 40, 4);
            let dist: f64 = exact
                .iter()
                .zip(&oracle)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist <= 1e-3, "projection {dist} from grid oracle");
        }
    }

    #[test]
    fn dykstra_agrees_with_exact_blockwise_projection() {
        let mut rng = StdRng::seed_from_u64(53);
        for _ in 0..40 {
            let blocks = rng.gen_range(1..=3);
            let n_actions = rng.gen_range(2..=4);
            let mut deltas = Vec::new();
            let mut y = Vec::new();
            for _ in 0..blocks {
                let beta = random_simplex(&mut rng, n_actions);
                let rho = random_simplex(&mut rng, n_actions);
                deltas.push(
                    rho.iter()
                        .zip(&beta)
                        .map(|(&r, &b)| r - b)
                        .collect::<Vec<f64>>(),
                );
                for _ in 0..n_actions {
                    y.push(rng.gen_range(-0.5..1.5));
                }
            }
            let dyk = dykstra_box_affine(&y, &deltas, n_actions, 100_000, 1e-14);
            for (b, delta) in deltas.iter().enumerate() {
                let exact = project_box_hyperplane(&y[b * n_actions..(b + 1) * n_actions], delta);
                for k in 0..n_actions {
                    assert_abs_diff_eq!(dyk[b * n_actions + k], exact[k], epsilon = 1e-7);
                }
            }
        }
    }
}
