//! Acceptance suite: every release criterion as one test with a printed
//! pass/fail line. Tolerances are pinned here, not configurable.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use brpo_core::baselines::{self, BaselineAlgo, BaselineConfig};
use brpo_core::critic::{advantage_from_config, CriticConfig, CriticSource};
use brpo_core::datagen::{behavior_policy, generate_batch, make_env, EnvKind, EnvSpec};
use brpo_core::instances::{random_distribution, random_mdp, random_policy};
use brpo_core::mdp::{expected_return, TabularPolicy};
use brpo_core::solver::projection::project_confidence;
use brpo_core::solver::{coordinate_ascent, HalfStep, SolverConfig};
use brpo_core::suites::{bounds_suite, identity_suite, proofs_suite, qp_suite};

fn verdict(criterion: &str, pass: bool, detail: &str) -> bool {
    println!(
        "acceptance {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

#[test]
fn criterion_1_difference_value_identities() {
    let start = Instant::now();
    let report = identity_suite(100, 20_001).expect("suite runs");
    let elapsed = start.elapsed().as_secs_f64();
    let worst: f64 = report.rows.iter().map(|r| r.measured).fold(0.0, f64::max);
    let pass = report.all_pass() && elapsed <= 10.0;
    assert!(
        verdict(
            "1 (difference-value identities)",
            pass,
            &format!("100 instances, max deviation {worst:.2e}, {elapsed:.1}s")
        ),
        "failures: {:?}",
        report.failures()
    );
}

#[test]
fn criterion_2_bound_certification() {
    let start = Instant::now();
    let report = bounds_suite(200, 20_002).expect("suite runs");
    let elapsed = start.elapsed().as_secs_f64();
    let cert_rows: Vec<_> = report
        .rows
        .iter()
        .filter(|r| !r.check.starts_with("anchor"))
        .collect();
    let pass = cert_rows.iter().all(|r| r.pass) && elapsed <= 60.0;
    assert!(
        verdict(
            "2 (bound certification)",
            pass,
            &format!(
                "200 instances, {} checks, worst slack {:.2e}, {elapsed:.1}s",
                cert_rows.len(),
                cert_rows
                    .iter()
                    .map(|r| r.slack)
                    .fold(f64::INFINITY, f64::min)
            )
        ),
        "failures: {:?}",
        report.failures()
    );
}

#[test]
fn criterion_3_mm_anchors() {
    let report = bounds_suite(200, 20_003).expect("suite runs");
    let anchors: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.check.starts_with("anchor"))
        .collect();
    // machine precision: the anchor objectives must be exactly zero
    let worst = anchors.iter().map(|r| r.measured.abs()).fold(0.0, f64::max);
    let pass = !anchors.is_empty() && anchors.iter().all(|r| r.measured == 0.0);
    assert!(verdict(
        "3 (minorization anchors)",
        pass,
        &format!(
            "{} anchor checks, worst magnitude {worst:.2e}",
            anchors.len()
        )
    ));
}

#[test]
fn criterion_4_qp_oracle_equivalence() {
    let report = qp_suite(50, 20_004).expect("suite runs");
    let pass = report.all_pass();
    assert!(
        verdict(
            "4 (confidence-program oracle equivalence)",
            pass,
            &format!(
                "50 instances, {} checks, worst slack {:.2e}",
                report.rows.len(),
                report.worst_slack()
            )
        ),
        "failures: {:?}",
        report.failures()
    );
}

/// Grid oracle for the projection: nearest feasible point on the pivot
/// parameterization of the constraint surface, refined locally; best across
/// every pivot choice. Independent of the dual-based projection under test.
fn grid_nearest_feasible(label: &[f64], delta: &[f64]) -> Vec<f64> {
    let n = label.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for pivot in 0..n {
        if delta[pivot].abs() < 1e-9 {
            continue;
        }
        let free: Vec<usize> = (0..n).filter(|&i| i != pivot).collect();
        let d = free.len();
        let mut center = vec![0.5; d];
        let mut width = 0.5f64;
        let steps = 24usize;
        for _ in 0..6 {
            let mut counters = vec![0usize; d];
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
                    if best.as_ref().is_none_or(|(db, _)| dist < *db) {
                        best = Some((dist, x));
                    }
                }
                let mut k = 0;
                loop {
                    if k == d {
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
            width = (width * 4.0 / steps as f64).max(1e-7);
        }
    }
    best.map(|(_, x)| x).unwrap_or_else(|| vec![0.0; n])
}

#[test]
fn criterion_5_projection_exactness() {
    let mut rng = StdRng::seed_from_u64(20_005);
    let mut worst_dist = 0.0f64;
    let mut worst_residual = 0.0f64;
    for _ in 0..500 {
        let n = rng.gen_range(2..=4);
        let beta = random_distribution(&mut rng, n, 1e-3);
        let rho = random_distribution(&mut rng, n, 1e-3);
        let label: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..1.3)).collect();
        let out = project_confidence(&label, &beta, &rho);
        let delta: Vec<f64> = rho.iter().zip(&beta).map(|(&r, &b)| r - b).collect();
        let residual: f64 = out
            .projected
            .iter()
            .zip(&delta)
            .map(|(&x, &d)| x * d)
            .sum::<f64>()
            .abs();
        worst_residual = worst_residual.max(residual);
        let oracle = grid_nearest_feasible(&label, &delta);
        let dist: f64 = out
            .projected
            .iter()
            .zip(&oracle)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst_dist = worst_dist.max(dist);
    }
    let pass = worst_dist <= 1e-3 && worst_residual <= 1e-9;
    assert!(verdict(
        "5 (projection exactness)",
        pass,
        &format!(
            "500 cases, worst oracle distance {worst_dist:.2e}, worst residual {worst_residual:.2e}"
        )
    ));
}

#[test]
fn criterion_6_coordinate_ascent_monotonicity() {
    let mut rng = StdRng::seed_from_u64(20_006);
    let config = SolverConfig {
        iterations: 20,
        ..SolverConfig::default()
    };
    let mut instances = 0;
    let mut worst = f64::INFINITY;
    while instances < 20 {
        let mdp = random_mdp(&mut rng, 6, 3, &[0.5, 0.9, 0.95]);
        let beta = random_policy(&mut rng, mdp.n_states(), mdp.n_actions());
        let batch = generate_batch(&mdp, &beta, 500, 30_000 + instances, 100).expect("batch");
        let adv = brpo_core::critic::advantage_behavior(&mdp, &beta).expect("advantage");
        let out = coordinate_ascent(&batch, &beta, &adv, mdp.gamma(), &config, None, None)
            .expect("ascent");
        let mut pre = None;
        for row in &out.trace {
            match row.half_step {
                HalfStep::Candidate => pre = Some(row.l_bar),
                HalfStep::Confidence => {
                    if let Some(p) = pre.take() {
                        worst = worst.min(row.l_bar - p);
                    }
                }
            }
        }
        instances += 1;
    }
    let pass = worst >= -config.qp_tol;
    assert!(verdict(
        "6 (confidence-step monotonicity)",
        pass,
        &format!("20 instances x 20 iterations, worst step {worst:.2e}")
    ));
}

struct ImprovementRun {
    env: &'static str,
    exact_gap: f64,
    batch_gap: f64,
    headroom: f64,
}

fn improvement_runs() -> Vec<ImprovementRun> {
    let specs = [
        ("chain(8)", EnvSpec::new(EnvKind::Chain { n: 8 }, 0.99)),
        (
            "gridworld(5,5,0.1)",
            EnvSpec::new(
                EnvKind::Gridworld {
                    width: 5,
                    height: 5,
                    slip: 0.1,
                },
                0.99,
            ),
        ),
        (
            "cliff(4,3)",
            EnvSpec::new(
                EnvKind::Cliff {
                    width: 4,
                    height: 3,
                    fall_penalty: 0.0,
                },
                0.99,
            ),
        ),
    ];
    let epsilons = [0.05, 0.15, 0.25, 0.5, 1.0];
    let mut runs = Vec::new();
    for (name, spec) in &specs {
        let mdp = make_env(spec).expect("env");
        let j_star = expected_return(
            &mdp,
            &brpo_core::critic::greedy_policy(&mdp).expect("planner"),
        )
        .expect("return");
        for &eps in &epsilons {
            let behavior = behavior_policy(&mdp, 0.75, eps).expect("behavior");
            let beta = behavior.policy;
            let j_beta = behavior.achieved_return;
            for seed in 0..5u64 {
                let batch = generate_batch(&mdp, &beta, 100_000, seed, 200).expect("batch");
                let empirical = brpo_core::mdp::empirical_mdp(
                    &batch,
                    mdp.n_states(),
                    mdp.n_actions(),
                    mdp.gamma(),
                )
                .expect("model");
                let config = SolverConfig::default();
                let mut gaps = [0.0; 2];
                for (i, source) in [CriticSource::ExactModel, CriticSource::EmpiricalModel]
                    .iter()
                    .enumerate()
                {
                    let critic = CriticConfig {
                        mu: config.mu,
                        source: *source,
                        ..CriticConfig::default()
                    };
                    let adv =
                        advantage_from_config(&critic, Some(&mdp), Some(&empirical.mdp), &beta)
                            .expect("advantage");
                    let out = coordinate_ascent(
                        &batch,
                        &beta,
                        &adv,
                        mdp.gamma(),
                        &config,
                        None,
                        Some(spec.coordinates()),
                    )
                    .expect("ascent");
                    let j_pi = expected_return(&mdp, &out.policy.mixed).expect("return");
                    gaps[i] = j_pi - j_beta;
                }
                runs.push(ImprovementRun {
                    env: name,
                    exact_gap: gaps[0],
                    batch_gap: gaps[1],
                    headroom: j_star - j_beta,
                });
            }
        }
    }
    runs
}

#[test]
fn criteria_7_and_8_improvement_and_ordering() {
    let start = Instant::now();
    let runs = improvement_runs();
    let total = runs.len();
    assert_eq!(total, 75);

    // criterion 7: improvement guarantees
    let exact_ok = runs.iter().filter(|r| r.exact_gap >= -1e-6).count();
    let batch_ok = runs
        .iter()
        .filter(|r| r.batch_gap >= -0.02 * r.headroom)
        .count();
    let mut mean_gaps = Vec::new();
    let mut per_env_positive = true;
    for env in ["chain(8)", "gridworld(5,5,0.1)", "cliff(4,3)"] {
        let gaps: Vec<f64> = runs
            .iter()
            .filter(|r| r.env == env)
            .map(|r| r.exact_gap)
            .collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        per_env_positive &= mean > 0.0;
        mean_gaps.push(format!("{env}: {mean:.3e}"));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass7 = exact_ok as f64 >= 0.95 * total as f64
        && batch_ok as f64 >= 0.90 * total as f64
        && per_env_positive
        && elapsed <= 600.0;
    let ok = verdict(
        "7 (improvement guarantee)",
        pass7,
        &format!(
            "exact {exact_ok}/{total}, batch-critic {batch_ok}/{total}, mean exact gaps [{}], {elapsed:.0}s",
            mean_gaps.join(", ")
        ),
    );

    // criterion 8: qualitative ordering on the cliff at the exploration extremes
    let cliff_spec = EnvSpec::new(
        EnvKind::Cliff {
            width: 4,
            height: 3,
            fall_penalty: 0.0,
        },
        0.99,
    );
    let mdp = make_env(&cliff_spec).expect("env");
    let mut ordering_pass = true;
    let mut detail = Vec::new();
    for &eps in &[0.05, 1.0] {
        let behavior = behavior_policy(&mdp, 0.75, eps).expect("behavior");
        let beta = behavior.policy;
        let mut means = [0.0f64; 4]; // brpo, bc, batch_q, spibb
        for seed in 0..5u64 {
            let batch = generate_batch(&mdp, &beta, 100_000, seed, 200).expect("batch");
            let empirical =
                brpo_core::mdp::empirical_mdp(&batch, mdp.n_states(), mdp.n_actions(), mdp.gamma())
                    .expect("model");
            let config = SolverConfig::default();
            let critic = CriticConfig {
                mu: config.mu,
                ..CriticConfig::default()
            };
            let adv = advantage_from_config(&critic, Some(&mdp), Some(&empirical.mdp), &beta)
                .expect("advantage");
            let brpo = coordinate_ascent(
                &batch,
                &beta,
                &adv,
                mdp.gamma(),
                &config,
                None,
                Some(cliff_spec.coordinates()),
            )
            .expect("ascent")
            .policy
            .mixed;
            let bc =
                baselines::behavior_cloning(&batch, Some(&beta), mdp.n_states(), mdp.n_actions())
                    .expect("bc")
                    .policy;
            let bq = baselines::batch_q_policy(
                &batch,
                mdp.n_states(),
                mdp.n_actions(),
                mdp.gamma(),
                &CriticConfig::default(),
            )
            .expect("batch-q");
            let spibb = baselines::spibb_policy(
                &batch,
                &beta,
                &BaselineConfig::new(BaselineAlgo::Spibb),
                mdp.gamma(),
            )
            .expect("spibb");
            for (i, pi) in [&brpo, &bc, &bq, &spibb].iter().enumerate() {
                means[i] += expected_return(&mdp, pi).expect("return") / 5.0;
            }
        }
        let ok_here = means[0] >= means[1] && means[0] >= means[2] && means[0] >= means[3];
        ordering_pass &= ok_here;
        detail.push(format!(
            "eps {eps}: brpo {:.3} vs bc {:.3}, batch_q {:.3}, spibb {:.3}",
            means[0], means[1], means[2], means[3]
        ));
    }
    let ok8 = verdict(
        "8 (qualitative ordering on the cliff)",
        ordering_pass,
        &detail.join("; "),
    );
    assert!(ok && ok8);
}

#[test]
fn criterion_9_matrix_identity_suite() {
    let report = proofs_suite(100, 20_009).expect("suite runs");
    let pass = report.all_pass();
    assert!(
        verdict(
            "9 (matrix-identity suite)",
            pass,
            &format!(
                "100 instances, {} checks, worst slack {:.2e}",
                report.rows.len(),
                report.worst_slack()
            )
        ),
        "failures: {:?}",
        report.failures()
    );
}

/// Criterion 10 (byte-identical determinism of gen/train) lives in the
/// command-line crate's acceptance test, where the binary is available.
#[test]
fn criterion_10_pointer() {
    println!("acceptance 10 (determinism): see the brpo-cli acceptance test target");
}

// Additional cross-checks the suites rely on.

#[test]
fn behavior_policies_hit_their_targets_on_acceptance_envs() {
    for spec in [
        EnvSpec::new(EnvKind::Chain { n: 8 }, 0.99),
        EnvSpec::new(
            EnvKind::Gridworld {
                width: 5,
                height: 5,
                slip: 0.1,
            },
            0.99,
        ),
        EnvSpec::new(
            EnvKind::Cliff {
                width: 4,
                height: 3,
                fall_penalty: 0.0,
            },
            0.99,
        ),
    ] {
        let mdp = make_env(&spec).expect("env");
        let out = behavior_policy(&mdp, 0.75, 0.15).expect("behavior");
        assert!(out.full_support);
        let base_target = 0.75 * out.optimal_return + 0.25 * out.uniform_return;
        assert!(
            (out.target_return - base_target).abs() <= 1e-12,
            "target bookkeeping broken"
        );
    }
}

#[test]
fn uniform_behavior_beats_greedy_on_blind_cliff_model() {
    // the ordering criterion depends on the empirical model being blind at
    // absorbing states; make the mechanism explicit
    let spec = EnvSpec::new(
        EnvKind::Cliff {
            width: 4,
            height: 3,
            fall_penalty: 0.0,
        },
        0.99,
    );
    let mdp = make_env(&spec).expect("env");
    let beta = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let batch = generate_batch(&mdp, &beta, 100_000, 0, 200).expect("batch");
    let model = brpo_core::mdp::empirical_mdp(&batch, mdp.n_states(), mdp.n_actions(), 0.99)
        .expect("model");
    // no transitions out of absorbing cells are logged, so their rows are
    // unsupported and the model sees no reward signal at all
    assert!(!model.is_supported(3, 0), "goal rows should be unsupported");
    let j_beta = expected_return(&mdp, &beta).expect("return");
    assert!(j_beta > 0.0, "uniform behavior reaches the goal sometimes");
}
