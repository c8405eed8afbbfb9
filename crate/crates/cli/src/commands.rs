//! Implementations of the `gen`, `train`, `eval`, and `verify` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use brpo_core::baselines::{self, BaselineAlgo, BaselineConfig};
use brpo_core::critic::{advantage_from_config, CriticSource};
use brpo_core::datagen::{
    behavior_policy, generate_batch, make_env, read_batch, write_batch, Batch, EnvKind, EnvSpec,
};
use brpo_core::mdp::{empirical_mdp, expected_return, FiniteMdp, PolicyFile, TabularPolicy};
use brpo_core::solver::{coordinate_ascent, HalfStep};
use brpo_core::suites::{run_suite, SuiteName};

use crate::config::{EvalMode, ExperimentConfig};

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Environment, e.g. chain:8, gridworld:5x5:0.1, cliff:4x3
    #[arg(long)]
    pub env: String,
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    /// Behavior quality on the uniform-to-optimal return scale.
    #[arg(long, default_value_t = 0.75)]
    pub quality: f64,
    /// Exploration rate(s); comma-separated for several batches.
    #[arg(long, default_value = "0.25")]
    pub epsilon: String,
    /// Transitions per batch.
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub episode_cap: usize,
    /// Output path; with several epsilons, used as a prefix.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let kind: EnvKind = args.env.parse()?;
    let spec = EnvSpec::new(kind, args.gamma);
    let mdp = make_env(&spec)?;
    let epsilons: Vec<f64> = args
        .epsilon
        .split(',')
        .map(|e| e.trim().parse::<f64>().context("bad epsilon"))
        .collect::<Result<_>>()?;
    for &eps in &epsilons {
        let behavior = behavior_policy(&mdp, args.quality, eps)?;
        let mut batch =
            generate_batch(&mdp, &behavior.policy, args.n, args.seed, args.episode_cap)?;
        batch.meta.env = Some(spec.clone());
        batch.meta.env_hash = Some(spec.hash());
        batch.meta.epsilon = Some(eps);
        batch.meta.quality = Some(args.quality);
        let path = if epsilons.len() == 1 {
            args.out.clone()
        } else {
            let stem = args.out.to_string_lossy();
            let stem = stem.strip_suffix(".jsonl").unwrap_or(&stem);
            PathBuf::from(format!("{stem}_eps{eps}.jsonl"))
        };
        write_batch(&path, &batch)?;
        println!(
            "wrote {} ({} transitions, epsilon {eps}); exact J_beta = {:.12}",
            path.display(),
            batch.len(),
            behavior.achieved_return
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Algorithm: brpo, brpo-c, bc, batch-q, kl-q, spibb
    #[arg(long)]
    pub algo: String,
    #[arg(long)]
    pub batch: PathBuf,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Constant confidence override for brpo-c.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Advantage source override: exact or batch.
    #[arg(long)]
    pub adv: Option<String>,
    /// Output policy JSON; defaults next to the batch file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics CSV; defaults next to the batch file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

struct TrainContext {
    config: ExperimentConfig,
    batch: Batch,
    env: Option<FiniteMdp>,
    spec: Option<EnvSpec>,
    beta: Option<TabularPolicy>,
    gamma: f64,
    n_states: usize,
    n_actions: usize,
}

fn load_train_context(args: &TrainArgs) -> Result<TrainContext> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(l) = args.lambda {
        config
            .baseline
            .get_or_insert(BaselineConfig::new(BaselineAlgo::BrpoC))
            .const_lambda = l;
    }
    let batch = read_batch(&args.batch)?;
    let spec = batch.meta.env.clone();
    let env = spec.as_ref().map(make_env).transpose()?;
    let beta = batch
        .meta
        .behavior
        .clone()
        .map(TabularPolicy::from_json)
        .transpose()?;
    let gamma = spec.as_ref().map_or(config.env.gamma, |s| s.gamma);
    let (n_states, n_actions) = match (&env, &beta) {
        (Some(m), _) => (m.n_states(), m.n_actions()),
        (None, Some(b)) => (b.n_states(), b.n_actions()),
        (None, None) => bail!("batch metadata carries neither an environment nor a policy"),
    };
    Ok(TrainContext {
        config,
        batch,
        env,
        spec,
        beta,
        gamma,
        n_states,
        n_actions,
    })
}

fn require_beta(ctx: &TrainContext) -> Result<&TabularPolicy> {
    ctx.beta
        .as_ref()
        .context("this algorithm needs the behavior policy recorded in the batch metadata")
}

fn advantage_source_override(args: &TrainArgs) -> Result<Option<CriticSource>> {
    match args.adv.as_deref() {
        None => Ok(None),
        Some("exact") => Ok(Some(CriticSource::ExactModel)),
        Some("batch") | Some("empirical") => Ok(Some(CriticSource::EmpiricalModel)),
        Some(other) => bail!("unknown advantage source '{other}'"),
    }
}

type MetricsRow = (usize, String, Vec<(String, f64)>, Option<f64>);

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let ctx = load_train_context(args)?;
    let exact_eval = matches!(ctx.config.eval.mode, EvalMode::Exact) && ctx.env.is_some();
    let mut rows: Vec<MetricsRow> = Vec::new();

    let policy: TabularPolicy = match args.algo.as_str() {
        "brpo" => {
            let beta = require_beta(&ctx)?;
            let critic = ctx.config.critic_for_brpo(advantage_source_override(args)?);
            let empirical = empirical_mdp(&ctx.batch, ctx.n_states, ctx.n_actions, ctx.gamma)?;
            let adv = advantage_from_config(&critic, ctx.env.as_ref(), Some(&empirical.mdp), beta)?;
            let out = coordinate_ascent(
                &ctx.batch,
                beta,
                &adv,
                ctx.gamma,
                &ctx.config.brpo,
                if exact_eval { ctx.env.as_ref() } else { None },
                ctx.spec.as_ref().map(EnvSpec::coordinates),
            )?;
            for row in &out.trace {
                let step = match row.half_step {
                    HalfStep::Candidate => "rho",
                    HalfStep::Confidence => "lambda",
                };
                rows.push((
                    row.iter,
                    step.to_string(),
                    vec![
                        ("L_bar".into(), row.l_bar),
                        ("Lp".into(), row.l_prime),
                        ("Lpp".into(), row.l_double),
                        ("Lppp".into(), row.l_triple),
                    ],
                    row.j_exact,
                ));
            }
            out.policy.mixed
        }
        "brpo-c" => {
            let beta = require_beta(&ctx)?;
            let critic = ctx.config.critic_for_brpo(advantage_source_override(args)?);
            let empirical = empirical_mdp(&ctx.batch, ctx.n_states, ctx.n_actions, ctx.gamma)?;
            let adv = advantage_from_config(&critic, ctx.env.as_ref(), Some(&empirical.mdp), beta)?;
            let lambda = ctx.config.baseline.as_ref().map_or(0.5, |b| b.const_lambda);
            let out =
                baselines::brpo_constant(beta, &adv, ctx.gamma, lambda, ctx.config.brpo.kappa_max)?;
            rows.push((
                0,
                "final".into(),
                vec![("const_lambda".into(), lambda)],
                None,
            ));
            out.mixed
        }
        "bc" => {
            let clone = baselines::behavior_cloning(
                &ctx.batch,
                ctx.beta.as_ref(),
                ctx.n_states,
                ctx.n_actions,
            )?;
            rows.push((0, "final".into(), vec![], None));
            clone.policy
        }
        "batch-q" => {
            let cfg = ctx
                .config
                .baseline
                .clone()
                .unwrap_or_else(|| BaselineConfig::new(BaselineAlgo::BatchQ));
            rows.push((0, "final".into(), vec![], None));
            baselines::batch_q_policy(
                &ctx.batch,
                ctx.n_states,
                ctx.n_actions,
                ctx.gamma,
                &cfg.critic,
            )?
        }
        "kl-q" => {
            let beta = require_beta(&ctx)?;
            let cfg = ctx
                .config
                .baseline
                .clone()
                .unwrap_or_else(|| BaselineConfig::new(BaselineAlgo::KlQ));
            rows.push((
                0,
                "final".into(),
                vec![("kl_weight".into(), cfg.kl_weight)],
                None,
            ));
            baselines::kl_q_policy(&ctx.batch, beta, &cfg, ctx.gamma)?
        }
        "spibb" => {
            let beta = require_beta(&ctx)?;
            let cfg = ctx
                .config
                .baseline
                .clone()
                .unwrap_or_else(|| BaselineConfig::new(BaselineAlgo::Spibb));
            rows.push((
                0,
                "final".into(),
                vec![("spibb_threshold".into(), cfg.spibb_threshold)],
                None,
            ));
            baselines::spibb_policy(&ctx.batch, beta, &cfg, ctx.gamma)?
        }
        other => bail!("unknown algorithm '{other}'"),
    };

    // fill exact return on rows that lack it
    let j_pi = match (&ctx.env, exact_eval) {
        (Some(env), true) => Some(expected_return(env, &policy)?),
        _ => None,
    };
    let wallclock = start.elapsed().as_secs_f64();

    let stem = args.batch.with_extension("");
    let stem = stem.to_string_lossy();
    let policy_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{stem}_{}_policy.json", args.algo)));
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{stem}_{}_metrics.csv", args.algo)));

    std::fs::write(
        &policy_path,
        serde_json::to_string_pretty(&policy.to_json())?,
    )?;
    write_metrics(&metrics_path, &rows, j_pi, wallclock)?;

    println!("policy written to {}", policy_path.display());
    println!("metrics written to {}", metrics_path.display());
    if let (Some(env), Some(beta)) = (&ctx.env, &ctx.beta) {
        let j_beta = expected_return(env, beta)?;
        if let Some(j) = j_pi {
            println!(
                "exact J_pi = {j:.12}, J_beta = {j_beta:.12}, gap = {:.12}",
                j - j_beta
            );
        }
    }
    Ok(())
}

fn write_metrics(
    path: &Path,
    rows: &[MetricsRow],
    final_j: Option<f64>,
    wallclock: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let term_names: Vec<String> = rows
        .first()
        .map(|(_, _, terms, _)| terms.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["iter".to_string(), "half_step".to_string()];
    header.extend(term_names.iter().cloned());
    header.push("J_exact".into());
    header.push("wallclock".into());
    w.write_record(&header)?;
    for (i, (iter, step, terms, j)) in rows.iter().enumerate() {
        let mut record = vec![iter.to_string(), step.clone()];
        for (_, v) in terms {
            record.push(format!("{v:.17e}"));
        }
        let j = j.or(if i + 1 == rows.len() { final_j } else { None });
        record.push(j.map_or(String::new(), |v| format!("{v:.17e}")));
        record.push(format!("{wallclock:.6}"));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub policy: PathBuf,
    /// Environment string; alternatively take it from a batch file's metadata.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    /// Batch file supplying environment and behavior metadata.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    /// Behavior policy JSON for the reported gap.
    #[arg(long)]
    pub behavior: Option<PathBuf>,
    #[arg(long, default_value = "exact")]
    pub mode: String,
    #[arg(long, default_value_t = 40)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let policy = TabularPolicy::from_json(serde_json::from_str::<PolicyFile>(
        &std::fs::read_to_string(&args.policy)?,
    )?)?;
    let (mdp, meta_beta) = match (&args.env, &args.batch) {
        (Some(env), _) => {
            let spec = EnvSpec::new(env.parse::<EnvKind>()?, args.gamma);
            (make_env(&spec)?, None)
        }
        (None, Some(batch_path)) => {
            let batch = read_batch(batch_path)?;
            let spec = batch
                .meta
                .env
                .clone()
                .context("batch metadata has no environment spec")?;
            let beta = batch
                .meta
                .behavior
                .clone()
                .map(TabularPolicy::from_json)
                .transpose()?;
            (make_env(&spec)?, beta)
        }
        (None, None) => bail!("provide --env or --batch"),
    };
    let beta = match &args.behavior {
        Some(path) => Some(TabularPolicy::from_json(
            serde_json::from_str::<PolicyFile>(&std::fs::read_to_string(path)?)?,
        )?),
        None => meta_beta,
    };

    let j_pi = match args.mode.as_str() {
        "exact" => {
            let j = expected_return(&mdp, &policy)?;
            println!("exact J_pi = {j:.12}");
            j
        }
        "rollout" => {
            let (mean, stderr) = rollout_return(&mdp, &policy, args.episodes, args.seed);
            println!(
                "rollout J_pi = {mean:.6} +- {stderr:.6} ({} episodes)",
                args.episodes
            );
            mean
        }
        other => bail!("unknown eval mode '{other}'"),
    };
    if let Some(beta) = beta {
        let j_beta = expected_return(&mdp, &beta)?;
        println!("J_beta = {j_beta:.12}");
        println!("gap = {:.12}", j_pi - j_beta);
    }
    Ok(())
}

/// Monte-Carlo discounted return: mean and standard error over episodes. The
/// horizon is long enough that truncation bias is below 1e-9.
pub fn rollout_return(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    episodes: usize,
    seed: u64,
) -> (f64, f64) {
    let gamma = mdp.gamma();
    let horizon = if gamma == 0.0 {
        1
    } else {
        let steps = ((1e-9 * (1.0 - gamma) / mdp.r_max().max(1e-9)).ln() / gamma.ln()).ceil();
        (steps as usize).clamp(1, 1_000_000)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |probs: &mut dyn Iterator<Item = f64>| -> usize {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut last = 0;
        for (i, p) in probs.enumerate() {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
        last
    };
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = sample(&mut mdp.start().iter().copied());
        let mut total = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            let a = sample(&mut (0..mdp.n_actions()).map(|a| policy.prob(s, a)));
            total += disc * mdp.reward(s, a);
            s = sample(&mut (0..mdp.n_states()).map(|sp| mdp.transition(s, a, sp)));
            disc *= gamma;
            if disc < 1e-12 {
                break;
            }
        }
        returns.push(total);
    }
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var =
        returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (episodes.max(2) - 1) as f64;
    (mean, (var / episodes as f64).sqrt())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Suite: identities, bounds, qp, proofs
    #[arg(long)]
    pub suite: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// CSV summary path; stdout summary is always printed.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// JSONL path for per-instance bound reports (bounds suite).
    #[arg(long)]
    pub out_json: Option<PathBuf>,
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let suite: SuiteName = args.suite.parse()?;
    let report = run_suite(suite, args.trials, args.seed)?;
    if let Some(path) = &args.out_csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "instance_id",
            "bound_name",
            "rhs",
            "exact_gap",
            "slack",
            "pass",
        ])?;
        for row in &report.rows {
            w.write_record(&[
                row.instance.to_string(),
                row.check.clone(),
                format!("{:.17e}", row.measured),
                format!("{:.17e}", row.reference),
                format!("{:.17e}", row.slack),
                row.pass.to_string(),
            ])?;
        }
        w.flush()?;
    }
    if let Some(path) = &args.out_json {
        let mut text = String::new();
        for r in &report.reports {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    let failures = report.failures();
    println!(
        "suite {} over {} trials: {} checks, {} failed, worst slack {:.3e}",
        suite,
        args.trials,
        report.rows.len(),
        failures.len(),
        report.worst_slack()
    );
    for f in failures.iter().take(10) {
        println!(
            "FAIL instance {} {}: measured {:.6e} vs {:.6e} (slack {:.3e})",
            f.instance, f.check, f.measured, f.reference, f.slack
        );
    }
    Ok(if report.all_pass() { 0 } else { 1 })
}
