//! Experiment configuration: one JSON document covering data generation,
//! the learner, baselines, and evaluation.

use serde::{Deserialize, Serialize};

use brpo_core::baselines::BaselineConfig;
use brpo_core::critic::{CriticConfig, CriticSource};
use brpo_core::datagen::{EnvKind, EnvSpec};
use brpo_core::solver::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Exact,
    Rollout,
}

fn default_eval_mode() -> EvalMode {
    EvalMode::Exact
}
fn default_episodes() -> usize {
    40
}
fn default_interval() -> usize {
    1000
}
fn default_window() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_eval_mode")]
    pub mode: EvalMode,
    /// Rollout episodes per measurement.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Iterations between rollout measurements.
    #[serde(default = "default_interval")]
    pub interval: usize,
    /// Sliding-window width for smoothing rollout measurements.
    #[serde(default = "default_window")]
    pub window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: default_eval_mode(),
            episodes: default_episodes(),
            interval: default_interval(),
            window: default_window(),
        }
    }
}

fn default_env() -> EnvSpec {
    EnvSpec::new(EnvKind::Chain { n: 8 }, 0.99)
}
fn default_epsilons() -> Vec<f64> {
    vec![0.05, 0.15, 0.25, 0.5, 1.0]
}
fn default_batch_size() -> usize {
    100_000
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_quality() -> f64 {
    0.75
}
fn default_episode_cap() -> usize {
    200
}

/// The single JSON config document. Field defaults follow the experimental
/// protocol: discount 0.99, five exploration levels, 100k transitions,
/// five seeds, behavior at 75% quality, critic mixing 0.9, constant
/// confidence 0.5, KL weight 0.1, bootstrap threshold 0.2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_env")]
    pub env: EnvSpec,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size_transitions: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_quality")]
    pub quality: f64,
    #[serde(default = "default_episode_cap")]
    pub episode_cap: usize,
    #[serde(default)]
    pub brpo: SolverConfig,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: default_env(),
            epsilons: default_epsilons(),
            batch_size_transitions: default_batch_size(),
            seeds: default_seeds(),
            quality: default_quality(),
            episode_cap: default_episode_cap(),
            brpo: SolverConfig::default(),
            critic: CriticConfig::default(),
            baseline: None,
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Critic config with the solver's mixing weight and a source override.
    pub fn critic_for_brpo(&self, source: Option<CriticSource>) -> CriticConfig {
        let mut critic = self.critic;
        critic.mu = self.brpo.mu;
        if let Some(src) = source {
            critic.source = src;
        }
        critic
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_mirror_the_protocol() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.env.gamma, 0.99);
        assert_eq!(cfg.epsilons, vec![0.05, 0.15, 0.25, 0.5, 1.0]);
        assert_eq!(cfg.batch_size_transitions, 100_000);
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.quality, 0.75);
        assert_eq!(cfg.brpo.mu, 0.9);
        assert_eq!(cfg.eval.episodes, 40);
        assert_eq!(cfg.eval.interval, 1000);
        assert_eq!(cfg.eval.window, 10);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let text = r#"{
            "env": {"kind": "gridworld", "width": 5, "height": 5, "slip": 0.1, "gamma": 0.95},
            "brpo": {"iterations": 5, "qp_method": "projected_gradient"},
            "baseline": {"algo": "kl_q", "kl_weight": 0.3}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.env.gamma, 0.95);
        assert_eq!(cfg.brpo.iterations, 5);
        assert_eq!(cfg.brpo.mu, 0.9);
        assert_eq!(cfg.baseline.as_ref().unwrap().kl_weight, 0.3);
        assert_eq!(cfg.batch_size_transitions, 100_000);
        let back = serde_json::to_string(&cfg).unwrap();
        let again: ExperimentConfig = serde_json::from_str(&back).unwrap();
        assert_eq!(cfg, again);
    }
}
