//! Experiment configuration in a flat `key = value` format.
//!
//! ```text
//! # comments run to end of line
//! algorithm = frl
//! env = gridworld5x5
//! total_steps = 200000
//! ```
//!
//! Missing keys take defaults, unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Frl,
    A2c,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Frl => "frl",
            Algorithm::A2c => "a2c",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorKind {
    /// `(1 − ε)·greedy(Q) + ε·uniform`.
    EpsilonGreedyOnQ,
    /// A copy of π refreshed every `snapshot_interval` updates.
    SnapshotOfPi,
    /// `(1 − w)·π + w·uniform`.
    UniformMix,
}

impl BehaviorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorKind::EpsilonGreedyOnQ => "epsilon_greedy",
            BehaviorKind::SnapshotOfPi => "snapshot",
            BehaviorKind::UniformMix => "uniform_mix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Tabular,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Tabular => "tabular",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub algorithm: Algorithm,
    pub env: String,
    pub slip: f64,
    pub gamma: f64,
    /// 0 keeps the environment's own limit.
    pub max_episode_steps: usize,
    pub lr_policy: f64,
    pub lr_q: f64,
    pub batch_size: usize,
    pub n_step: usize,
    pub grad_clip: f64,
    pub value_coefficient: f64,
    pub entropy_coefficient: f64,
    pub behavior: BehaviorKind,
    /// ε for the ε-greedy sampling policy, or the uniform weight of the mix.
    pub epsilon_behavior: f64,
    pub snapshot_interval: usize,
    pub policy_update_direction: Direction,
    pub q_update_direction: Direction,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub out_path: String,
    /// Off by default so that reruns produce identical files.
    pub record_wall_clock: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Frl,
            env: "gridworld5x5".into(),
            slip: 0.0,
            gamma: 0.99,
            max_episode_steps: 0,
            lr_policy: 7e-4,
            lr_q: 7e-4,
            batch_size: 64,
            n_step: 5,
            grad_clip: 0.5,
            value_coefficient: 0.5,
            entropy_coefficient: 0.01,
            behavior: BehaviorKind::EpsilonGreedyOnQ,
            epsilon_behavior: 0.1,
            snapshot_interval: 100,
            policy_update_direction: Direction::Descend,
            q_update_direction: Direction::Ascend,
            model: ModelKind::Mlp,
            hidden: vec![64, 64],
            total_steps: 200_000,
            eval_interval: 2_000,
            eval_episodes: 20,
            seed: 0,
            out_path: "out.csv".into(),
            record_wall_clock: false,
        }
    }
}

const KEYS: &[&str] = &[
    "algorithm",
    "env",
    "slip",
    "gamma",
    "max_episode_steps",
    "lr_policy",
    "lr_q",
    "batch_size",
    "n_step",
    "grad_clip",
    "value_coefficient",
    "entropy_coefficient",
    "behavior",
    "epsilon_behavior",
    "snapshot_interval",
    "policy_update_direction",
    "q_update_direction",
    "model",
    "hidden",
    "total_steps",
    "eval_interval",
    "eval_episodes",
    "seed",
    "out_path",
    "record_wall_clock",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl Config {
    /// Sets one key from its textual value; no cross-field validation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(key, format!("expected {what}, got `{value}`"));
        match key {
            "algorithm" => {
                self.algorithm = match value {
                    "frl" => Algorithm::Frl,
                    "a2c" => Algorithm::A2c,
                    _ => return Err(bad("frl or a2c")),
                }
            }
            "env" => self.env = value.to_string(),
            "slip" => self.slip = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "max_episode_steps" => self.max_episode_steps = parse_num(key, value)?,
            "lr_policy" => self.lr_policy = parse_num(key, value)?,
            "lr_q" => self.lr_q = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "n_step" => self.n_step = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "value_coefficient" => self.value_coefficient = parse_num(key, value)?,
            "entropy_coefficient" => self.entropy_coefficient = parse_num(key, value)?,
            "behavior" => {
                self.behavior = match value {
                    "epsilon_greedy" => BehaviorKind::EpsilonGreedyOnQ,
                    "snapshot" => BehaviorKind::SnapshotOfPi,
                    "uniform_mix" => BehaviorKind::UniformMix,
                    _ => return Err(bad("epsilon_greedy, snapshot or uniform_mix")),
                }
            }
            "epsilon_behavior" => self.epsilon_behavior = parse_num(key, value)?,
            "snapshot_interval" => self.snapshot_interval = parse_num(key, value)?,
            "policy_update_direction" => {
                self.policy_update_direction =
                    Direction::parse(value).ok_or_else(|| bad("ascend or descend"))?
            }
            "q_update_direction" => {
                self.q_update_direction =
                    Direction::parse(value).ok_or_else(|| bad("ascend or descend"))?
            }
            "model" => {
                self.model = match value {
                    "mlp" => ModelKind::Mlp,
                    "tabular" => ModelKind::Tabular,
                    _ => return Err(bad("mlp or tabular")),
                }
            }
            "hidden" => {
                self.hidden = if value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| parse_num(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "total_steps" => self.total_steps = parse_num(key, value)?,
            "eval_interval" => self.eval_interval = parse_num(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out_path" => self.out_path = value.to_string(),
            "record_wall_clock" => self.record_wall_clock = parse_num(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(key, msg));
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.slip) {
            return fail("slip", "must lie in [0, 1)");
        }
        for (key, lr) in [
            ("lr_policy", self.lr_policy),
            ("lr_q", self.lr_q),
            ("grad_clip", self.grad_clip),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(key, "must be positive");
            }
        }
        for (key, c) in [
            ("value_coefficient", self.value_coefficient),
            ("entropy_coefficient", self.entropy_coefficient),
        ] {
            if !(c >= 0.0 && c.is_finite()) {
                return fail(key, "must be non-negative");
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if self.n_step == 0 {
            return fail("n_step", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon_behavior) {
            return fail("epsilon_behavior", "must lie in [0, 1]");
        }
        if self.behavior == BehaviorKind::EpsilonGreedyOnQ && self.epsilon_behavior == 0.0 {
            return fail(
                "epsilon_behavior",
                "must be positive so the sampling policy covers every action",
            );
        }
        if self.snapshot_interval == 0 {
            return fail("snapshot_interval", "must be at least 1");
        }
        if self.hidden.contains(&0) {
            return fail("hidden", "layer widths must be positive");
        }
        if self.eval_interval == 0 {
            return fail("eval_interval", "must be at least 1");
        }
        if self.eval_episodes == 0 {
            return fail("eval_episodes", "must be at least 1");
        }
        self.env_spec().map(|_| ())
    }

    /// The environment described by `env`, `slip`, `gamma` and
    /// `max_episode_steps`.
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let mut spec = EnvSpec::from_name(&self.env)?
            .with_slip(self.slip)
            .with_gamma(self.gamma);
        if self.max_episode_steps > 0 {
            spec = spec.with_max_episode_steps(self.max_episode_steps);
        }
        Ok(spec)
    }

    fn value_text(&self, key: &str) -> String {
        match key {
            "algorithm" => self.algorithm.as_str().into(),
            "env" => self.env.clone(),
            "slip" => self.slip.to_string(),
            "gamma" => self.gamma.to_string(),
            "max_episode_steps" => self.max_episode_steps.to_string(),
            "lr_policy" => self.lr_policy.to_string(),
            "lr_q" => self.lr_q.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "n_step" => self.n_step.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "value_coefficient" => self.value_coefficient.to_string(),
            "entropy_coefficient" => self.entropy_coefficient.to_string(),
            "behavior" => self.behavior.as_str().into(),
            "epsilon_behavior" => self.epsilon_behavior.to_string(),
            "snapshot_interval" => self.snapshot_interval.to_string(),
            "policy_update_direction" => self.policy_update_direction.as_str().into(),
            "q_update_direction" => self.q_update_direction.as_str().into(),
            "model" => self.model.as_str().into(),
            "hidden" if self.hidden.is_empty() => "none".into(),
            "hidden" => self
                .hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "total_steps" => self.total_steps.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "seed" => self.seed.to_string(),
            "out_path" => self.out_path.clone(),
            "record_wall_clock" => self.record_wall_clock.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key, one `key = value` line each, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_text(key));
        }
        out
    }
}

pub fn parse_config(text: &str) -> Result<Config> {
    let mut config = Config::default();
    let mut seen = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "missing key".into(),
            });
        }
        if seen.contains(&key) {
            return Err(Error::config(
                key,
                format!("set twice (again on line {})", i + 1),
            ));
        }
        seen.push(key);
        config.set(key, value)?;
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.gamma, 0.99);
        assert_eq!(c.lr_policy, 7e-4);
        assert_eq!(c.lr_q, 7e-4);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.n_step, 5);
        assert_eq!(c.grad_clip, 0.5);
        assert_eq!(c.value_coefficient, 0.5);
        assert_eq!(c.epsilon_behavior, 0.1);
        assert_eq!(c, Config::default());
    }

    #[test]
    fn invalid_values_name_their_key() {
        match parse_config("gamma = 1.5") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "gamma"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_config("epsilon_behavior = 0") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "epsilon_behavior"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_config("behavior = uniform_mix\nepsilon_behavior = 0").is_ok());
        match parse_config("learning_rate = 1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "learning_rate"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_config("env = maze"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            parse_config("seed = 1\nseed = 2"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse_config("# header\n\ngamma 0.9\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let c = parse_config(
            "algorithm = frl # inline comment\nenv = gridworld5x5\nhidden = 32\nlr_q = 0.00123",
        )
        .unwrap();
        assert_eq!(c.hidden, vec![32]);
        assert_eq!(parse_config(&c.to_text()).unwrap(), c);

        let mut other = Config::default();
        other.algorithm = Algorithm::A2c;
        other.hidden = Vec::new();
        other.behavior = BehaviorKind::SnapshotOfPi;
        other.gamma = 0.3 + 0.6;
        assert_eq!(parse_config(&other.to_text()).unwrap(), other);
    }

    #[test]
    fn env_spec_applies_overrides() {
        let c =
            parse_config("env = chain4\nslip = 0.25\ngamma = 0.5\nmax_episode_steps = 7").unwrap();
        let spec = c.env_spec().unwrap();
        assert_eq!(
            spec,
            EnvSpec::chain(4)
                .with_slip(0.25)
                .with_gamma(0.5)
                .with_max_episode_steps(7)
        );
    }
}
