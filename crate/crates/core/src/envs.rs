//! Small discrete environments backed by exact tabular models.
//!
//! Every environment compiles to an [`Mdp`], so the exact solvers apply, and
//! every environment can step from an arbitrary state. The paired sampling of
//! the trainer relies on the latter: it takes one action under the learning
//! policy and one under the sampling policy from the same state.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{Mdp, QTable};
use crate::policy::{sample_categorical, Policy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvKind {
    /// Start in the top-left cell, terminal goal in the bottom-right. Reward
    /// on entering the goal; walls bounce.
    Gridworld { width: usize, height: usize },
    /// States `0..length`, actions left/right, terminal goal at the right end.
    Chain { length: usize },
    /// Start bottom-left, goal bottom-right, cliff along the bottom edge in
    /// between. Falling off costs the cliff penalty and returns to the start.
    CliffWalk { width: usize, height: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Probability that the chosen move is replaced: by a uniformly random
    /// move on grids, by the opposite move on the chain.
    pub slip_prob: f64,
    pub max_episode_steps: usize,
    pub gamma: f64,
    pub goal_reward: f64,
    pub step_reward: f64,
    pub cliff_reward: f64,
}

impl EnvSpec {
    pub fn gridworld(width: usize, height: usize) -> Self {
        Self {
            kind: EnvKind::Gridworld { width, height },
            slip_prob: 0.0,
            max_episode_steps: 4 * width * height,
            gamma: 0.99,
            goal_reward: 1.0,
            step_reward: 0.0,
            cliff_reward: 0.0,
        }
    }

    pub fn chain(length: usize) -> Self {
        Self {
            kind: EnvKind::Chain { length },
            slip_prob: 0.0,
            max_episode_steps: 10 * length,
            gamma: 0.99,
            goal_reward: 1.0,
            step_reward: 0.0,
            cliff_reward: 0.0,
        }
    }

    pub fn cliff_walk(width: usize, height: usize) -> Self {
        Self {
            kind: EnvKind::CliffWalk { width, height },
            slip_prob: 0.0,
            max_episode_steps: 200,
            gamma: 0.99,
            goal_reward: -1.0,
            step_reward: -1.0,
            cliff_reward: -100.0,
        }
    }

    pub fn with_slip(mut self, slip_prob: f64) -> Self {
        self.slip_prob = slip_prob;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_max_episode_steps(mut self, steps: usize) -> Self {
        self.max_episode_steps = steps;
        self
    }

    /// Parses `gridworld5x5`, `chain10`, `cliffwalk` (4x12) or `cliffwalk4x12`.
    pub fn from_name(name: &str) -> Result<Self> {
        let bad = || Error::config("env", format!("unknown environment `{name}`"));
        let dims = |rest: &str| -> Result<(usize, usize)> {
            let (w, h) = rest.split_once('x').ok_or_else(bad)?;
            Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
        };
        if let Some(rest) = name.strip_prefix("gridworld") {
            let (w, h) = dims(rest)?;
            Ok(Self::gridworld(w, h))
        } else if let Some(rest) = name.strip_prefix("chain") {
            Ok(Self::chain(rest.parse().map_err(|_| bad())?))
        } else if name == "cliffwalk" {
            Ok(Self::cliff_walk(12, 4))
        } else if let Some(rest) = name.strip_prefix("cliffwalk") {
            // rows x columns, as the classic layout is quoted
            let (h, w) = dims(rest)?;
            Ok(Self::cliff_walk(w, h))
        } else {
            Err(bad())
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            EnvKind::Gridworld { width, height } => format!("gridworld{width}x{height}"),
            EnvKind::Chain { length } => format!("chain{length}"),
            EnvKind::CliffWalk { width, height } => format!("cliffwalk{height}x{width}"),
        }
    }

    fn validate(&self) -> Result<()> {
        let degenerate = match self.kind {
            EnvKind::Gridworld { width, height } => width * height < 2,
            EnvKind::Chain { length } => length < 2,
            EnvKind::CliffWalk { width, height } => width < 3 || height < 2,
        };
        if degenerate {
            return Err(Error::argument(format!(
                "degenerate environment size: {:?}",
                self.kind
            )));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(Error::argument(format!(
                "slip_prob {} outside [0, 1)",
                self.slip_prob
            )));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::argument("max_episode_steps must be at least 1"));
        }
        Ok(())
    }
}

const GRID_MOVES: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

/// Compiles the environment description into its exact tabular model.
pub fn build_mdp(spec: &EnvSpec) -> Result<Mdp> {
    spec.validate()?;
    match spec.kind {
        EnvKind::Gridworld { width, height } => grid_mdp(spec, width, height, false),
        EnvKind::CliffWalk { width, height } => grid_mdp(spec, width, height, true),
        EnvKind::Chain { length } => chain_mdp(spec, length),
    }
}

fn grid_mdp(spec: &EnvSpec, width: usize, height: usize, cliff: bool) -> Result<Mdp> {
    let n = width * height;
    let cell = |x: usize, y: usize| y * width + x;
    let (start, goal) = if cliff {
        (cell(0, height - 1), cell(width - 1, height - 1))
    } else {
        (0, n - 1)
    };
    let is_cliff =
        |s: usize| cliff && s / width == height - 1 && s % width != 0 && s % width != width - 1;

    // Outcome of a single move: (next state, reward).
    let outcome = |s: usize, m: usize| -> (usize, f64) {
        let (dx, dy) = GRID_MOVES[m];
        let (x, y) = ((s % width) as i64 + dx, (s / width) as i64 + dy);
        let sp = if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            s
        } else {
            cell(x as usize, y as usize)
        };
        if is_cliff(sp) {
            (start, spec.cliff_reward)
        } else if sp == goal {
            (sp, spec.goal_reward)
        } else {
            (sp, spec.step_reward)
        }
    };

    let mut transition = vec![0.0; n * 4 * n];
    let mut reward = vec![0.0; n * 4];
    let mut terminal = vec![false; n];
    terminal[goal] = true;
    for s in 0..n {
        for a in 0..4 {
            let row = &mut transition[(s * 4 + a) * n..][..n];
            if s == goal {
                row[s] = 1.0;
                continue;
            }
            let mut r = 0.0;
            for m in 0..4 {
                let p = if m == a { 1.0 - spec.slip_prob } else { 0.0 } + spec.slip_prob / 4.0;
                if p == 0.0 {
                    continue;
                }
                let (sp, rm) = outcome(s, m);
                row[sp] += p;
                r += p * rm;
            }
            reward[s * 4 + a] = r;
        }
    }
    let mut rho0 = vec![0.0; n];
    rho0[start] = 1.0;
    Mdp::new(n, 4, transition, reward, spec.gamma, rho0, terminal)
}

fn chain_mdp(spec: &EnvSpec, length: usize) -> Result<Mdp> {
    let n = length;
    let goal = n - 1;
    let mut transition = vec![0.0; n * 2 * n];
    let mut reward = vec![0.0; n * 2];
    let mut terminal = vec![false; n];
    terminal[goal] = true;
    for s in 0..n {
        for a in 0..2 {
            let row = &mut transition[(s * 2 + a) * n..][..n];
            if s == goal {
                row[s] = 1.0;
                continue;
            }
            let mut r = 0.0;
            for (dir, p) in [(a, 1.0 - spec.slip_prob), (1 - a, spec.slip_prob)] {
                if p == 0.0 {
                    continue;
                }
                let sp = if dir == 1 { s + 1 } else { s.saturating_sub(1) };
                row[sp] += p;
                r += p * if sp == goal {
                    spec.goal_reward
                } else {
                    spec.step_reward
                };
            }
            reward[s * 2 + a] = r;
        }
    }
    let mut rho0 = vec![0.0; n];
    rho0[0] = 1.0;
    Mdp::new(n, 2, transition, reward, spec.gamma, rho0, terminal)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    /// The next state is terminal.
    pub done: bool,
}

/// Samples `s' ~ P[s][a]` from an arbitrary state. Terminal states self-loop
/// with zero reward and report `done`.
pub fn branch_step(
    mdp: &Mdp,
    state: usize,
    action: usize,
    rng: &mut dyn RngCore,
) -> Result<Transition> {
    if state >= mdp.n_states() || action >= mdp.n_actions() {
        return Err(Error::argument(format!(
            "(state {state}, action {action}) out of range"
        )));
    }
    if mdp.is_terminal(state) {
        return Ok(Transition {
            state,
            action,
            reward: 0.0,
            next_state: state,
            done: true,
        });
    }
    let next_state = sample_categorical(mdp.next_state_probs(state, action), rng);
    Ok(Transition {
        state,
        action,
        reward: mdp.reward(state, action),
        next_state,
        done: mdp.is_terminal(next_state),
    })
}

fn sample_start(mdp: &Mdp, rng: &mut dyn RngCore) -> usize {
    sample_categorical(mdp.rho0(), rng)
}

/// An episodic environment with an internal current state.
pub trait Environment {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn gamma(&self) -> f64;
    fn max_episode_steps(&self) -> usize;
    fn reset(&mut self, rng: &mut dyn RngCore) -> usize;
    fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> Result<Transition>;

    /// Steps from an arbitrary state without touching the current one.
    fn branch_step(
        &self,
        state: usize,
        action: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Transition> {
        let _ = (state, action, rng);
        Err(Error::Capability(
            "environment cannot step from an arbitrary state".into(),
        ))
    }
}

/// An [`Environment`] that samples from an exact tabular model.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: Mdp,
    max_episode_steps: usize,
    state: usize,
}

impl TabularEnv {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        Ok(Self::from_mdp(build_mdp(spec)?, spec.max_episode_steps))
    }

    pub fn from_mdp(mdp: Mdp, max_episode_steps: usize) -> Self {
        Self {
            mdp,
            max_episode_steps,
            state: 0,
        }
    }

    pub fn mdp(&self) -> &Mdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Environment for TabularEnv {
    fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn gamma(&self) -> f64 {
        self.mdp.gamma()
    }

    fn max_episode_steps(&self) -> usize {
        self.max_episode_steps
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> usize {
        self.state = sample_start(&self.mdp, rng);
        self.state
    }

    fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> Result<Transition> {
        let t = branch_step(&self.mdp, self.state, action, rng)?;
        self.state = t.next_state;
        Ok(t)
    }

    fn branch_step(
        &self,
        state: usize,
        action: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Transition> {
        branch_step(&self.mdp, state, action, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    /// Ended by the step limit rather than a terminal state.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryBatch {
    pub episodes: Vec<Episode>,
}

impl TrajectoryBatch {
    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }
}

/// Runs whole episodes from `rho0` under `pi` until at least `n_transitions`
/// have been collected. Episodes are cut after `horizon` steps.
pub fn sample_trajectories(
    mdp: &Mdp,
    pi: &dyn Policy,
    n_transitions: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if horizon < 1 {
        return Err(Error::argument("horizon must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = TrajectoryBatch::default();
    let mut total = 0;
    while total < n_transitions {
        let episode = run_episode(mdp, pi, horizon, &mut rng)?;
        total += episode.transitions.len();
        batch.episodes.push(episode);
    }
    Ok(batch)
}

/// One episode from `rho0` under `pi`, at most `horizon` steps.
pub fn run_episode(
    mdp: &Mdp,
    pi: &dyn Policy,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<Episode> {
    let mut state = sample_start(mdp, rng);
    let mut transitions = Vec::new();
    if mdp.is_terminal(state) {
        return Ok(Episode {
            transitions,
            truncated: false,
        });
    }
    loop {
        let action = sample_categorical(&pi.probs(state), rng);
        let t = branch_step(mdp, state, action, rng)?;
        transitions.push(t);
        if t.done {
            return Ok(Episode {
                transitions,
                truncated: false,
            });
        }
        if transitions.len() == horizon {
            return Ok(Episode {
                transitions,
                truncated: true,
            });
        }
        state = t.next_state;
    }
}

/// Backward recursion `R_t = r_t + γ R_{t+1}` per episode, with the tail of a
/// truncated episode given by `tail_value(s_T)`.
pub fn discounted_returns_with(
    batch: &TrajectoryBatch,
    gamma: f64,
    tail_value: impl Fn(usize) -> f64,
) -> Vec<Vec<f64>> {
    batch
        .episodes
        .iter()
        .map(|ep| {
            let mut acc = match ep.transitions.last() {
                Some(last) if ep.truncated => tail_value(last.next_state),
                _ => 0.0,
            };
            let mut out: Vec<f64> = ep
                .transitions
                .iter()
                .rev()
                .map(|t| {
                    acc = t.reward + gamma * acc;
                    acc
                })
                .collect();
            out.reverse();
            out
        })
        .collect()
}

/// Per-transition discounted returns. A truncated episode is bootstrapped
/// with `Σ_a π(a|s_T) Q(s_T, a)` when `bootstrap` is given, else zero.
pub fn discounted_returns(
    batch: &TrajectoryBatch,
    gamma: f64,
    bootstrap: Option<(&QTable, &dyn Policy)>,
) -> Vec<Vec<f64>> {
    match bootstrap {
        Some((q, pi)) => discounted_returns_with(batch, gamma, |s| q.state_value(s, &pi.probs(s))),
        None => discounted_returns_with(batch, gamma, |_| 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{episodic_occupancy, PolicyTable};

    #[test]
    fn chain_construction() {
        let mdp = build_mdp(&EnvSpec::chain(2)).unwrap();
        assert_eq!(mdp.n_states(), 2);
        assert_eq!(mdp.n_actions(), 2);
        for s in 0..2 {
            for a in 0..2 {
                assert!(mdp.next_state_probs(s, a).iter().any(|&p| p == 1.0));
            }
        }
        assert_eq!(mdp.reward(0, 1), 1.0);
        assert_eq!(mdp.reward(0, 0), 0.0);
    }

    #[test]
    fn gridworld_construction() {
        let mdp = build_mdp(&EnvSpec::gridworld(3, 3)).unwrap();
        assert_eq!((mdp.n_states(), mdp.n_actions()), (9, 4));
        // up from the top-left corner bounces
        assert_eq!(mdp.next_state_probs(0, 0)[0], 1.0);
        assert_eq!(mdp.next_state_probs(0, 1)[1], 1.0);
        assert_eq!(mdp.reward(7, 1), 1.0);
        assert!(mdp.is_terminal(8));

        let slippery = build_mdp(&EnvSpec::gridworld(3, 3).with_slip(0.2)).unwrap();
        for s in 0..9 {
            for a in 0..4 {
                let sum: f64 = slippery.next_state_probs(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cliff_walk_layout() {
        let spec = EnvSpec::from_name("cliffwalk").unwrap();
        let mdp = build_mdp(&spec).unwrap();
        assert_eq!(mdp.n_states(), 48);
        let start = 36;
        assert_eq!(mdp.rho0()[start], 1.0);
        // stepping right from the start falls off the cliff
        assert_eq!(mdp.next_state_probs(start, 1)[start], 1.0);
        assert_eq!(mdp.reward(start, 1), -100.0);
        assert_eq!(mdp.reward(start, 0), -1.0);
        assert!(mdp.is_terminal(47));
        assert_eq!(spec.name(), "cliffwalk4x12");
    }

    #[test]
    fn names_round_trip() {
        for name in ["gridworld5x5", "chain10", "cliffwalk4x12", "gridworld3x4"] {
            assert_eq!(EnvSpec::from_name(name).unwrap().name(), name);
        }
        assert!(EnvSpec::from_name("atari").is_err());
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(build_mdp(&EnvSpec::chain(1)).is_err());
        assert!(build_mdp(&EnvSpec::gridworld(1, 1)).is_err());
        assert!(build_mdp(&EnvSpec::gridworld(3, 3).with_max_episode_steps(0)).is_err());
    }

    #[test]
    fn deterministic_sampling_is_reproducible() {
        let mdp = build_mdp(&EnvSpec::gridworld(3, 3)).unwrap();
        let pi = PolicyTable::deterministic(4, &[1, 1, 2, 1, 1, 2, 1, 1, 0]);
        let a = sample_trajectories(&mdp, &pi, 50, 20, 1).unwrap();
        let b = sample_trajectories(&mdp, &pi, 50, 20, 99).unwrap();
        assert_eq!(a.episodes[0], b.episodes[0]);
        let c = sample_trajectories(&mdp, &PolicyTable::uniform(9, 4), 50, 20, 5).unwrap();
        let d = sample_trajectories(&mdp, &PolicyTable::uniform(9, 4), 50, 20, 5).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn chain_always_right_rewards() {
        let mdp = build_mdp(&EnvSpec::chain(3)).unwrap();
        let right = PolicyTable::deterministic(2, &[1, 1, 1]);
        let batch = sample_trajectories(&mdp, &right, 10, 50, 0).unwrap();
        for ep in &batch.episodes {
            let rewards: Vec<f64> = ep.transitions.iter().map(|t| t.reward).collect();
            assert_eq!(rewards, vec![0.0, 1.0]);
            assert!(!ep.truncated);
        }
    }

    #[test]
    fn visit_frequencies_match_occupancy() {
        let mdp = build_mdp(&EnvSpec::gridworld(3, 3).with_slip(0.1)).unwrap();
        let pi = PolicyTable::uniform(9, 4);
        let horizon = 15;
        let batch = sample_trajectories(&mdp, &pi, 100_000, horizon, 7).unwrap();
        let exact = episodic_occupancy(&mdp, &pi, horizon).unwrap();
        let n_ep = batch.episodes.len() as f64;
        let lengths: Vec<f64> = batch
            .episodes
            .iter()
            .map(|e| e.transitions.len() as f64)
            .collect();
        let mean_len = lengths.iter().sum::<f64>() / n_ep;
        for s in 0..8 {
            let counts: Vec<f64> = batch
                .episodes
                .iter()
                .map(|e| e.transitions.iter().filter(|t| t.state == s).count() as f64)
                .collect();
            let freq = counts.iter().sum::<f64>() / lengths.iter().sum::<f64>();
            // ratio estimator: Var ≈ Var(c − f·L) / (n · mean(L)²)
            let resid: Vec<f64> = counts
                .iter()
                .zip(&lengths)
                .map(|(c, l)| c - freq * l)
                .collect();
            let var = resid.iter().map(|r| r * r).sum::<f64>() / (n_ep - 1.0);
            let se = (var / n_ep).sqrt() / mean_len;
            assert!(
                (freq - exact[s]).abs() <= 3.0 * se,
                "state {s}: {freq} vs {} (se {se})",
                exact[s]
            );
        }
    }

    #[test]
    fn branch_step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = build_mdp(&EnvSpec::chain(4)).unwrap();
        for _ in 0..10 {
            assert_eq!(branch_step(&mdp, 1, 1, &mut rng).unwrap().next_state, 2);
        }
        let t = branch_step(&mdp, 3, 0, &mut rng).unwrap();
        assert_eq!((t.next_state, t.reward, t.done), (3, 0.0, true));
        assert!(matches!(
            branch_step(&mdp, 4, 0, &mut rng),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            branch_step(&mdp, 0, 2, &mut rng),
            Err(Error::Argument(_))
        ));

        let slippery = build_mdp(&EnvSpec::chain(4).with_slip(0.5)).unwrap();
        let n = 100_000;
        let right = (0..n)
            .filter(|_| branch_step(&slippery, 1, 1, &mut rng).unwrap().next_state == 2)
            .count();
        let freq = right as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((freq - 0.5).abs() <= 3.0 * se, "{freq}");
    }

    #[test]
    fn returns_recursion() {
        let t = |r: f64, done: bool| Transition {
            state: 0,
            action: 0,
            reward: r,
            next_state: 1,
            done,
        };
        let batch = TrajectoryBatch {
            episodes: vec![Episode {
                transitions: vec![t(1.0, false), t(1.0, false), t(1.0, true)],
                truncated: false,
            }],
        };
        assert_eq!(
            discounted_returns(&batch, 0.5, None),
            vec![vec![1.75, 1.5, 1.0]]
        );
        assert_eq!(
            discounted_returns(&batch, 0.0, None),
            vec![vec![1.0, 1.0, 1.0]]
        );

        let truncated = TrajectoryBatch {
            episodes: vec![Episode {
                transitions: vec![t(1.0, false), t(1.0, false)],
                truncated: true,
            }],
        };
        let c = 4.0;
        let q = QTable::from_fn(2, 3, |_, _| c);
        let pi = PolicyTable::new(2, 3, vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        let got = discounted_returns(&truncated, 0.5, Some((&q, &pi)));
        assert!((got[0][1] - (1.0 + 0.5 * c)).abs() < 1e-15);
        assert!((got[0][0] - (1.0 + 0.5 + 0.25 * c)).abs() < 1e-15);
    }

    #[test]
    fn sampled_returns_satisfy_recursion() {
        let mdp = build_mdp(&EnvSpec::gridworld(3, 3).with_slip(0.3)).unwrap();
        let batch = sample_trajectories(&mdp, &PolicyTable::uniform(9, 4), 500, 10, 3).unwrap();
        let q = QTable::from_fn(9, 4, |s, a| (s * 4 + a) as f64 * 0.01);
        let pi = PolicyTable::uniform(9, 4);
        let returns = discounted_returns(&batch, 0.9, Some((&q, &pi)));
        for (ep, rs) in batch.episodes.iter().zip(&returns) {
            for t in 0..rs.len().saturating_sub(1) {
                assert!((rs[t] - ep.transitions[t].reward - 0.9 * rs[t + 1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn horizon_zero_rejected() {
        let mdp = build_mdp(&EnvSpec::chain(3)).unwrap();
        assert!(sample_trajectories(&mdp, &PolicyTable::uniform(3, 2), 10, 0, 0).is_err());
    }
}
