//! The FRL saddle point and its training loop.
//!
//! With `f(x) = ½(x − 1)²` the empirical objective on a paired batch is
//!
//! ```text
//! L(π, Q) = (1/B) Σ_π [Q(s,a) − R]  −  (1/B) Σ_π̃ [(Q(s,ã) − R̃) + ½(Q(s,ã) − R̃)²]
//! ```
//!
//! where the first sum runs over actions drawn from the learning policy π and
//! the second over actions drawn from the sampling policy π̃ at the same
//! states. `R` and `R̃` are n-step returns bootstrapped with `Σ_a π(a|s) Q(s,a)`.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

use crate::config::{BehaviorKind, Config, ModelKind};
use crate::diagnostics::{evaluate, fdiv_track, MetricsRow, TrainingLog};
use crate::envs::{EnvSpec, Environment, TabularEnv};
use crate::error::{Error, Result};
use crate::nn::{
    clip_gradients, encode_checkpoint, rmsprop_step, ActorCritic, ForwardCache, GradAccumulator,
    Mlp, Model, RmsPropState, TabularModel,
};
use crate::policy::{entropy, sample_categorical, Policy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorPolicyConfig {
    pub kind: BehaviorKind,
    /// ε for ε-greedy, the uniform weight for the mix; unused for snapshots.
    pub epsilon: f64,
    pub snapshot_interval: usize,
}

impl BehaviorPolicyConfig {
    pub fn epsilon_greedy(epsilon: f64) -> Self {
        Self {
            kind: BehaviorKind::EpsilonGreedyOnQ,
            epsilon,
            snapshot_interval: 1,
        }
    }

    pub fn from_config(config: &Config) -> Self {
        Self {
            kind: config.behavior,
            epsilon: config.epsilon_behavior,
            snapshot_interval: config.snapshot_interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon_behavior", "must lie in [0, 1]"));
        }
        match self.kind {
            BehaviorKind::EpsilonGreedyOnQ if self.epsilon == 0.0 => Err(Error::config(
                "epsilon_behavior",
                "must be positive so the sampling policy covers every action",
            )),
            BehaviorKind::SnapshotOfPi if self.snapshot_interval == 0 => {
                Err(Error::config("snapshot_interval", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// Sampling-policy row from a Q row and a policy row. For
    /// [`BehaviorKind::SnapshotOfPi`] `pi` must be the snapshot's row.
    pub fn row(&self, q: &[f64], pi: &[f64]) -> Vec<f64> {
        let n = q.len() as f64;
        match self.kind {
            BehaviorKind::EpsilonGreedyOnQ => {
                let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ties = q.iter().filter(|&&x| x == best).count() as f64;
                q.iter()
                    .map(|&x| {
                        self.epsilon / n
                            + if x == best {
                                (1.0 - self.epsilon) / ties
                            } else {
                                0.0
                            }
                    })
                    .collect()
            }
            BehaviorKind::SnapshotOfPi => pi.to_vec(),
            BehaviorKind::UniformMix => pi
                .iter()
                .map(|p| (1.0 - self.epsilon) * p + self.epsilon / n)
                .collect(),
        }
    }
}

/// A sampling policy built from a Q function and a policy.
pub struct BehaviorPolicy<'a> {
    config: BehaviorPolicyConfig,
    q_of: &'a dyn Fn(usize) -> Vec<f64>,
    pi: &'a dyn Policy,
}

impl Policy for BehaviorPolicy<'_> {
    fn n_actions(&self) -> usize {
        self.pi.n_actions()
    }

    fn probs(&self, state: usize) -> Vec<f64> {
        self.config.row(&(self.q_of)(state), &self.pi.probs(state))
    }
}

/// `q_of` gives the Q row of a state; `current_pi` is π itself, or the
/// snapshot of π for [`BehaviorKind::SnapshotOfPi`].
pub fn make_behavior_policy<'a>(
    config: BehaviorPolicyConfig,
    q_of: &'a dyn Fn(usize) -> Vec<f64>,
    current_pi: &'a dyn Policy,
) -> Result<BehaviorPolicy<'a>> {
    config.validate()?;
    Ok(BehaviorPolicy {
        config,
        q_of,
        pi: current_pi,
    })
}

/// Tail of an n-step return: `discount · Σ_a weights[a] Q(state, a)`, with
/// the policy weights frozen at collection time.
#[derive(Debug, Clone, PartialEq)]
pub struct Bootstrap {
    pub state: usize,
    pub discount: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub state: usize,
    pub action: usize,
    /// Discounted reward sum over the (at most n) observed steps.
    pub reward_sum: f64,
    /// `None` when the observed steps reached a terminal state.
    pub bootstrap: Option<Bootstrap>,
}

impl StreamSample {
    pub fn target(&self, q_of: &dyn Fn(usize) -> Vec<f64>) -> f64 {
        self.reward_sum
            + self
                .bootstrap
                .as_ref()
                .map_or(0.0, |b| b.discount * dot(&b.weights, &q_of(b.state)))
    }
}

/// Two action streams at shared states: `on_policy[i]` and `behavior[i]`
/// start from the same state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedBatch {
    pub on_policy: Vec<StreamSample>,
    pub behavior: Vec<StreamSample>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.behavior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.behavior.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = usize> + '_ {
        self.behavior.iter().map(|s| s.state)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy)]
struct Buffered {
    state: usize,
    action: usize,
    reward: f64,
    next_state: usize,
    done: bool,
    truncated: bool,
}

/// Keeps one continuing rollout under π̃ and slices it into paired batches.
///
/// The rollout runs `n_step − 1` transitions ahead of the batch so every
/// sampled state has its full n-step window; those look-ahead transitions
/// open the next batch.
#[derive(Debug, Clone)]
pub struct PairedCollector {
    n_step: usize,
    buffer: VecDeque<Buffered>,
    state: Option<usize>,
    episode_len: usize,
    /// Environment steps taken by the rollout.
    pub env_steps: u64,
    /// Rollout episodes ended by a terminal state or the step limit.
    pub episodes_completed: u64,
}

impl PairedCollector {
    pub fn new(n_step: usize) -> Result<Self> {
        if n_step == 0 {
            return Err(Error::argument("n_step must be at least 1"));
        }
        Ok(Self {
            n_step,
            buffer: VecDeque::new(),
            state: None,
            episode_len: 0,
            env_steps: 0,
            episodes_completed: 0,
        })
    }

    fn advance(
        &mut self,
        env: &mut dyn Environment,
        pi_tilde: &dyn Policy,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let state = match self.state {
            Some(s) => s,
            None => {
                self.episode_len = 0;
                env.reset(rng)
            }
        };
        let action = sample_categorical(&pi_tilde.probs(state), rng);
        let t = env.step(action, rng)?;
        self.env_steps += 1;
        self.episode_len += 1;
        let truncated = !t.done && self.episode_len >= env.max_episode_steps();
        if t.done || truncated {
            self.episodes_completed += 1;
            self.state = None;
        } else {
            self.state = Some(t.next_state);
        }
        self.buffer.push_back(Buffered {
            state: t.state,
            action: t.action,
            reward: t.reward,
            next_state: t.next_state,
            done: t.done,
            truncated,
        });
        Ok(())
    }

    fn behavior_sample(&self, start: usize, gamma: f64, pi: &dyn Policy) -> StreamSample {
        let first = self.buffer[start];
        let mut reward_sum = 0.0;
        let mut discount = 1.0;
        for k in 0..self.n_step {
            let b = self.buffer[start + k];
            reward_sum += discount * b.reward;
            discount *= gamma;
            if b.done {
                break;
            }
            if b.truncated || k + 1 == self.n_step {
                let bootstrap = Bootstrap {
                    state: b.next_state,
                    discount,
                    weights: pi.probs(b.next_state),
                };
                return StreamSample {
                    state: first.state,
                    action: first.action,
                    reward_sum,
                    bootstrap: Some(bootstrap),
                };
            }
        }
        StreamSample {
            state: first.state,
            action: first.action,
            reward_sum,
            bootstrap: None,
        }
    }

    /// Takes `batch_size` consecutive rollout states and, at each, an n-step
    /// branch rollout under π.
    pub fn collect(
        &mut self,
        env: &mut dyn Environment,
        pi: &dyn Policy,
        pi_tilde: &dyn Policy,
        batch_size: usize,
        rng: &mut dyn RngCore,
    ) -> Result<PairedBatch> {
        if batch_size == 0 {
            return Err(Error::argument("batch_size must be at least 1"));
        }
        while self.buffer.len() < batch_size + self.n_step - 1 {
            self.advance(env, pi_tilde, rng)?;
        }
        let gamma = env.gamma();
        let behavior: Vec<StreamSample> = (0..batch_size)
            .map(|j| self.behavior_sample(j, gamma, pi))
            .collect();
        let mut on_policy = Vec::with_capacity(batch_size);
        for b in &behavior {
            on_policy.push(branch_rollout(env, pi, b.state, self.n_step, gamma, rng)?);
        }
        self.buffer.drain(..batch_size);
        Ok(PairedBatch {
            on_policy,
            behavior,
        })
    }
}

fn branch_rollout(
    env: &dyn Environment,
    pi: &dyn Policy,
    start: usize,
    n_step: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<StreamSample> {
    let first_action = sample_categorical(&pi.probs(start), rng);
    let (mut state, mut action) = (start, first_action);
    let mut reward_sum = 0.0;
    let mut discount = 1.0;
    for k in 0..n_step {
        if k > 0 {
            action = sample_categorical(&pi.probs(state), rng);
        }
        let t = env.branch_step(state, action, rng)?;
        reward_sum += discount * t.reward;
        discount *= gamma;
        if t.done {
            return Ok(StreamSample {
                state: start,
                action: first_action,
                reward_sum,
                bootstrap: None,
            });
        }
        state = t.next_state;
    }
    let bootstrap = Bootstrap {
        state,
        discount,
        weights: pi.probs(state),
    };
    Ok(StreamSample {
        state: start,
        action: first_action,
        reward_sum,
        bootstrap: Some(bootstrap),
    })
}

/// One paired batch from a fresh rollout.
pub fn collect_paired_batch(
    env: &mut dyn Environment,
    pi: &dyn Policy,
    pi_tilde: &dyn Policy,
    batch_size: usize,
    n_step: usize,
    seed: u64,
) -> Result<PairedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PairedCollector::new(n_step)?.collect(env, pi, pi_tilde, batch_size, &mut rng)
}

pub fn saddle_objective(batch: &PairedBatch, q_of: &dyn Fn(usize) -> Vec<f64>) -> f64 {
    let b = batch.len() as f64;
    let on: f64 = batch
        .on_policy
        .iter()
        .map(|x| q_of(x.state)[x.action] - x.target(q_of))
        .sum();
    let off: f64 = batch
        .behavior
        .iter()
        .map(|x| {
            let d = q_of(x.state)[x.action] - x.target(q_of);
            d + 0.5 * d * d
        })
        .sum();
    (on - off) / b
}

/// How targets are treated when differentiating with respect to Q.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Bootstrap targets are constants (semi-gradient).
    Fixed,
    /// Gradients also flow through the bootstrap Q values, giving the exact
    /// gradient of [`saddle_objective`].
    Differentiate,
}

fn cached_q<'a, M: ActorCritic + ?Sized>(
    cache: &'a ForwardCache<'a, M>,
) -> impl Fn(usize) -> Vec<f64> + 'a {
    |s| {
        cache
            .q(s)
            .unwrap_or_else(|_| vec![f64::NAN; cache.model().n_actions()])
    }
}

/// `(1/B) Σ_i c_i ∇_θ log π(a_i|s_i)` over the on-policy stream, with
/// `c_i = Q(s_i, a_i) − R_i`.
pub fn policy_gradient<M: ActorCritic + ?Sized>(
    batch: &PairedBatch,
    model: &M,
) -> Result<GradAccumulator> {
    policy_gradient_cached(batch, &ForwardCache::new(model))
}

fn policy_gradient_cached<M: ActorCritic + ?Sized>(
    batch: &PairedBatch,
    cache: &ForwardCache<'_, M>,
) -> Result<GradAccumulator> {
    let model = cache.model();
    let mut grad = model.zero_grad();
    let zeros = vec![0.0; model.n_actions()];
    let q_of = cached_q(cache);
    let inv_b = 1.0 / batch.len() as f64;
    for x in &batch.on_policy {
        let fwd = cache.get(x.state)?;
        let c = fwd.q[x.action] - x.target(&q_of);
        let d_logits: Vec<f64> = fwd
            .log_prob_grad(x.action)
            .iter()
            .map(|g| g * c * inv_b)
            .collect();
        model.backward(&fwd, &d_logits, &zeros, &mut grad)?;
    }
    Ok(grad)
}

/// Gradient of the saddle objective with respect to the Q function:
/// `(1/B) Σ [−(Q(s,ã) − R̃) ∇Q(s,ã) + ∇Q(s,a) − ∇Q(s,ã)]`, plus the
/// target terms under [`TargetMode::Differentiate`].
pub fn q_gradient<M: ActorCritic + ?Sized>(
    batch: &PairedBatch,
    model: &M,
    mode: TargetMode,
) -> Result<GradAccumulator> {
    q_gradient_cached(batch, &ForwardCache::new(model), mode)
}

fn q_gradient_cached<M: ActorCritic + ?Sized>(
    batch: &PairedBatch,
    cache: &ForwardCache<'_, M>,
    mode: TargetMode,
) -> Result<GradAccumulator> {
    let model = cache.model();
    let n_actions = model.n_actions();
    let zeros = vec![0.0; n_actions];
    let q_of = cached_q(cache);
    let inv_b = 1.0 / batch.len() as f64;
    // Accumulate dL/dQ(s, ·) per state first, then backprop once per state.
    let mut d_q: Vec<Option<Vec<f64>>> = vec![None; model.n_states()];
    let mut add =
        |s: usize, a: usize, v: f64| d_q[s].get_or_insert_with(|| vec![0.0; n_actions])[a] += v;
    for (x, sign) in batch
        .on_policy
        .iter()
        .map(|x| (x, 1.0))
        .chain(batch.behavior.iter().map(|x| (x, -1.0)))
    {
        // on-policy term: Q − R, behavior term: −(d + ½d²) with d = Q − R̃
        let slope = if sign > 0.0 {
            1.0
        } else {
            -(1.0 + cache.get(x.state)?.q[x.action] - x.target(&q_of))
        };
        add(x.state, x.action, slope * inv_b);
        if let (TargetMode::Differentiate, Some(b)) = (mode, &x.bootstrap) {
            for (a, w) in b.weights.iter().enumerate() {
                add(b.state, a, -slope * inv_b * b.discount * w);
            }
        }
    }
    let mut grad = model.zero_grad();
    for (s, d) in d_q.iter().enumerate() {
        if let Some(d) = d {
            model.backward(&*cache.get(s)?, &zeros, d, &mut grad)?;
        }
    }
    Ok(grad)
}

pub(crate) fn rngs(seed: u64) -> [ChaCha8Rng; 3] {
    [0, 1, 2].map(|stream| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    })
}

pub(crate) fn init_model(
    config: &Config,
    n_states: usize,
    n_actions: usize,
    rng: &mut dyn RngCore,
) -> Result<Model> {
    Ok(match config.model {
        ModelKind::Mlp => Model::Mlp(Mlp::new(n_states, &config.hidden, n_actions, rng)?),
        ModelKind::Tabular => Model::Tabular(TabularModel::zeros(n_states, n_actions)?),
    })
}

pub(crate) fn diverged(step: u64, detail: impl Into<String>, model: &Model) -> Error {
    Error::Diverged {
        step,
        detail: detail.into(),
        checkpoint: encode_checkpoint(model),
    }
}

/// Telemetry of the latest update, reported in the next metrics row.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct UpdateStats {
    pub objective: f64,
    pub fdiv: f64,
    pub policy_grad_norm: f64,
    pub q_grad_norm: f64,
    pub entropy: f64,
}

/// Shared bookkeeping for metrics rows.
pub(crate) struct Reporter {
    eval_env: TabularEnv,
    rng: ChaCha8Rng,
    episodes: usize,
    interval: u64,
    next: u64,
    clock: Option<Instant>,
}

impl Reporter {
    pub fn new(spec: &EnvSpec, config: &Config, rng: ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            eval_env: TabularEnv::new(spec)?,
            rng,
            episodes: config.eval_episodes,
            interval: config.eval_interval,
            next: 0,
            clock: config.record_wall_clock.then(Instant::now),
        })
    }

    /// Appends a row if `step` reached the next evaluation point, or if
    /// `force` is set and the last row is older than `step`.
    pub fn maybe_report(
        &mut self,
        log: &mut TrainingLog,
        model: &Model,
        step: u64,
        episodes_completed: u64,
        stats: &UpdateStats,
        force: bool,
    ) -> Result<()> {
        let due = step >= self.next || (force && log.rows.last().is_none_or(|r| r.step < step));
        if !due {
            return Ok(());
        }
        while self.next <= step {
            self.next += self.interval;
        }
        let eval = evaluate(&mut self.eval_env, model, self.episodes, &mut self.rng)?;
        let row = MetricsRow {
            step,
            episodes_completed,
            mean_return: eval.mean_return,
            loss_value: eval.loss_value,
            saddle_objective: stats.objective,
            fdiv_estimate: stats.fdiv,
            policy_grad_norm: stats.policy_grad_norm,
            q_grad_norm: stats.q_grad_norm,
            policy_entropy: stats.entropy,
            wall_clock_ms: self.clock.map_or(0, |c| c.elapsed().as_millis() as u64),
        };
        if !row.is_finite() {
            return Err(diverged(
                step,
                format!("non-finite metrics row {row:?}"),
                model,
            ));
        }
        log.rows.push(row);
        Ok(())
    }
}

/// Runs `total_steps / batch_size` updates; the `step` column counts
/// sampling-policy transitions consumed by updates.
pub fn train(env_spec: &EnvSpec, config: &Config, seed: u64) -> Result<TrainingLog> {
    config.validate()?;
    let behavior = BehaviorPolicyConfig::from_config(config);
    behavior.validate()?;
    let mut env = TabularEnv::new(env_spec)?;
    let [mut init_rng, mut rng, eval_rng] = rngs(seed);
    let mut model = init_model(config, env.n_states(), env.n_actions(), &mut init_rng)?;
    let mut snapshot = model.clone();
    let n_params = model.n_params();
    let mut opt_theta = RmsPropState::new(n_params);
    let mut opt_phi = RmsPropState::new(n_params);
    let mut collector = PairedCollector::new(config.n_step)?;
    let mut reporter = Reporter::new(env_spec, config, eval_rng)?;
    let mut log = TrainingLog::default();
    let mut stats = UpdateStats::default();
    reporter.maybe_report(&mut log, &model, 0, 0, &stats, false)?;

    let batch_size = config.batch_size as u64;
    let updates = config.total_steps / batch_size;
    for t in 1..=updates {
        let step = t * batch_size;
        let (mut g_theta, mut g_phi) = {
            let cache = ForwardCache::new(&model);
            let snap_cache = ForwardCache::new(&snapshot);
            let q_of = cached_q(&cache);
            let pi_source: &dyn Policy = match behavior.kind {
                BehaviorKind::SnapshotOfPi => &snap_cache,
                _ => &cache,
            };
            let pi_tilde = make_behavior_policy(behavior, &q_of, pi_source)?;
            let batch =
                collector.collect(&mut env, &cache, &pi_tilde, config.batch_size, &mut rng)?;

            stats.objective = saddle_objective(&batch, &q_of);
            if !stats.objective.is_finite() {
                return Err(diverged(
                    step,
                    format!("objective is {}", stats.objective),
                    &model,
                ));
            }
            stats.fdiv = fdiv_track(&cache, &pi_tilde, &batch.states().collect::<Vec<_>>())?;
            stats.entropy = batch
                .states()
                .map(|s| entropy(&cache.probs(s)))
                .sum::<f64>()
                / batch.len() as f64;
            (
                policy_gradient_cached(&batch, &cache)?,
                q_gradient_cached(&batch, &cache, TargetMode::Fixed)?,
            )
        };
        if !g_theta.is_finite() || !g_phi.is_finite() {
            return Err(diverged(step, "non-finite gradient", &model));
        }
        stats.policy_grad_norm = clip_gradients(&mut g_theta, config.grad_clip);
        stats.q_grad_norm = clip_gradients(&mut g_phi, config.grad_clip);
        rmsprop_step(
            model.params_mut(),
            &g_theta,
            &mut opt_theta,
            config.lr_policy,
            config.policy_update_direction,
        )?;
        rmsprop_step(
            model.params_mut(),
            &g_phi,
            &mut opt_phi,
            config.lr_q,
            config.q_update_direction,
        )?;
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(diverged(step, "non-finite parameters", &model));
        }
        if behavior.kind == BehaviorKind::SnapshotOfPi && t % behavior.snapshot_interval as u64 == 0
        {
            snapshot = model.clone();
        }
        reporter.maybe_report(
            &mut log,
            &model,
            step,
            collector.episodes_completed,
            &stats,
            t == updates,
        )?;
    }
    log.model = Some(model);
    Ok(log)
}
