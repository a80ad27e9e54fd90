//! Synchronous n-step advantage actor-critic.
//!
//! The critic is the model's Q head; state values are `V(s) = Σ_a π(a|s) Q(s,a)`
//! so that the overestimation metric is computed the same way as for FRL.

use rand::RngCore;

use crate::config::Config;
use crate::diagnostics::{fdiv_track, TrainingLog};
use crate::envs::{EnvSpec, Environment, TabularEnv};
use crate::error::{Error, Result};
use crate::frl::{
    diverged, init_model, make_behavior_policy, rngs, saddle_objective, BehaviorPolicyConfig,
    Bootstrap, PairedBatch, Reporter, StreamSample, UpdateStats,
};
use crate::nn::{
    clip_gradients, rmsprop_step, ActorCritic, Direction, ForwardCache, GradAccumulator,
    RmsPropState,
};
use crate::policy::{entropy, sample_categorical, Policy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct A2cConfig {
    pub n_step: usize,
    pub entropy_coefficient: f64,
    pub value_loss_coefficient: f64,
    pub learning_rate: f64,
    /// Transitions per update; spread over `max(1, batch_size / n_step)`
    /// parallel environments.
    pub batch_size: usize,
    pub grad_clip: f64,
}

impl Default for A2cConfig {
    fn default() -> Self {
        Self::from_config(&Config::default())
    }
}

impl A2cConfig {
    pub fn from_config(config: &Config) -> Self {
        Self {
            n_step: config.n_step,
            entropy_coefficient: config.entropy_coefficient,
            value_loss_coefficient: config.value_coefficient,
            learning_rate: config.lr_policy,
            batch_size: config.batch_size,
            grad_clip: config.grad_clip,
        }
    }

    pub fn n_envs(&self) -> usize {
        (self.batch_size / self.n_step).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_step == 0 {
            return Err(Error::config("n_step", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.entropy_coefficient >= 0.0) {
            return Err(Error::config("entropy_coefficient", "must be non-negative"));
        }
        if !(self.value_loss_coefficient >= 0.0) {
            return Err(Error::config("value_coefficient", "must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("lr_policy", "must be positive"));
        }
        Ok(())
    }
}

/// One on-policy transition with its n-step target.
#[derive(Debug, Clone, PartialEq)]
pub struct A2cSample {
    pub state: usize,
    pub action: usize,
    /// Discounted rewards up to the end of the segment.
    pub reward_sum: f64,
    pub bootstrap: Option<Bootstrap>,
}

impl A2cSample {
    fn stream_sample(&self) -> StreamSample {
        StreamSample {
            state: self.state,
            action: self.action,
            reward_sum: self.reward_sum,
            bootstrap: self.bootstrap.clone(),
        }
    }
}

struct Worker {
    env: TabularEnv,
    state: Option<usize>,
    episode_len: usize,
}

/// `n_step` transitions under π, targets bootstrapped from the last state.
fn run_segment(
    worker: &mut Worker,
    pi: &dyn Policy,
    n_step: usize,
    rng: &mut dyn RngCore,
    episodes_completed: &mut u64,
) -> Result<Vec<A2cSample>> {
    let gamma = worker.env.gamma();
    let mut steps = Vec::with_capacity(n_step);
    let mut tail: Option<usize> = None;
    for _ in 0..n_step {
        let s = match worker.state {
            Some(s) => s,
            None => {
                worker.episode_len = 0;
                worker.env.reset(rng)
            }
        };
        let t = worker
            .env
            .step(sample_categorical(&pi.probs(s), rng), rng)?;
        worker.episode_len += 1;
        steps.push(t);
        let truncated = !t.done && worker.episode_len >= worker.env.max_episode_steps();
        if t.done || truncated {
            *episodes_completed += 1;
            worker.state = None;
            // a segment stops at an episode boundary
            tail = (!t.done).then_some(t.next_state);
            break;
        }
        worker.state = Some(t.next_state);
        tail = Some(t.next_state);
    }
    let mut out = Vec::with_capacity(steps.len());
    for (i, t) in steps.iter().enumerate() {
        let mut reward_sum = 0.0;
        let mut discount = 1.0;
        for u in &steps[i..] {
            reward_sum += discount * u.reward;
            discount *= gamma;
        }
        let bootstrap = tail.map(|b| Bootstrap {
            state: b,
            discount,
            weights: pi.probs(b),
        });
        out.push(A2cSample {
            state: t.state,
            action: t.action,
            reward_sum,
            bootstrap,
        });
    }
    Ok(out)
}

/// Gradients of the mean policy loss `−A log π(a|s) − β H(π(·|s))` and of the
/// mean value loss `c · ½ (Q(s,a) − R)²`, with `A = R − V(s)` and `R` held
/// fixed.
pub fn a2c_gradients<M: ActorCritic + ?Sized>(
    samples: &[A2cSample],
    model: &M,
    config: &A2cConfig,
) -> Result<(GradAccumulator, GradAccumulator)> {
    if samples.is_empty() {
        return Err(Error::argument("no samples"));
    }
    let cache = ForwardCache::new(model);
    let q_of = |s: usize| cache.q(s).unwrap_or_default();
    let zeros = vec![0.0; model.n_actions()];
    let inv_n = 1.0 / samples.len() as f64;
    let mut g_policy = model.zero_grad();
    let mut g_value = model.zero_grad();
    for x in samples {
        let fwd = cache.get(x.state)?;
        let ret = x.stream_sample().target(&q_of);
        let advantage = ret - fwd.state_value();
        let h = entropy(&fwd.probs);
        let d_logits: Vec<f64> = fwd
            .log_prob_grad(x.action)
            .iter()
            .zip(&fwd.probs)
            .map(|(g, p)| {
                // dH/dz_j = −p_j (ln p_j + H)
                let d_entropy = -p * (p.ln() + h);
                (-advantage * g - config.entropy_coefficient * d_entropy) * inv_n
            })
            .collect();
        model.backward(&fwd, &d_logits, &zeros, &mut g_policy)?;
        let mut d_q = zeros.clone();
        d_q[x.action] = config.value_loss_coefficient * (fwd.q[x.action] - ret) * inv_n;
        model.backward(&fwd, &zeros, &d_q, &mut g_value)?;
    }
    Ok((g_policy, g_value))
}

/// Runs `total_steps / (n_envs · n_step)` updates; the `step` column counts
/// environment transitions.
pub fn a2c_train(env_spec: &EnvSpec, config: &Config, seed: u64) -> Result<TrainingLog> {
    config.validate()?;
    let a2c = A2cConfig::from_config(config);
    a2c.validate()?;
    let probe =
        BehaviorPolicyConfig::epsilon_greedy(config.epsilon_behavior.max(f64::MIN_POSITIVE));
    let [mut init_rng, mut rng, eval_rng] = rngs(seed);
    let base = TabularEnv::new(env_spec)?;
    let mut model = init_model(config, base.n_states(), base.n_actions(), &mut init_rng)?;
    let mut workers: Vec<Worker> = (0..a2c.n_envs())
        .map(|_| Worker {
            env: base.clone(),
            state: None,
            episode_len: 0,
        })
        .collect();
    let mut opt = RmsPropState::new(model.n_params());
    let mut reporter = Reporter::new(env_spec, config, eval_rng)?;
    let mut log = TrainingLog::default();
    let mut stats = UpdateStats::default();
    let mut episodes_completed = 0u64;
    reporter.maybe_report(&mut log, &model, 0, 0, &stats, false)?;

    let per_update = (a2c.n_envs() * a2c.n_step) as u64;
    let updates = config.total_steps / per_update;
    for t in 1..=updates {
        let step = t * per_update;
        let (g_policy, g_value) = {
            let cache = ForwardCache::new(&model);
            let mut samples = Vec::with_capacity(per_update as usize);
            for w in workers.iter_mut() {
                samples.extend(run_segment(
                    w,
                    &cache,
                    a2c.n_step,
                    &mut rng,
                    &mut episodes_completed,
                )?);
            }
            let streams: Vec<StreamSample> = samples.iter().map(A2cSample::stream_sample).collect();
            let batch = PairedBatch {
                on_policy: streams.clone(),
                behavior: streams,
            };
            let q_of = |s: usize| cache.q(s).unwrap_or_default();
            stats.objective = saddle_objective(&batch, &q_of);
            if !stats.objective.is_finite() {
                return Err(diverged(
                    step,
                    format!("objective is {}", stats.objective),
                    &model,
                ));
            }
            let states: Vec<usize> = batch.states().collect();
            let pi_tilde = make_behavior_policy(probe, &q_of, &cache)?;
            stats.fdiv = fdiv_track(&cache, &pi_tilde, &states)?;
            stats.entropy = states
                .iter()
                .map(|&s| entropy(&cache.probs(s)))
                .sum::<f64>()
                / states.len() as f64;
            a2c_gradients(&samples, &model, &a2c)?
        };
        stats.policy_grad_norm = g_policy.norm();
        stats.q_grad_norm = g_value.norm();
        let mut grad = g_policy;
        grad.add_scaled(&g_value, 1.0);
        if !grad.is_finite() {
            return Err(diverged(step, "non-finite gradient", &model));
        }
        clip_gradients(&mut grad, a2c.grad_clip);
        rmsprop_step(
            model.params_mut(),
            &grad,
            &mut opt,
            a2c.learning_rate,
            Direction::Descend,
        )?;
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(diverged(step, "non-finite parameters", &model));
        }
        reporter.maybe_report(
            &mut log,
            &model,
            step,
            episodes_completed,
            &stats,
            t == updates,
        )?;
    }
    log.model = Some(model);
    Ok(log)
}
