//! Metrics rows, the overestimation metric, and self-checks of the FRL
//! gradients and of the return-substitution identity.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::convex::{
    double_conjugate_check, fdiv_direct, fdiv_variational, optimal_witness,
    optimize_witness_numeric, ConvexFunction, DiscreteDistributionPair, WitnessTable,
};
use crate::envs::{run_episode, Environment, Episode, TabularEnv, TrajectoryBatch, Transition};
use crate::error::{Error, Result};
use crate::frl::{
    collect_paired_batch, make_behavior_policy, policy_gradient, q_gradient, saddle_objective,
    BehaviorPolicyConfig, Bootstrap, PairedBatch, StreamSample, TargetMode,
};
use crate::mdp::{
    bellman_consistency_residual, enumerate_trajectories, finite_horizon_q,
    finite_horizon_return_variance, value_iteration, Mdp, PolicyTable, QTable,
};
use crate::nn::{ActorCritic, ForwardCache, Mlp, Model, ModelPolicy, TabularModel};
use crate::policy::{sample_categorical, Policy};

pub const CSV_HEADER: &str = "step,episodes_completed,mean_return,loss_value,saddle_objective,fdiv_estimate,policy_grad_norm,q_grad_norm,policy_entropy,wall_clock_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub episodes_completed: u64,
    pub mean_return: f64,
    pub loss_value: f64,
    pub saddle_objective: f64,
    pub fdiv_estimate: f64,
    pub policy_grad_norm: f64,
    pub q_grad_norm: f64,
    pub policy_entropy: f64,
    pub wall_clock_ms: u64,
}

impl MetricsRow {
    /// All telemetry finite. `loss_value` may also be NaN, which marks an
    /// evaluation without complete episodes.
    pub fn is_finite(&self) -> bool {
        !self.loss_value.is_infinite()
            && [
                self.mean_return,
                self.saddle_objective,
                self.fdiv_estimate,
                self.policy_grad_norm,
                self.q_grad_norm,
                self.policy_entropy,
            ]
            .iter()
            .all(|x| x.is_finite())
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episodes_completed,
            self.mean_return,
            self.loss_value,
            self.saddle_objective,
            self.fdiv_estimate,
            self.policy_grad_norm,
            self.q_grad_norm,
            self.policy_entropy,
            self.wall_clock_ms
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 10 {
            return Err(Error::argument(format!(
                "expected 10 fields, got {}",
                fields.len()
            )));
        }
        let f = |i: usize| {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::argument(format!("bad number `{}`", fields[i])))
        };
        let u = |i: usize| {
            fields[i]
                .parse::<u64>()
                .map_err(|_| Error::argument(format!("bad integer `{}`", fields[i])))
        };
        Ok(Self {
            step: u(0)?,
            episodes_completed: u(1)?,
            mean_return: f(2)?,
            loss_value: f(3)?,
            saddle_objective: f(4)?,
            fdiv_estimate: f(5)?,
            policy_grad_norm: f(6)?,
            q_grad_norm: f(7)?,
            policy_entropy: f(8)?,
            wall_clock_ms: u(9)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub rows: Vec<MetricsRow>,
    /// Parameters at the end of training.
    pub model: Option<Model>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    /// Rows with `step ≥ (1 − fraction)·last_step`.
    pub fn tail(&self, fraction: f64) -> &[MetricsRow] {
        let Some(last) = self.rows.last() else {
            return &[];
        };
        let cutoff = (1.0 - fraction) * last.step as f64;
        let start = self
            .rows
            .iter()
            .position(|r| r.step as f64 >= cutoff)
            .unwrap_or(self.rows.len());
        &self.rows[start..]
    }
}

/// Mean over visits of `Σ_a π(a|s) Q(s,a)` minus the observed discounted
/// return from that visit. Truncated episodes are skipped.
pub fn loss_value(
    batch: &TrajectoryBatch,
    pi: &dyn Policy,
    q_of: &dyn Fn(usize) -> Vec<f64>,
    gamma: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut visits = 0usize;
    for ep in batch.episodes.iter().filter(|e| !e.truncated) {
        let mut ret = 0.0;
        for t in ep.transitions.iter().rev() {
            ret = t.reward + gamma * ret;
            let v: f64 = pi
                .probs(t.state)
                .iter()
                .zip(q_of(t.state))
                .map(|(p, q)| p * q)
                .sum();
            total += v - ret;
            visits += 1;
        }
    }
    if visits == 0 {
        return Err(Error::argument("no visits in complete episodes"));
    }
    Ok(total / visits as f64)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Mean discounted return from the start state, truncated episodes
    /// included.
    pub mean_return: f64,
    /// [`loss_value`] over the complete episodes, NaN if there are none.
    pub loss_value: f64,
    pub batch: TrajectoryBatch,
}

/// Runs `episodes` episodes under the model's stochastic policy.
pub fn evaluate<M: ActorCritic + ?Sized>(
    env: &mut dyn Environment,
    model: &M,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<Evaluation> {
    let cache = ForwardCache::new(model);
    let mut batch = TrajectoryBatch::default();
    for _ in 0..episodes {
        batch.episodes.push(rollout(env, &cache, rng)?);
    }
    finish_evaluation(env.gamma(), batch, &cache, &|s| {
        cache.q(s).unwrap_or_default()
    })
}

/// Runs `episodes` episodes acting greedily on the model's policy.
pub fn evaluate_greedy<M: ActorCritic + ?Sized>(
    env: &mut dyn Environment,
    model: &M,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<Evaluation> {
    let cache = ForwardCache::new(model);
    let greedy = crate::policy::FnPolicy::new(model.n_actions(), |s| {
        let mut row = vec![0.0; model.n_actions()];
        row[crate::policy::argmax(&cache.probs(s))] = 1.0;
        row
    });
    let mut batch = TrajectoryBatch::default();
    for _ in 0..episodes {
        batch.episodes.push(rollout(env, &greedy, rng)?);
    }
    finish_evaluation(env.gamma(), batch, &greedy, &|s| {
        cache.q(s).unwrap_or_default()
    })
}

fn rollout(env: &mut dyn Environment, pi: &dyn Policy, rng: &mut dyn RngCore) -> Result<Episode> {
    let mut state = env.reset(rng);
    let mut transitions: Vec<Transition> = Vec::new();
    loop {
        let t = env.step(sample_categorical(&pi.probs(state), rng), rng)?;
        transitions.push(t);
        if t.done {
            return Ok(Episode {
                transitions,
                truncated: false,
            });
        }
        if transitions.len() >= env.max_episode_steps() {
            return Ok(Episode {
                transitions,
                truncated: true,
            });
        }
        state = t.next_state;
    }
}

fn finish_evaluation(
    gamma: f64,
    batch: TrajectoryBatch,
    pi: &dyn Policy,
    q_of: &dyn Fn(usize) -> Vec<f64>,
) -> Result<Evaluation> {
    let n = batch.episodes.len().max(1) as f64;
    let mean_return = batch
        .episodes
        .iter()
        .map(|e| {
            e.transitions
                .iter()
                .rev()
                .fold(0.0, |acc, t| t.reward + gamma * acc)
        })
        .sum::<f64>()
        / n;
    let loss_value = match loss_value(&batch, pi, q_of, gamma) {
        Ok(v) => v,
        Err(Error::Argument(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        mean_return,
        loss_value,
        batch,
    })
}

/// Mean over `visited_states` of the χ²-type divergence
/// `D_f(π(·|s) ‖ π̃(·|s))` with `f(x) = ½(x − 1)²`.
pub fn fdiv_track(pi: &dyn Policy, pi_tilde: &dyn Policy, visited_states: &[usize]) -> Result<f64> {
    if visited_states.is_empty() {
        return Err(Error::argument("no visited states"));
    }
    let f = ConvexFunction::quadratic_shifted();
    let mut total = 0.0;
    for &s in visited_states {
        let pair = DiscreteDistributionPair::new(pi.probs(s), pi_tilde.probs(s))?;
        total += fdiv_direct(&f, &pair)?;
    }
    Ok(total / visited_states.len() as f64)
}

/// A machine-readable check outcome, printed as one `key=value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub passed: bool,
    pub fields: Vec<(String, String)>,
}

impl Report {
    pub fn new(name: &str, passed: bool) -> Self {
        Self {
            name: name.into(),
            passed,
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "check={} result={}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

/// `‖a − b‖_∞ / max(‖a‖_∞, ‖b‖_∞)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `objective(params)` with step `h`.
pub fn central_differences(
    params: &[f64],
    h: f64,
    mut objective: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let plus = objective(&p);
            p[i] = orig - h;
            let minus = objective(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-5;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Exact Q-gradient (targets differentiated) against central differences of
/// the saddle objective, on one fixed batch.
pub fn q_gradient_error<M: ActorCritic + Clone>(batch: &PairedBatch, model: &M) -> Result<f64> {
    let analytic = q_gradient(batch, model, TargetMode::Differentiate)?;
    let mut probe = model.clone();
    let numeric = central_differences(model.params(), GRADCHECK_STEP, |p| {
        probe.params_mut().copy_from_slice(p);
        let q_of = |s: usize| probe.forward(s).map(|f| f.q).unwrap_or_default();
        saddle_objective(batch, &q_of)
    });
    Ok(relative_error(analytic.as_slice(), &numeric))
}

/// Random models and batches on `mdp`, each checked by [`q_gradient_error`].
pub fn gradcheck_policy_evaluation(
    mdp: &Mdp,
    tabular: bool,
    trials: usize,
    seed: u64,
) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let model = if tabular {
            let mut m = TabularModel::zeros(ns, na)?;
            m.params_mut()
                .iter_mut()
                .for_each(|p| *p = rng.gen_range(-1.0..1.0));
            Model::Tabular(m)
        } else {
            let mut m = Mlp::new(ns, &[8, 8], na, &mut rng)?;
            m.params_mut()
                .iter_mut()
                .for_each(|p| *p += rng.gen_range(-0.2..0.2));
            Model::Mlp(m)
        };
        let batch_size = rng.gen_range(1..=16);
        let n_step = rng.gen_range(1..=3);
        let epsilon = rng.gen_range(0.1..1.0);
        let pi = ModelPolicy(&model);
        let q_of = |s: usize| model.forward(s).map(|f| f.q).unwrap_or_default();
        let pi_tilde =
            make_behavior_policy(BehaviorPolicyConfig::epsilon_greedy(epsilon), &q_of, &pi)?;
        let mut env = TabularEnv::from_mdp(mdp.clone(), 50);
        let batch = collect_paired_batch(&mut env, &pi, &pi_tilde, batch_size, n_step, rng.gen())?;
        errors.push(q_gradient_error(&batch, &model)?);
    }
    let max = errors.iter().cloned().fold(0.0, f64::max);
    Ok(Report::new(
        if tabular {
            "q_gradient_tabular"
        } else {
            "q_gradient_mlp"
        },
        max < GRADCHECK_THRESHOLD,
    )
    .with("trials", trials)
    .with("max_rel_err", max)
    .with("threshold", GRADCHECK_THRESHOLD))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorCheck {
    /// Exact gradient over the policy logits.
    pub exact: Vec<f64>,
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub z: Vec<f64>,
}

impl EstimatorCheck {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }

    pub fn report(&self) -> Report {
        Report::new("policy_gradient_unbiased", self.max_abs_z() <= 3.0)
            .with("coordinates", self.z.len())
            .with("max_abs_z", self.max_abs_z())
    }
}

/// `Q − r − γ Σ_a' π̄(a'|s') Q(s',a')` samples of one trajectory, with the
/// bootstrap policy frozen at the current parameters.
fn trajectory_batch(
    model: &TabularModel,
    mdp: &Mdp,
    steps: &[(usize, usize, f64, usize)],
) -> Result<PairedBatch> {
    let samples = steps
        .iter()
        .map(|&(s, a, r, sp)| {
            let bootstrap = if mdp.is_terminal(sp) {
                None
            } else {
                Some(Bootstrap {
                    state: sp,
                    discount: mdp.gamma(),
                    weights: model.forward(sp)?.probs,
                })
            };
            Ok(StreamSample {
                state: s,
                action: a,
                reward_sum: r,
                bootstrap,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedBatch {
        on_policy: samples.clone(),
        behavior: samples,
    })
}

/// Checks that the policy-gradient estimator is unbiased for the gradient of
/// `E_τ[Σ_t Σ_a π_θ(a|s_t) c(s_t, a)]`, where the state distribution and the
/// bootstrap policy in `c = Q − r − γ E[Σ π̄ Q]` are held at the current
/// parameters and Q is frozen.
///
/// The exact side enumerates horizon-`horizon` trajectories and takes central
/// differences over the logits; the estimate averages the per-trajectory sum
/// of the batch estimator over `n_samples` sampled trajectories.
pub fn estimator_check_with(
    mdp: &Mdp,
    model: &TabularModel,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<EstimatorCheck> {
    if n_samples < 2 {
        return Err(Error::argument("need at least two samples"));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let pi0 = PolicyTable::from_policy(&ModelPolicy(model), ns)?;
    let trajectories = enumerate_trajectories(mdp, &pi0, horizon)?;
    let q = QTable::new(ns, na, model.params()[ns * na..].to_vec())?;
    let v_bar: Vec<f64> = (0..ns)
        .map(|s| {
            if mdp.is_terminal(s) {
                0.0
            } else {
                q.state_value(s, pi0.row(s))
            }
        })
        .collect();
    let c_bar = QTable::from_fn(ns, na, |s, a| {
        let ev: f64 = mdp
            .next_state_probs(s, a)
            .iter()
            .zip(&v_bar)
            .map(|(p, v)| p * v)
            .sum();
        q.get(s, a) - mdp.reward(s, a) - mdp.gamma() * ev
    });
    let logits = &model.params()[..ns * na];
    let objective = |theta: &[f64]| {
        let probs: Vec<Vec<f64>> = (0..ns)
            .map(|s| crate::nn::softmax(&theta[s * na..(s + 1) * na]))
            .collect();
        trajectories
            .iter()
            .map(|tr| {
                tr.probability
                    * tr.steps
                        .iter()
                        .map(|st| {
                            probs[st.state]
                                .iter()
                                .zip(c_bar.row(st.state))
                                .map(|(p, c)| p * c)
                                .sum::<f64>()
                        })
                        .sum::<f64>()
            })
            .sum::<f64>()
    };
    let exact = central_differences(logits, 1e-6, objective);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![Vec::with_capacity(n_samples); ns * na];
    for _ in 0..n_samples {
        let episode = run_episode(mdp, &pi0, horizon, &mut rng)?;
        let steps: Vec<_> = episode
            .transitions
            .iter()
            .map(|t| (t.state, t.action, t.reward, t.next_state))
            .collect();
        if steps.is_empty() {
            samples.iter_mut().for_each(|c| c.push(0.0));
            continue;
        }
        let batch = trajectory_batch(model, mdp, &steps)?;
        let g = policy_gradient(&batch, model)?;
        for (c, &gi) in samples.iter_mut().zip(&g.as_slice()[..ns * na]) {
            c.push(gi * steps.len() as f64);
        }
    }
    let n = n_samples as f64;
    let (mut mean, mut standard_error) = (Vec::new(), Vec::new());
    for c in &samples {
        if c.iter().all(|&x| x == c[0]) {
            mean.push(c[0]);
            standard_error.push(0.0);
            continue;
        }
        let m = c.iter().sum::<f64>() / n;
        let var = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        mean.push(m);
        standard_error.push((var / n).sqrt());
    }
    let z = mean
        .iter()
        .zip(&exact)
        .zip(&standard_error)
        .map(|((m, e), se)| {
            let diff = m - e;
            if *se > 0.0 {
                diff / se
            } else if diff.abs() <= 1e-8 * (1.0 + e.abs()) {
                // a zero-variance estimator must agree up to finite-difference error
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    Ok(EstimatorCheck {
        exact,
        mean,
        standard_error,
        z,
    })
}

/// [`estimator_check_with`] on random logits in `[−1, 1]` and a random frozen
/// Q table in `[−2, 2]`.
pub fn estimator_check_policy_improvement(
    mdp: &Mdp,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<EstimatorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let logits: Vec<f64> = (0..ns * na).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let q: Vec<f64> = (0..ns * na).map(|_| rng.gen_range(-2.0..2.0)).collect();
    estimator_check_with(
        mdp,
        &TabularModel::from_tables(ns, na, &logits, &q)?,
        horizon,
        n_samples,
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnSubstitution {
    /// `E[Σ_t (Q(s_t,a_t) − G_t)²]` with `G_t` the observed return to the
    /// horizon.
    pub lhs: f64,
    /// `E[Σ_t (Q(s_t,a_t) − Q_{H−t}(s_t,a_t))²]` with the exact finite-horizon
    /// action values of the sampling policy.
    pub rhs: f64,
    pub gap: f64,
    /// `E[Σ_t Var(G_t | s_t, a_t)]` from the second-moment recursion.
    pub return_variance: f64,
    /// Transitions and policy are both deterministic.
    pub deterministic: bool,
}

impl ReturnSubstitution {
    pub fn report(&self) -> Report {
        let passed = if self.deterministic {
            self.gap.abs() < 1e-8
        } else {
            (self.gap - self.return_variance).abs() < 1e-8
        };
        Report::new("return_substitution", passed)
            .with("lhs", self.lhs)
            .with("rhs", self.rhs)
            .with("gap", self.gap)
            .with("return_variance", self.return_variance)
            .with("deterministic", self.deterministic)
    }
}

/// Replacing observed returns by exact action values in the squared
/// residual `E_π̃[(Q − R)²]` drops exactly the conditional return variance.
/// Enumerates trajectories of `pi_tilde` to `horizon`.
pub fn return_substitution_check(
    mdp: &Mdp,
    pi_tilde: &PolicyTable,
    q: &QTable,
    horizon: usize,
) -> Result<ReturnSubstitution> {
    let trajectories = enumerate_trajectories(mdp, pi_tilde, horizon)?;
    let exact = finite_horizon_q(mdp, pi_tilde, horizon)?;
    let variance = finite_horizon_return_variance(mdp, pi_tilde, horizon)?;
    let (mut lhs, mut rhs, mut return_variance) = (0.0, 0.0, 0.0);
    for tr in &trajectories {
        let mut g = 0.0;
        let mut returns: Vec<f64> = tr
            .steps
            .iter()
            .rev()
            .map(|st| {
                g = st.reward + mdp.gamma() * g;
                g
            })
            .collect();
        returns.reverse();
        for (t, (st, ret)) in tr.steps.iter().zip(&returns).enumerate() {
            let k = horizon - t;
            let qv = q.get(st.state, st.action);
            lhs += tr.probability * (qv - ret).powi(2);
            rhs += tr.probability * (qv - exact[k].get(st.state, st.action)).powi(2);
            return_variance += tr.probability * variance[k].get(st.state, st.action);
        }
    }
    let deterministic_env = (0..mdp.n_states()).all(|s| {
        (0..mdp.n_actions()).all(|a| {
            mdp.next_state_probs(s, a)
                .iter()
                .all(|&p| p == 0.0 || p == 1.0)
        })
    });
    let deterministic_pi =
        (0..mdp.n_states()).all(|s| pi_tilde.row(s).iter().all(|&p| p == 0.0 || p == 1.0));
    Ok(ReturnSubstitution {
        lhs,
        rhs,
        gap: lhs - rhs,
        return_variance,
        deterministic: deterministic_env && deterministic_pi,
    })
}

/// `f**` against `f` for both built-in generators.
pub fn fenchel_check() -> Result<Report> {
    let quad_grid: Vec<f64> = (0..601).map(|i| -3.0 + i as f64 * 0.01).collect();
    let xlogx_grid: Vec<f64> = (0..601).map(|i| 0.1 + i as f64 * (2.9 / 600.0)).collect();
    let quad = double_conjugate_check(&ConvexFunction::quadratic_shifted(), &quad_grid)?;
    let xlogx = double_conjugate_check(&ConvexFunction::x_log_x(), &xlogx_grid)?;
    Ok(
        Report::new("fenchel_involution", quad < 1e-6 && xlogx < 1e-6)
            .with("quadratic_max_err", quad)
            .with("xlogx_max_err", xlogx),
    )
}

/// Random positive distribution of size `n`.
pub fn random_distribution(n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / z).collect();
    // absorb rounding so the entries sum to one within a few ulps
    let rest: f64 = p[1..].iter().sum();
    p[0] = 1.0 - rest;
    p
}

/// Direct divergence against the variational form at the closed-form and
/// the numerically optimized witness, plus weak duality at perturbed
/// witnesses.
pub fn variational_check(n_pairs: usize, seed: u64) -> Result<Report> {
    let f = ConvexFunction::quadratic_shifted();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut closed_gap, mut numeric_gap, mut duality_violation) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n_pairs {
        let n = rng.gen_range(2..=6);
        let pair = DiscreteDistributionPair::new(
            random_distribution(n, &mut rng),
            random_distribution(n, &mut rng),
        )?;
        let direct = fdiv_direct(&f, &pair)?;
        let closed = fdiv_variational(&f, &pair, &optimal_witness(&f, &pair)?)?;
        let numeric = fdiv_variational(&f, &pair, &optimize_witness_numeric(&f, &pair)?)?;
        closed_gap = closed_gap.max((direct - closed).abs());
        numeric_gap = numeric_gap.max((direct - numeric).abs());
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perturbed = WitnessTable::new(
            optimal_witness(&f, &pair)?
                .values()
                .iter()
                .zip(&noise)
                .map(|(w, e)| w + e)
                .collect(),
        )?;
        duality_violation =
            duality_violation.max(fdiv_variational(&f, &pair, &perturbed)? - direct);
    }
    Ok(Report::new(
        "variational_equality",
        closed_gap < 1e-10 && numeric_gap < 1e-4 && duality_violation <= 1e-10,
    )
    .with("pairs", n_pairs)
    .with("closed_form_gap", closed_gap)
    .with("numeric_gap", numeric_gap)
    .with("max_duality_violation", duality_violation))
}

/// Value iteration on `mdp`, then the expectation backup under the greedy
/// policy against the optimality backup.
pub fn bellman_check(name: &str, mdp: &Mdp) -> Result<Report> {
    let report = value_iteration(mdp, 1e-10)?;
    let residual = bellman_consistency_residual(mdp, &report.q)?;
    Ok(
        Report::new(&format!("bellman_consistency_{name}"), residual <= 1e-12)
            .with("iterations", report.iterations)
            .with("residual", residual),
    )
}

/// Backprop of the MLP against central differences for `Σ_a Q(s,a)` and
/// `log π(a|s)`, over `trials` random networks.
pub fn nn_gradient_check(trials: usize, seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (ns, na) = (rng.gen_range(2..8), rng.gen_range(2..5));
        let mut model = Mlp::new(
            ns,
            &[rng.gen_range(2..10), rng.gen_range(2..10)],
            na,
            &mut rng,
        )?;
        model
            .params_mut()
            .iter_mut()
            .for_each(|p| *p += rng.gen_range(-0.2..0.2));
        let (s, a) = (rng.gen_range(0..ns), rng.gen_range(0..na));
        let fwd = model.forward(s)?;
        let zeros = vec![0.0; na];

        let mut g = model.zero_grad();
        model.backward(&fwd, &zeros, &vec![1.0; na], &mut g)?;
        let mut probe = model.clone();
        let numeric = central_differences(model.params(), 1e-5, |p| {
            probe.params_mut().copy_from_slice(p);
            probe
                .forward(s)
                .map(|f| f.q.iter().sum())
                .unwrap_or(f64::NAN)
        });
        worst = worst.max(relative_error(g.as_slice(), &numeric));

        let mut g = model.zero_grad();
        model.backward(&fwd, &fwd.log_prob_grad(a), &zeros, &mut g)?;
        let numeric = central_differences(model.params(), 1e-5, |p| {
            probe.params_mut().copy_from_slice(p);
            probe
                .forward(s)
                .map(|f| f.probs[a].ln())
                .unwrap_or(f64::NAN)
        });
        worst = worst.max(relative_error(g.as_slice(), &numeric));
    }
    Ok(Report::new("nn_backprop", worst < 1e-6)
        .with("trials", trials)
        .with("max_rel_err", worst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_mdp, EnvSpec};
    use crate::mdp::policy_evaluation_exact;

    fn episode(steps: &[(usize, usize, f64)], truncated: bool) -> Episode {
        let transitions = steps
            .iter()
            .enumerate()
            .map(|(i, &(state, action, reward))| Transition {
                state,
                action,
                reward,
                next_state: steps.get(i + 1).map_or(99, |s| s.0),
                done: !truncated && i + 1 == steps.len(),
            })
            .collect();
        Episode {
            transitions,
            truncated,
        }
    }

    #[test]
    fn loss_value_examples() {
        let gamma = 0.9;
        let batch = TrajectoryBatch {
            episodes: vec![
                episode(&[(0, 1, 0.0), (1, 0, 1.0)], false),
                episode(&[(2, 1, 5.0)], true),
            ],
        };
        // returns: state 0 → 0.9, state 1 → 1.0
        let pi = crate::policy::FnPolicy::new(2, |s| {
            if s == 0 {
                vec![0.0, 1.0]
            } else {
                vec![1.0, 0.0]
            }
        });
        let q = |s: usize| {
            if s == 0 {
                vec![-7.0, 0.9]
            } else {
                vec![1.0, 3.0]
            }
        };
        assert!(loss_value(&batch, &pi, &q, gamma).unwrap().abs() < 1e-15);
        let inflated = |s: usize| q(s).iter().map(|x| x + 0.25).collect::<Vec<_>>();
        assert!((loss_value(&batch, &pi, &inflated, gamma).unwrap() - 0.25).abs() < 1e-15);

        let truncated_only = TrajectoryBatch {
            episodes: vec![episode(&[(0, 0, 1.0)], true)],
        };
        assert!(matches!(
            loss_value(&truncated_only, &pi, &q, gamma),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn loss_value_vanishes_for_exact_values_on_deterministic_env() {
        let mdp = build_mdp(&EnvSpec::gridworld(3, 3).with_gamma(0.9)).unwrap();
        let pi = PolicyTable::deterministic(4, &[1, 1, 2, 1, 1, 2, 1, 1, 0]);
        let q = policy_evaluation_exact(&mdp, &pi).unwrap();
        let batch = crate::envs::sample_trajectories(&mdp, &pi, 100, 50, 0).unwrap();
        let v = loss_value(&batch, &pi, &|s| q.row(s).to_vec(), 0.9).unwrap();
        assert!(v.abs() < 1e-10, "{v}");
    }

    #[test]
    fn fdiv_track_examples() {
        let pi = crate::policy::FnPolicy::new(2, |_| vec![0.5, 0.5]);
        assert_eq!(fdiv_track(&pi, &pi, &[0, 1, 2]).unwrap(), 0.0);
        let skewed = crate::policy::FnPolicy::new(2, |_| vec![0.95, 0.05]);
        let f = ConvexFunction::quadratic_shifted();
        let direct = fdiv_direct(
            &f,
            &DiscreteDistributionPair::new(vec![0.5, 0.5], vec![0.95, 0.05]).unwrap(),
        )
        .unwrap();
        assert!((fdiv_track(&pi, &skewed, &[3, 3]).unwrap() - direct).abs() < 1e-15);
        // hand value: ½[0.95(0.5/0.95 − 1)² + 0.05(0.5/0.05 − 1)²]
        let hand =
            0.5 * (0.95 * (0.5f64 / 0.95 - 1.0).powi(2) + 0.05 * (0.5f64 / 0.05 - 1.0).powi(2));
        assert!((direct - hand).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batch_gradcheck_is_zero_on_both_sides() {
        let model = TabularModel::from_tables(1, 2, &[0.0, 0.0], &[0.5, 1.0]).unwrap();
        let s = StreamSample {
            state: 0,
            action: 1,
            reward_sum: 1.0,
            bootstrap: None,
        };
        let batch = PairedBatch {
            on_policy: vec![s.clone()],
            behavior: vec![s],
        };
        let analytic = q_gradient(&batch, &model, TargetMode::Differentiate).unwrap();
        assert!(analytic.as_slice().iter().all(|&g| g == 0.0));
        assert_eq!(q_gradient_error(&batch, &model).unwrap(), 0.0);
    }

    #[test]
    fn gradchecks_pass_on_small_grid() {
        let mdp = build_mdp(&EnvSpec::gridworld(3, 3).with_slip(0.2)).unwrap();
        assert!(
            gradcheck_policy_evaluation(&mdp, true, 5, 1)
                .unwrap()
                .passed
        );
        assert!(
            gradcheck_policy_evaluation(&mdp, false, 5, 2)
                .unwrap()
                .passed
        );
    }

    #[test]
    fn semi_gradient_differs_from_exact_gradient_only_through_targets() {
        // without bootstraps both modes agree
        let model = TabularModel::from_tables(2, 2, &[0.2, 0.0, -0.1, 0.4], &[0.5, 1.0, -0.3, 0.2])
            .unwrap();
        let s = |state, action, r| StreamSample {
            state,
            action,
            reward_sum: r,
            bootstrap: None,
        };
        let batch = PairedBatch {
            on_policy: vec![s(0, 0, 1.0), s(1, 1, 0.0)],
            behavior: vec![s(0, 1, 0.3), s(1, 0, -1.0)],
        };
        assert_eq!(
            q_gradient(&batch, &model, TargetMode::Fixed).unwrap(),
            q_gradient(&batch, &model, TargetMode::Differentiate).unwrap()
        );
    }

    fn two_state_stochastic() -> Mdp {
        let transition = vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.9, 0.1];
        let reward = vec![1.0, -0.5, 0.3, 2.0];
        Mdp::new(
            2,
            2,
            transition,
            reward,
            0.9,
            vec![0.6, 0.4],
            vec![false, false],
        )
        .unwrap()
    }

    #[test]
    fn estimator_check_small_sample() {
        let check =
            estimator_check_policy_improvement(&two_state_stochastic(), 3, 20_000, 4).unwrap();
        assert!(check.max_abs_z() <= 3.0, "{check:?}");
        assert!(check.exact.iter().any(|g| g.abs() > 1e-3));
    }

    #[test]
    fn estimator_check_deterministic_is_exact() {
        let mdp = build_mdp(&EnvSpec::chain(3).with_gamma(0.9)).unwrap();
        // saturated logits: π puts all but ~e^-80 mass on "right"
        let model = TabularModel::from_tables(
            3,
            2,
            &[-40.0, 40.0, -40.0, 40.0, -40.0, 40.0],
            &[0.3, 0.1, -0.2, 0.5, 0.0, 0.0],
        )
        .unwrap();
        let check = estimator_check_with(&mdp, &model, 3, 100, 0).unwrap();
        assert!(check.standard_error.iter().all(|&se| se == 0.0));
        assert_eq!(check.max_abs_z(), 0.0);
    }

    #[test]
    fn estimator_check_bellman_consistent_q_is_zero() {
        let mdp = two_state_stochastic();
        let logits = [0.4, -0.2, 0.1, 0.3];
        let pi = PolicyTable::from_policy(
            &ModelPolicy(&TabularModel::from_tables(2, 2, &logits, &[0.0; 4]).unwrap()),
            2,
        )
        .unwrap();
        let q = policy_evaluation_exact(&mdp, &pi).unwrap();
        let model = TabularModel::from_tables(2, 2, &logits, q.values()).unwrap();
        let check = estimator_check_with(&mdp, &model, 3, 1000, 2).unwrap();
        assert!(
            check.exact.iter().all(|g| g.abs() < 1e-8),
            "{:?}",
            check.exact
        );
        // single-sample coefficients vanish only in expectation here
        assert!(check.max_abs_z() <= 3.0);

        // on a deterministic MDP every sampled coefficient is zero
        let chain = build_mdp(&EnvSpec::chain(4).with_gamma(0.9)).unwrap();
        let logits = [0.4, -0.2, 0.1, 0.3, -0.5, 0.0, 0.0, 0.0];
        let pi = PolicyTable::from_policy(
            &ModelPolicy(&TabularModel::from_tables(4, 2, &logits, &[0.0; 8]).unwrap()),
            4,
        )
        .unwrap();
        let q = policy_evaluation_exact(&chain, &pi).unwrap();
        let model = TabularModel::from_tables(4, 2, &logits, q.values()).unwrap();
        let check = estimator_check_with(&chain, &model, 4, 1000, 2).unwrap();
        assert!(
            check.exact.iter().all(|g| g.abs() < 1e-8),
            "{:?}",
            check.exact
        );
        assert!(
            check.mean.iter().all(|g| g.abs() < 1e-12),
            "{:?}",
            check.mean
        );
    }

    #[test]
    fn return_substitution_on_deterministic_chain() {
        let mdp = build_mdp(&EnvSpec::chain(5).with_gamma(0.9)).unwrap();
        let right = PolicyTable::deterministic(2, &[1; 5]);
        let q = QTable::from_fn(5, 2, |s, a| (s as f64) * 0.1 - a as f64);
        let r = return_substitution_check(&mdp, &right, &q, 6).unwrap();
        assert!(r.deterministic && r.gap.abs() < 1e-8 && r.report().passed);
        assert!(r.lhs > 0.0);

        let exact = policy_evaluation_exact(&mdp, &right).unwrap();
        let r = return_substitution_check(&mdp, &right, &exact, 6).unwrap();
        assert!(r.lhs.abs() < 1e-20 && r.rhs.abs() < 1e-20, "{r:?}");
    }

    #[test]
    fn return_substitution_gap_is_return_variance_when_stochastic() {
        let mdp = build_mdp(&EnvSpec::gridworld(3, 3).with_slip(0.3).with_gamma(0.9)).unwrap();
        let pi =
            PolicyTable::new(9, 4, (0..9).flat_map(|_| [0.1, 0.4, 0.4, 0.1]).collect()).unwrap();
        let q = QTable::from_fn(9, 4, |s, a| ((s * 4 + a) as f64).sin());
        let r = return_substitution_check(&mdp, &pi, &q, 4).unwrap();
        assert!(!r.deterministic);
        assert!(r.gap > 1e-3);
        assert!((r.gap - r.return_variance).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn metrics_row_csv_round_trip() {
        let row = MetricsRow {
            step: 64,
            episodes_completed: 2,
            mean_return: 0.1 + 0.2,
            loss_value: -1e-300,
            saddle_objective: 3.5,
            fdiv_estimate: 0.0,
            policy_grad_norm: 1.0 / 3.0,
            q_grad_norm: 2.0,
            policy_entropy: 1.386,
            wall_clock_ms: 0,
        };
        assert_eq!(MetricsRow::from_csv(&row.to_csv()).unwrap(), row);
        assert_eq!(CSV_HEADER.split(',').count(), 10);
    }

    #[test]
    fn tail_selects_last_fraction() {
        let row = |step| MetricsRow {
            step,
            ..MetricsRow::from_csv("0,0,0,0,0,0,0,0,0,0").unwrap()
        };
        let log = TrainingLog {
            rows: (0..=10).map(|i| row(i * 10)).collect(),
            model: None,
        };
        assert_eq!(log.tail(0.1).len(), 2);
        assert_eq!(log.tail(0.2).first().unwrap().step, 80);
    }
}
