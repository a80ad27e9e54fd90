//! Exact finite-MDP machinery.
//!
//! Everything here is solved to machine precision so that the sampled
//! quantities in the rest of the crate have an exact reference: linear-system
//! policy evaluation, value iteration, greedy recovery, finite-horizon return
//! moments and exhaustive trajectory enumeration.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::policy::{argmax, Policy};

const ROW_TOLERANCE: f64 = 1e-12;

/// Upper bound on `(n_states · n_actions)^horizon` for exhaustive enumeration.
pub const ENUMERATION_GUARD: f64 = 1e7;

/// A finite discounted MDP with an initial distribution and terminal states.
///
/// Terminal states are absorbing with zero reward under every action.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    /// `P[s][a][s']`, flattened.
    transition: Vec<f64>,
    /// `r[s][a]`, flattened.
    reward: Vec<f64>,
    gamma: f64,
    rho0: Vec<f64>,
    terminal: Vec<bool>,
}

impl Mdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        rho0: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::argument(
                "an MDP needs at least one state and one action",
            ));
        }
        let sa = n_states * n_actions;
        if transition.len() != sa * n_states
            || reward.len() != sa
            || rho0.len() != n_states
            || terminal.len() != n_states
        {
            return Err(Error::argument(
                "MDP table shapes do not match n_states / n_actions",
            ));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::argument(format!("gamma {gamma} outside [0, 1)")));
        }
        if let Some(i) = reward.iter().position(|r| !r.is_finite()) {
            return Err(Error::argument(format!("reward entry {i} is not finite")));
        }
        for (row_idx, row) in transition.chunks(n_states).enumerate() {
            check_row(row).map_err(|m| {
                Error::argument(format!(
                    "P[{}][{}]: {m}",
                    row_idx / n_actions,
                    row_idx % n_actions
                ))
            })?;
        }
        check_row(&rho0).map_err(|m| Error::argument(format!("rho0: {m}")))?;
        for s in (0..n_states).filter(|&s| terminal[s]) {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row[s] != 1.0 || reward[s * n_actions + a] != 0.0 {
                    return Err(Error::argument(format!(
                        "terminal state {s} must self-loop with zero reward"
                    )));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            rho0,
            terminal,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    /// Next-state distribution `P[s][a][·]`.
    pub fn next_state_probs(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            gamma,
            self.rho0.clone(),
            self.terminal.clone(),
        )
    }

    /// Same dynamics with a different initial distribution.
    pub fn with_rho0(&self, rho0: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.gamma,
            rho0,
            self.terminal.clone(),
        )
    }

    /// Plain-text form: a `mdp n_states n_actions gamma` header, one
    /// `s a r p(s0) p(s1) ...` line per state-action pair, then a `rho0` line.
    pub fn to_text(&self) -> String {
        let mut out = format!("mdp {} {} {}\n", self.n_states, self.n_actions, self.gamma);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let _ = write!(out, "{s} {a} {}", self.reward(s, a));
                for p in self.next_state_probs(s, a) {
                    let _ = write!(out, " {p}");
                }
                out.push('\n');
            }
        }
        out.push_str("rho0");
        for p in &self.rho0 {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
        out
    }

    /// Parses [`Mdp::to_text`] output. The `rho0` line is optional (default:
    /// all mass on state 0). States whose every action self-loops with zero
    /// reward are marked terminal.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let parse_err = |line: usize, message: String| Error::Parse { line, message };

        let (hline, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing `mdp` header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "mdp" {
            return Err(parse_err(
                hline,
                "expected `mdp n_states n_actions gamma`".into(),
            ));
        }
        let n_states: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(hline, format!("n_states: {e}")))?;
        let n_actions: usize = fields[2]
            .parse()
            .map_err(|e| parse_err(hline, format!("n_actions: {e}")))?;
        let gamma: f64 = fields[3]
            .parse()
            .map_err(|e| parse_err(hline, format!("gamma: {e}")))?;
        if n_states == 0 || n_actions == 0 {
            return Err(parse_err(hline, "sizes must be positive".into()));
        }

        let sa = n_states * n_actions;
        let mut transition = vec![0.0; sa * n_states];
        let mut reward = vec![0.0; sa];
        let mut seen = vec![false; sa];
        let mut rho0 = None;
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "rho0" {
                let v = fields[1..]
                    .iter()
                    .map(|f| {
                        f.parse::<f64>()
                            .map_err(|e| parse_err(ln, format!("rho0: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if v.len() != n_states {
                    return Err(parse_err(ln, format!("rho0 needs {n_states} entries")));
                }
                rho0 = Some(v);
                continue;
            }
            if fields.len() != 3 + n_states {
                return Err(parse_err(
                    ln,
                    format!("expected `s a r` and {n_states} probabilities"),
                ));
            }
            let s: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(ln, format!("state: {e}")))?;
            let a: usize = fields[1]
                .parse()
                .map_err(|e| parse_err(ln, format!("action: {e}")))?;
            if s >= n_states || a >= n_actions {
                return Err(parse_err(ln, format!("pair ({s}, {a}) out of range")));
            }
            let idx = s * n_actions + a;
            if seen[idx] {
                return Err(parse_err(ln, format!("pair ({s}, {a}) given twice")));
            }
            seen[idx] = true;
            reward[idx] = fields[2]
                .parse()
                .map_err(|e| parse_err(ln, format!("reward: {e}")))?;
            for (sp, f) in fields[3..].iter().enumerate() {
                transition[idx * n_states + sp] = f
                    .parse()
                    .map_err(|e| parse_err(ln, format!("probability: {e}")))?;
            }
        }
        if let Some(idx) = seen.iter().position(|s| !s) {
            return Err(parse_err(
                hline,
                format!(
                    "missing line for pair ({}, {})",
                    idx / n_actions,
                    idx % n_actions
                ),
            ));
        }
        let rho0 = rho0.unwrap_or_else(|| {
            let mut v = vec![0.0; n_states];
            v[0] = 1.0;
            v
        });
        let terminal = (0..n_states)
            .map(|s| {
                (0..n_actions).all(|a| {
                    let idx = s * n_actions + a;
                    reward[idx] == 0.0 && transition[idx * n_states + s] == 1.0
                })
            })
            .collect();
        Self::new(
            n_states, n_actions, transition, reward, gamma, rho0, terminal,
        )
    }
}

fn check_row(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("negative or non-finite probability".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

/// Tabular stochastic policy `π[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::argument("policy table shape mismatch"));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_row(row).map_err(|m| Error::argument(format!("policy row {s}: {m}")))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Probability one on `actions[s]` at each state.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    /// Tabulates any policy over `n_states` states.
    pub fn from_policy(policy: &dyn Policy, n_states: usize) -> Result<Self> {
        let n_actions = policy.n_actions();
        let probs = (0..n_states).flat_map(|s| policy.probs(s)).collect();
        Self::new(n_states, n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..][..self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }
}

impl Policy for PolicyTable {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn probs(&self, state: usize) -> Vec<f64> {
        self.row(state).to_vec()
    }
}

/// Tabular action values `Q[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::argument("Q table shape mismatch"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("Q table has non-finite entries"));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_fn(n_states: usize, n_actions: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..n_states)
            .flat_map(|s| (0..n_actions).map(move |a| (s, a)))
            .map(|(s, a)| f(s, a))
            .collect();
        Self {
            n_states,
            n_actions,
            values,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..][..self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `Σ_a π(a|s) Q(s, a)`.
    pub fn state_value(&self, s: usize, probs: &[f64]) -> f64 {
        self.row(s).iter().zip(probs).map(|(q, p)| q * p).sum()
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn check_shapes(mdp: &Mdp, n_states: usize, n_actions: usize) -> Result<()> {
    if n_states != mdp.n_states || n_actions != mdp.n_actions {
        return Err(Error::argument(format!(
            "table is {n_states}x{n_actions} but the MDP is {}x{}",
            mdp.n_states, mdp.n_actions
        )));
    }
    Ok(())
}

/// `Q^π` as the solution of `(I − γ P^π) V = r^π`, then `Q = r + γ P V`.
pub fn policy_evaluation_exact(mdp: &Mdp, pi: &PolicyTable) -> Result<QTable> {
    check_shapes(mdp, pi.n_states, pi.n_actions)?;
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let mut system = DMatrix::<f64>::identity(ns, ns);
    let mut rhs = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            rhs[s] += w * mdp.reward(s, a);
            for (sp, &p) in mdp.next_state_probs(s, a).iter().enumerate() {
                system[(s, sp)] -= g * w * p;
            }
        }
    }
    let v = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Internal("singular policy-evaluation system".into()))?;
    Ok(QTable::from_fn(ns, na, |s, a| {
        mdp.reward(s, a)
            + g * mdp
                .next_state_probs(s, a)
                .iter()
                .zip(v.iter())
                .map(|(p, v)| p * v)
                .sum::<f64>()
    }))
}

/// Bellman expectation operator `(T^π Q)(s,a) = r + γ E_{s'} Σ_a' π(a'|s') Q(s',a')`.
pub fn bellman_expectation(mdp: &Mdp, pi: &PolicyTable, q: &QTable) -> QTable {
    let v: Vec<f64> = (0..mdp.n_states)
        .map(|s| q.state_value(s, pi.row(s)))
        .collect();
    backup(mdp, &v)
}

/// Bellman optimality operator `(T Q)(s,a) = r + γ E_{s'} max_a' Q(s',a')`.
pub fn bellman_optimality(mdp: &Mdp, q: &QTable) -> QTable {
    let v: Vec<f64> = (0..mdp.n_states)
        .map(|s| q.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    backup(mdp, &v)
}

fn backup(mdp: &Mdp, v: &[f64]) -> QTable {
    QTable::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        mdp.reward(s, a)
            + mdp.gamma
                * mdp
                    .next_state_probs(s, a)
                    .iter()
                    .zip(v)
                    .map(|(p, v)| p * v)
                    .sum::<f64>()
    })
}

#[derive(Debug, Clone)]
pub struct ValueIterationReport {
    pub q: QTable,
    pub iterations: usize,
    /// `‖Q_{k+1} − Q_k‖_∞` per sweep.
    pub residuals: Vec<f64>,
}

/// Iterates the optimality operator from zero until successive iterates are
/// within `tol`; the returned table then has Bellman residual at most `γ·tol`.
pub fn value_iteration(mdp: &Mdp, tol: f64) -> Result<ValueIterationReport> {
    if !(tol > 0.0) {
        return Err(Error::argument(format!("tolerance {tol} must be positive")));
    }
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut residuals = Vec::new();
    loop {
        let next = bellman_optimality(mdp, &q);
        let delta = next.max_abs_diff(&q);
        residuals.push(delta);
        q = next;
        if delta <= tol {
            break;
        }
        if residuals.len() > 1_000_000 {
            return Err(Error::Internal("value iteration did not converge".into()));
        }
    }
    Ok(ValueIterationReport {
        q,
        iterations: residuals.len(),
        residuals,
    })
}

/// Deterministic argmax policy, lowest action index on ties.
pub fn greedy_policy(q: &QTable) -> PolicyTable {
    let actions: Vec<usize> = (0..q.n_states).map(|s| argmax(q.row(s))).collect();
    PolicyTable::deterministic(q.n_actions, &actions)
}

/// Max over `(s, a)` of the gap between the expectation backup under
/// `policy` and the optimality backup of `q`.
pub fn expectation_vs_max_residual(mdp: &Mdp, q: &QTable, policy: &PolicyTable) -> Result<f64> {
    check_shapes(mdp, q.n_states, q.n_actions)?;
    check_shapes(mdp, policy.n_states, policy.n_actions)?;
    Ok(bellman_expectation(mdp, policy, q).max_abs_diff(&bellman_optimality(mdp, q)))
}

/// The expectation backup under `greedy(q)` against the optimality backup of
/// `q`. Zero for every table: an argmax-concentrated expectation is a max.
pub fn bellman_consistency_residual(mdp: &Mdp, q: &QTable) -> Result<f64> {
    expectation_vs_max_residual(mdp, q, &greedy_policy(q))
}

/// `Q_k` for `k = 0..=horizon` remaining steps under `pi`; `Q_0 = 0`.
pub fn finite_horizon_q(mdp: &Mdp, pi: &PolicyTable, horizon: usize) -> Result<Vec<QTable>> {
    check_shapes(mdp, pi.n_states, pi.n_actions)?;
    let mut tables = vec![QTable::zeros(mdp.n_states, mdp.n_actions)];
    for _ in 0..horizon {
        let prev = tables.last().unwrap();
        let v: Vec<f64> = (0..mdp.n_states)
            .map(|s| {
                if mdp.terminal[s] {
                    0.0
                } else {
                    prev.state_value(s, pi.row(s))
                }
            })
            .collect();
        tables.push(backup(mdp, &v));
    }
    Ok(tables)
}

/// Conditional return variances `Var[G_k | s, a]` for `k = 0..=horizon`
/// remaining steps, from the second-moment recursion
/// `M_k = r² + 2γ r E[V_{k−1}(s')] + γ² E[W_{k−1}(s')]`.
pub fn finite_horizon_return_variance(
    mdp: &Mdp,
    pi: &PolicyTable,
    horizon: usize,
) -> Result<Vec<QTable>> {
    let first = finite_horizon_q(mdp, pi, horizon)?;
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let mut second = vec![QTable::zeros(ns, na)];
    for k in 1..=horizon {
        let (q_prev, m_prev) = (&first[k - 1], &second[k - 1]);
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                if mdp.terminal[s] {
                    0.0
                } else {
                    q_prev.state_value(s, pi.row(s))
                }
            })
            .collect();
        let w: Vec<f64> = (0..ns)
            .map(|s| {
                if mdp.terminal[s] {
                    0.0
                } else {
                    m_prev.state_value(s, pi.row(s))
                }
            })
            .collect();
        let m = QTable::from_fn(ns, na, |s, a| {
            let r = mdp.reward(s, a);
            let probs = mdp.next_state_probs(s, a);
            let ev: f64 = probs.iter().zip(&v).map(|(p, x)| p * x).sum();
            let ew: f64 = probs.iter().zip(&w).map(|(p, x)| p * x).sum();
            r * r + 2.0 * g * r * ev + g * g * ew
        });
        second.push(m);
    }
    Ok(first
        .iter()
        .zip(&second)
        .map(|(q, m)| QTable::from_fn(ns, na, |s, a| (m.get(s, a) - q.get(s, a).powi(2)).max(0.0)))
        .collect())
}

/// One step of an enumerated trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedTrajectory {
    pub steps: Vec<Step>,
    pub probability: f64,
    /// `Σ_t γ^t r_t` over the (possibly terminated early) trajectory.
    pub discounted_return: f64,
}

/// All trajectories of at most `horizon` steps from `rho0` under `pi`, with
/// their probabilities. Trajectories stop early on reaching a terminal state.
pub fn enumerate_trajectories(
    mdp: &Mdp,
    pi: &PolicyTable,
    horizon: usize,
) -> Result<Vec<EnumeratedTrajectory>> {
    check_shapes(mdp, pi.n_states, pi.n_actions)?;
    if horizon == 0 {
        return Err(Error::argument("horizon must be positive"));
    }
    let branching = (mdp.n_states * mdp.n_actions) as f64;
    if branching.powi(horizon as i32) > ENUMERATION_GUARD {
        return Err(Error::Size(format!(
            "({}·{})^{horizon} exceeds the enumeration guard of {ENUMERATION_GUARD}",
            mdp.n_states, mdp.n_actions
        )));
    }
    let mut out = Vec::new();
    let mut stack = Vec::with_capacity(horizon);
    for (s0, &p0) in mdp.rho0.iter().enumerate() {
        if p0 > 0.0 {
            extend(mdp, pi, horizon, s0, p0, &mut stack, &mut out);
        }
    }
    Ok(out)
}

fn extend(
    mdp: &Mdp,
    pi: &PolicyTable,
    horizon: usize,
    state: usize,
    prob: f64,
    stack: &mut Vec<Step>,
    out: &mut Vec<EnumeratedTrajectory>,
) {
    if stack.len() == horizon || mdp.terminal[state] {
        let discounted_return = stack
            .iter()
            .rev()
            .fold(0.0, |acc, st| st.reward + mdp.gamma * acc);
        out.push(EnumeratedTrajectory {
            steps: stack.clone(),
            probability: prob,
            discounted_return,
        });
        return;
    }
    for a in 0..mdp.n_actions {
        let pa = pi.prob(state, a);
        if pa == 0.0 {
            continue;
        }
        for (sp, &ps) in mdp.next_state_probs(state, a).iter().enumerate() {
            if ps == 0.0 {
                continue;
            }
            stack.push(Step {
                state,
                action: a,
                reward: mdp.reward(state, a),
                next_state: sp,
            });
            extend(mdp, pi, horizon, sp, prob * pa * ps, stack, out);
            stack.pop();
        }
    }
}

/// Long-run fraction of transitions taken from each state by a process that
/// runs episodes from `rho0` under `pi`, each ending at a terminal state or
/// after `max_steps` transitions, and immediately resets.
pub fn episodic_occupancy(mdp: &Mdp, pi: &PolicyTable, max_steps: usize) -> Result<Vec<f64>> {
    check_shapes(mdp, pi.n_states, pi.n_actions)?;
    let ns = mdp.n_states;
    let mut visits = vec![0.0; ns];
    let mut dist: Vec<f64> = (0..ns)
        .map(|s| if mdp.terminal[s] { 0.0 } else { mdp.rho0[s] })
        .collect();
    for _ in 0..max_steps {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if dist[s] == 0.0 {
                continue;
            }
            visits[s] += dist[s];
            for a in 0..mdp.n_actions {
                let w = dist[s] * pi.prob(s, a);
                for (sp, &p) in mdp.next_state_probs(s, a).iter().enumerate() {
                    next[sp] += w * p;
                }
            }
        }
        for (s, d) in next.iter_mut().enumerate() {
            if mdp.terminal[s] {
                *d = 0.0;
            }
        }
        dist = next;
    }
    let total: f64 = visits.iter().sum();
    if total == 0.0 {
        return Err(Error::argument(
            "episodes never leave a terminal start state",
        ));
    }
    Ok(visits.into_iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(r: f64, gamma: f64) -> Mdp {
        Mdp::new(1, 1, vec![1.0], vec![r], gamma, vec![1.0], vec![false]).unwrap()
    }

    /// Two states; state 1 is absorbing and pays 1 per step.
    fn two_state_chain(gamma: f64) -> Mdp {
        // action 0 stays, action 1 moves right
        let transition = vec![
            1.0, 0.0, // s0 a0
            0.0, 1.0, // s0 a1
            0.0, 1.0, // s1 a0
            0.0, 1.0, // s1 a1
        ];
        let reward = vec![0.0, 0.0, 1.0, 1.0];
        Mdp::new(
            2,
            2,
            transition,
            reward,
            gamma,
            vec![1.0, 0.0],
            vec![false, false],
        )
        .unwrap()
    }

    /// 3x3 grid, goal in the far corner (terminal), reward 1 on entry.
    fn grid3(gamma: f64) -> Mdp {
        let (w, h) = (3usize, 3usize);
        let n = w * h;
        let goal = n - 1;
        let moves = [(0i32, -1i32), (1, 0), (0, 1), (-1, 0)];
        let mut transition = vec![0.0; n * 4 * n];
        let mut reward = vec![0.0; n * 4];
        for s in 0..n {
            for (a, (dx, dy)) in moves.iter().enumerate() {
                let sp = if s == goal {
                    s
                } else {
                    let (x, y) = ((s % w) as i32 + dx, (s / w) as i32 + dy);
                    if x < 0 || y < 0 || x >= w as i32 || y >= h as i32 {
                        s
                    } else {
                        y as usize * w + x as usize
                    }
                };
                transition[(s * 4 + a) * n + sp] = 1.0;
                if sp == goal && s != goal {
                    reward[s * 4 + a] = 1.0;
                }
            }
        }
        let mut rho0 = vec![0.0; n];
        rho0[0] = 1.0;
        let mut terminal = vec![false; n];
        terminal[goal] = true;
        Mdp::new(n, 4, transition, reward, gamma, rho0, terminal).unwrap()
    }

    fn max_bellman_residual(mdp: &Mdp, pi: &PolicyTable, q: &QTable) -> f64 {
        bellman_expectation(mdp, pi, q).max_abs_diff(q)
    }

    #[test]
    fn geometric_series() {
        let mdp = single_state(1.0, 0.9);
        let q = policy_evaluation_exact(&mdp, &PolicyTable::uniform(1, 1)).unwrap();
        assert!((q.get(0, 0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_gives_rewards() {
        let mdp = two_state_chain(0.0);
        let q = policy_evaluation_exact(&mdp, &PolicyTable::uniform(2, 2)).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert_eq!(q.get(s, a), mdp.reward(s, a));
            }
        }
        let vi = value_iteration(&mdp, 1e-12).unwrap();
        assert_eq!(vi.q, q);
    }

    #[test]
    fn two_state_chain_against_power_iteration() {
        let mdp = two_state_chain(0.5);
        let pi = PolicyTable::uniform(2, 2);
        let exact = policy_evaluation_exact(&mdp, &pi).unwrap();
        // independent oracle: iterate the expectation operator to a fixed point
        let mut q = QTable::zeros(2, 2);
        for _ in 0..200 {
            q = bellman_expectation(&mdp, &pi, &q);
        }
        assert!(exact.max_abs_diff(&q) < 1e-12);
        assert!(max_bellman_residual(&mdp, &pi, &exact) < 1e-10);
        // hand check: V1 = 2, V0 = 0.5(0.5 V0) + 0.5(0.5 V1) -> V0 = 2/3
        assert!((exact.get(1, 0) - 2.0).abs() < 1e-12);
        assert!((exact.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((exact.get(0, 0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn q_is_bounded_by_reward_scale() {
        let mdp = grid3(0.9);
        let q = policy_evaluation_exact(&mdp, &PolicyTable::uniform(9, 4)).unwrap();
        let bound = mdp.max_abs_reward() / (1.0 - mdp.gamma()) + 1e-9;
        assert!(q.values().iter().all(|v| v.abs() <= bound));
    }

    /// Breadth-first distance to the goal from every cell.
    fn bfs_distances(mdp: &Mdp, goal: usize) -> Vec<usize> {
        let n = mdp.n_states();
        let mut dist = vec![usize::MAX; n];
        dist[goal] = 0;
        let mut frontier = vec![goal];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for s in 0..n {
                if dist[s] != usize::MAX {
                    continue;
                }
                for a in 0..mdp.n_actions() {
                    let sp = mdp
                        .next_state_probs(s, a)
                        .iter()
                        .position(|&p| p == 1.0)
                        .unwrap();
                    if frontier.contains(&sp) {
                        dist[s] = dist[sp] + 1;
                        next.push(s);
                        break;
                    }
                }
            }
            frontier = next;
        }
        dist
    }

    #[test]
    fn grid_value_iteration_matches_shortest_paths() {
        let mdp = grid3(0.9);
        let dist = bfs_distances(&mdp, 8);
        let vi = value_iteration(&mdp, 1e-12).unwrap();
        for s in 0..8 {
            for a in 0..4 {
                let sp = mdp
                    .next_state_probs(s, a)
                    .iter()
                    .position(|&p| p == 1.0)
                    .unwrap();
                let expected = 0.9f64.powi(dist[sp] as i32);
                assert!((vi.q.get(s, a) - expected).abs() < 1e-10, "s={s} a={a}");
            }
        }
        let greedy = greedy_policy(&vi.q);
        for s in 0..8 {
            let a = (0..4).find(|&a| greedy.prob(s, a) == 1.0).unwrap();
            let sp = mdp
                .next_state_probs(s, a)
                .iter()
                .position(|&p| p == 1.0)
                .unwrap();
            assert_eq!(
                dist[sp] + 1,
                dist[s],
                "greedy action at {s} is not on a shortest path"
            );
        }
    }

    #[test]
    fn bandit_fixed_point() {
        let mdp = Mdp::new(
            1,
            2,
            vec![1.0, 1.0],
            vec![1.0, 2.0],
            0.5,
            vec![1.0],
            vec![false],
        )
        .unwrap();
        let vi = value_iteration(&mdp, 1e-13).unwrap();
        // Q(a) = r(a) + γ·max Q = r(a) + 0.5·4
        assert!((vi.q.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((vi.q.get(0, 1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn value_iteration_contracts() {
        let mdp = grid3(0.9);
        let vi = value_iteration(&mdp, 1e-10).unwrap();
        for w in vi.residuals.windows(2) {
            assert!(w[1] <= 0.9 * w[0] + 1e-12);
        }
        assert!(bellman_optimality(&mdp, &vi.q).max_abs_diff(&vi.q) <= 1e-10);
        assert!(matches!(
            value_iteration(&mdp, 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn greedy_tie_break() {
        let q = QTable::new(2, 2, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        let g = greedy_policy(&q);
        assert_eq!(g.row(0), &[1.0, 0.0]);
        assert_eq!(g.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn consistency_residual() {
        let mdp = grid3(0.9);
        let q_star = value_iteration(&mdp, 1e-10).unwrap().q;
        assert!(bellman_consistency_residual(&mdp, &q_star).unwrap() <= 1e-12);
        let uniform = PolicyTable::uniform(9, 4);
        assert!(expectation_vs_max_residual(&mdp, &q_star, &uniform).unwrap() > 1e-3);
        let wrong = QTable::zeros(4, 4);
        assert!(matches!(
            bellman_consistency_residual(&mdp, &wrong),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn policy_improvement_is_monotone() {
        let mdp = grid3(0.9);
        let pi = PolicyTable::uniform(9, 4);
        let q = policy_evaluation_exact(&mdp, &pi).unwrap();
        let improved = greedy_policy(&q);
        let q2 = policy_evaluation_exact(&mdp, &improved).unwrap();
        for s in 0..9 {
            assert!(q2.state_value(s, improved.row(s)) >= q.state_value(s, pi.row(s)) - 1e-10);
        }
    }

    #[test]
    fn enumeration_examples() {
        let mdp = grid3(0.9);
        let det = PolicyTable::deterministic(4, &[1; 9]);
        let trajs = enumerate_trajectories(&mdp, &det, 1).unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].probability, 1.0);

        let chain = two_state_chain(0.9);
        let trajs = enumerate_trajectories(&chain, &PolicyTable::uniform(2, 2), 2).unwrap();
        assert_eq!(trajs.len(), 4);
        assert!((trajs.iter().map(|t| t.probability).sum::<f64>() - 1.0).abs() < 1e-10);

        let big = grid3(0.9);
        assert!(matches!(
            enumerate_trajectories(&big, &PolicyTable::uniform(9, 4), 5),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn enumerated_return_matches_truncated_evaluation() {
        let mdp = grid3(0.9);
        let pi = PolicyTable::uniform(9, 4);
        let h = 4;
        let trajs = enumerate_trajectories(&mdp, &pi, h).unwrap();
        let expected: f64 = trajs
            .iter()
            .map(|t| t.probability * t.discounted_return)
            .sum();
        let finite = finite_horizon_q(&mdp, &pi, h).unwrap();
        assert!((expected - finite[h].state_value(0, pi.row(0))).abs() < 1e-12);
        let infinite = policy_evaluation_exact(&mdp, &pi)
            .unwrap()
            .state_value(0, pi.row(0));
        let slack = 0.9f64.powi(h as i32) * mdp.max_abs_reward() / 0.1;
        assert!((expected - infinite).abs() <= slack);
    }

    #[test]
    fn return_variance_vanishes_when_deterministic() {
        let mdp = grid3(0.9);
        let det = PolicyTable::deterministic(4, &[1, 1, 2, 1, 1, 2, 1, 1, 0]);
        let var = finite_horizon_return_variance(&mdp, &det, 6).unwrap();
        assert!(var
            .iter()
            .all(|t| t.values().iter().all(|&v| v.abs() < 1e-12)));
    }

    #[test]
    fn return_variance_matches_enumeration() {
        let mdp = two_state_chain(0.8);
        let pi = PolicyTable::new(2, 2, vec![0.3, 0.7, 0.5, 0.5]).unwrap();
        let h = 3;
        let var = finite_horizon_return_variance(&mdp, &pi, h).unwrap();
        let trajs = enumerate_trajectories(&mdp, &pi, h).unwrap();
        for a0 in 0..2 {
            let group: Vec<_> = trajs.iter().filter(|t| t.steps[0].action == a0).collect();
            let mass: f64 = group.iter().map(|t| t.probability).sum();
            let m1: f64 = group
                .iter()
                .map(|t| t.probability * t.discounted_return)
                .sum::<f64>()
                / mass;
            let m2: f64 = group
                .iter()
                .map(|t| t.probability * t.discounted_return.powi(2))
                .sum::<f64>()
                / mass;
            assert!((m2 - m1 * m1 - var[h].get(0, a0)).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let mdp = grid3(0.9);
        let parsed = Mdp::from_text(&mdp.to_text()).unwrap();
        assert_eq!(parsed, mdp);
        let err = Mdp::from_text("mdp 1 1 0.5\n0 0 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn validation() {
        assert!(Mdp::new(1, 1, vec![0.5], vec![0.0], 0.9, vec![1.0], vec![false]).is_err());
        assert!(Mdp::new(1, 1, vec![1.0], vec![0.0], 1.0, vec![1.0], vec![false]).is_err());
        assert!(Mdp::new(1, 1, vec![1.0], vec![1.0], 0.5, vec![1.0], vec![true]).is_err());
    }

    #[test]
    fn occupancy_is_normalized() {
        let mdp = grid3(0.9);
        let occ = episodic_occupancy(&mdp, &PolicyTable::uniform(9, 4), 20).unwrap();
        assert!((occ.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(occ[8], 0.0);
    }
}
