//! Policy/Q networks with hand-written backpropagation.
//!
//! Two parameterizations share one interface, [`ActorCritic`]:
//!
//! - [`Mlp`]: one-hot state input, a ReLU trunk, and two linear heads on the
//!   last hidden layer (softmax policy logits and per-action Q values).
//! - [`TabularModel`]: a logit table and a Q table.
//!
//! Parameters live in one flat `Vec<f64>`; gradients use the same layout.

use std::cell::RefCell;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::policy::Policy;

/// Lower bound applied to softmax outputs.
pub const PROB_FLOOR: f64 = 1e-30;

/// Softmax with max-shift and a probability floor.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = p.iter().sum();
    let mut floored = false;
    for x in p.iter_mut() {
        *x /= z;
        if *x < PROB_FLOOR {
            *x = PROB_FLOOR;
            floored = true;
        }
    }
    if floored {
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
    }
    p
}

/// Output of a forward pass plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub state: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub q: Vec<f64>,
    /// Post-activation output of each hidden layer.
    activations: Vec<Vec<f64>>,
}

impl Forward {
    /// `d log π(a|s) / d logits = onehot(a) − π(·|s)`.
    pub fn log_prob_grad(&self, action: usize) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        g[action] += 1.0;
        g
    }

    pub fn state_value(&self) -> f64 {
        self.probs.iter().zip(&self.q).map(|(p, q)| p * q).sum()
    }
}

/// Flat gradient buffer with the layout of the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator(Vec<f64>);

impl GradAccumulator {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|g| *g *= k);
    }

    pub fn add_scaled(&mut self, other: &GradAccumulator, k: f64) {
        self.0
            .iter_mut()
            .zip(&other.0)
            .for_each(|(a, b)| *a += k * b);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A joint policy / action-value function over a discrete state space.
pub trait ActorCritic {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, state: usize) -> Result<Forward>;

    /// Accumulates into `grad` the parameter gradient of a scalar loss whose
    /// gradients w.r.t. the policy logits and the Q head are `d_logits` and
    /// `d_q`.
    fn backward(
        &self,
        fwd: &Forward,
        d_logits: &[f64],
        d_q: &[f64],
        grad: &mut GradAccumulator,
    ) -> Result<()>;

    fn n_params(&self) -> usize {
        self.params().len()
    }

    fn zero_grad(&self) -> GradAccumulator {
        GradAccumulator::zeros(self.n_params())
    }
}

fn check_finite(what: &str, state: usize, v: &[f64]) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::numeric(format!(
            "{what}[{i}] = {} at state {state}",
            v[i]
        )));
    }
    Ok(())
}

fn check_backward_shapes(
    n_actions: usize,
    d_logits: &[f64],
    d_q: &[f64],
    grad: &GradAccumulator,
    n_params: usize,
) -> Result<()> {
    if d_logits.len() != n_actions || d_q.len() != n_actions || grad.len() != n_params {
        return Err(Error::argument(format!(
            "backward shapes: d_logits {}, d_q {}, grad {} (expected {n_actions}, {n_actions}, {n_params})",
            d_logits.len(),
            d_q.len(),
            grad.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn end(&self) -> usize {
        self.b + self.n_out
    }
}

/// Shared-trunk MLP over one-hot state inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    n_states: usize,
    n_actions: usize,
    hidden: Vec<usize>,
    trunk: Vec<Dense>,
    policy_head: Dense,
    q_head: Dense,
    params: Vec<f64>,
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(n_states: usize, hidden: &[usize], n_actions: usize) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || hidden.contains(&0) {
            return Err(Error::argument("layer sizes must be positive"));
        }
        let mut offset = 0;
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense {
                w: offset,
                b: offset + n_in * n_out,
                n_in,
                n_out,
            };
            offset = d.end();
            d
        };
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut width = n_states;
        for &h in hidden {
            trunk.push(dense(width, h));
            width = h;
        }
        let policy_head = dense(width, n_actions);
        let q_head = dense(width, n_actions);
        Ok(Self {
            n_states,
            n_actions,
            hidden: hidden.to_vec(),
            trunk,
            policy_head,
            q_head,
            params: vec![0.0; offset],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(
        n_states: usize,
        hidden: &[usize],
        n_actions: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(n_states, hidden, n_actions)?;
        let layers: Vec<Dense> = mlp
            .trunk
            .iter()
            .chain([&mlp.policy_head, &mlp.q_head])
            .copied()
            .collect();
        for d in layers {
            let bound = (6.0 / (d.n_in + d.n_out) as f64).sqrt();
            for w in &mut mlp.params[d.w..d.b] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// Parameter index ranges of the policy head and the Q head.
    pub fn head_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (
            self.policy_head.w..self.policy_head.end(),
            self.q_head.w..self.q_head.end(),
        )
    }

    fn head(&self, d: &Dense, input: &[f64]) -> Vec<f64> {
        let w = &self.params[d.w..d.b];
        let b = &self.params[d.b..d.end()];
        (0..d.n_out)
            .map(|o| {
                b[o] + w[o * d.n_in..][..d.n_in]
                    .iter()
                    .zip(input)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
            })
            .collect()
    }

    fn head_one_hot(&self, d: &Dense, state: usize) -> Vec<f64> {
        (0..d.n_out)
            .map(|o| self.params[d.b + o] + self.params[d.w + o * d.n_in + state])
            .collect()
    }
}

impl ActorCritic for Mlp {
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, state: usize) -> Result<Forward> {
        if state >= self.n_states {
            return Err(Error::argument(format!("state {state} out of range")));
        }
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.trunk.len());
        for (i, d) in self.trunk.iter().enumerate() {
            let pre = if i == 0 {
                self.head_one_hot(d, state)
            } else {
                self.head(d, &activations[i - 1])
            };
            check_finite("hidden pre-activation", state, &pre)?;
            let post: Vec<f64> = pre.into_iter().map(|x| x.max(0.0)).collect();
            activations.push(post);
        }
        let (logits, q) = match activations.last() {
            Some(h) => (self.head(&self.policy_head, h), self.head(&self.q_head, h)),
            None => (
                self.head_one_hot(&self.policy_head, state),
                self.head_one_hot(&self.q_head, state),
            ),
        };
        check_finite("logits", state, &logits)?;
        check_finite("q", state, &q)?;
        let probs = softmax(&logits);
        Ok(Forward {
            state,
            logits,
            probs,
            q,
            activations,
        })
    }

    fn backward(
        &self,
        fwd: &Forward,
        d_logits: &[f64],
        d_q: &[f64],
        grad: &mut GradAccumulator,
    ) -> Result<()> {
        check_backward_shapes(self.n_actions, d_logits, d_q, grad, self.params.len())?;
        let g = grad.as_mut_slice();
        let last = fwd.activations.last();
        let width = last.map_or(self.n_states, |h| h.len());
        let mut d_h = vec![0.0; width];
        for (d, upstream) in [(&self.policy_head, d_logits), (&self.q_head, d_q)] {
            for (o, &u) in upstream.iter().enumerate() {
                if u == 0.0 {
                    continue;
                }
                g[d.b + o] += u;
                let row = d.w + o * d.n_in;
                match last {
                    Some(h) => {
                        for j in 0..d.n_in {
                            g[row + j] += u * h[j];
                            d_h[j] += u * self.params[row + j];
                        }
                    }
                    None => g[row + fwd.state] += u,
                }
            }
        }
        for i in (0..self.trunk.len()).rev() {
            let d = &self.trunk[i];
            let post = &fwd.activations[i];
            let d_pre: Vec<f64> = d_h
                .iter()
                .zip(post)
                .map(|(g, &h)| if h > 0.0 { *g } else { 0.0 })
                .collect();
            let mut d_in = if i > 0 { vec![0.0; d.n_in] } else { Vec::new() };
            for (o, &u) in d_pre.iter().enumerate() {
                if u == 0.0 {
                    continue;
                }
                g[d.b + o] += u;
                let row = d.w + o * d.n_in;
                if i == 0 {
                    g[row + fwd.state] += u;
                } else {
                    let input = &fwd.activations[i - 1];
                    for k in 0..d.n_in {
                        g[row + k] += u * input[k];
                        d_in[k] += u * self.params[row + k];
                    }
                }
            }
            d_h = d_in;
        }
        Ok(())
    }
}

/// Logit table and Q table, `[logits (S×A) | q (S×A)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    n_states: usize,
    n_actions: usize,
    params: Vec<f64>,
}

impl TabularModel {
    pub fn zeros(n_states: usize, n_actions: usize) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::argument("table sizes must be positive"));
        }
        Ok(Self {
            n_states,
            n_actions,
            params: vec![0.0; 2 * n_states * n_actions],
        })
    }

    pub fn from_tables(
        n_states: usize,
        n_actions: usize,
        logits: &[f64],
        q: &[f64],
    ) -> Result<Self> {
        let sa = n_states * n_actions;
        if logits.len() != sa || q.len() != sa {
            return Err(Error::argument("table sizes do not match"));
        }
        let mut m = Self::zeros(n_states, n_actions)?;
        m.params[..sa].copy_from_slice(logits);
        m.params[sa..].copy_from_slice(q);
        Ok(m)
    }

    pub fn logit_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn q_index(&self, s: usize, a: usize) -> usize {
        self.n_states * self.n_actions + s * self.n_actions + a
    }
}

impl ActorCritic for TabularModel {
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, state: usize) -> Result<Forward> {
        if state >= self.n_states {
            return Err(Error::argument(format!("state {state} out of range")));
        }
        let logits = self.params[self.logit_index(state, 0)..][..self.n_actions].to_vec();
        let q = self.params[self.q_index(state, 0)..][..self.n_actions].to_vec();
        check_finite("logits", state, &logits)?;
        check_finite("q", state, &q)?;
        let probs = softmax(&logits);
        Ok(Forward {
            state,
            logits,
            probs,
            q,
            activations: Vec::new(),
        })
    }

    fn backward(
        &self,
        fwd: &Forward,
        d_logits: &[f64],
        d_q: &[f64],
        grad: &mut GradAccumulator,
    ) -> Result<()> {
        check_backward_shapes(self.n_actions, d_logits, d_q, grad, self.params.len())?;
        let (li, qi) = (self.logit_index(fwd.state, 0), self.q_index(fwd.state, 0));
        let g = grad.as_mut_slice();
        for a in 0..self.n_actions {
            g[li + a] += d_logits[a];
            g[qi + a] += d_q[a];
        }
        Ok(())
    }
}

/// Either parameterization, for code that picks one at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mlp(Mlp),
    Tabular(TabularModel),
}

impl ActorCritic for Model {
    fn n_states(&self) -> usize {
        match self {
            Model::Mlp(m) => m.n_states(),
            Model::Tabular(m) => m.n_states(),
        }
    }

    fn n_actions(&self) -> usize {
        match self {
            Model::Mlp(m) => m.n_actions(),
            Model::Tabular(m) => m.n_actions(),
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            Model::Mlp(m) => m.params(),
            Model::Tabular(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Model::Mlp(m) => m.params_mut(),
            Model::Tabular(m) => m.params_mut(),
        }
    }

    fn forward(&self, state: usize) -> Result<Forward> {
        match self {
            Model::Mlp(m) => m.forward(state),
            Model::Tabular(m) => m.forward(state),
        }
    }

    fn backward(
        &self,
        fwd: &Forward,
        d_logits: &[f64],
        d_q: &[f64],
        grad: &mut GradAccumulator,
    ) -> Result<()> {
        match self {
            Model::Mlp(m) => m.backward(fwd, d_logits, d_q, grad),
            Model::Tabular(m) => m.backward(fwd, d_logits, d_q, grad),
        }
    }
}

/// The softmax policy of a model, as a [`Policy`].
pub struct ModelPolicy<'a, M: ActorCritic + ?Sized>(pub &'a M);

impl<M: ActorCritic + ?Sized> Policy for ModelPolicy<'_, M> {
    fn n_actions(&self) -> usize {
        self.0.n_actions()
    }

    fn probs(&self, state: usize) -> Vec<f64> {
        match self.0.forward(state) {
            Ok(f) => f.probs,
            // A non-finite network falls back to uniform; callers that care
            // detect divergence through `forward` directly.
            Err(_) => vec![1.0 / self.0.n_actions() as f64; self.0.n_actions()],
        }
    }
}

/// Lazily memoized forward passes for one fixed parameter vector.
pub struct ForwardCache<'a, M: ActorCritic + ?Sized> {
    model: &'a M,
    cache: RefCell<Vec<Option<Rc<Forward>>>>,
}

impl<'a, M: ActorCritic + ?Sized> ForwardCache<'a, M> {
    pub fn new(model: &'a M) -> Self {
        Self {
            model,
            cache: RefCell::new(vec![None; model.n_states()]),
        }
    }

    pub fn model(&self) -> &'a M {
        self.model
    }

    pub fn get(&self, state: usize) -> Result<Rc<Forward>> {
        if let Some(Some(f)) = self.cache.borrow().get(state) {
            return Ok(f.clone());
        }
        let f = Rc::new(self.model.forward(state)?);
        self.cache.borrow_mut()[state] = Some(f.clone());
        Ok(f)
    }

    pub fn q(&self, state: usize) -> Result<Vec<f64>> {
        Ok(self.get(state)?.q.clone())
    }
}

impl<M: ActorCritic + ?Sized> Policy for ForwardCache<'_, M> {
    fn n_actions(&self) -> usize {
        self.model.n_actions()
    }

    fn probs(&self, state: usize) -> Vec<f64> {
        match self.get(state) {
            Ok(f) => f.probs.clone(),
            Err(_) => vec![1.0 / self.model.n_actions() as f64; self.model.n_actions()],
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut GradAccumulator, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Ascend => "ascend",
            Direction::Descend => "descend",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ascend" => Some(Direction::Ascend),
            "descend" => Some(Direction::Descend),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    /// Running average of squared gradients.
    pub v: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
}

impl RmsPropState {
    pub fn new(n: usize) -> Self {
        Self {
            v: vec![0.0; n],
            decay: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// `v ← ρ v + (1 − ρ) g²`, then `p ← p ± lr · g / (√v + ε)`.
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &GradAccumulator,
    state: &mut RmsPropState,
    learning_rate: f64,
    direction: Direction,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.v.len() {
        return Err(Error::argument("rmsprop shapes do not match"));
    }
    if !(learning_rate > 0.0) {
        return Err(Error::argument(format!(
            "learning rate {learning_rate} must be positive"
        )));
    }
    if !grads.is_finite() {
        return Err(Error::numeric("non-finite gradient passed to rmsprop"));
    }
    let step = direction.sign() * learning_rate;
    let rho = state.decay;
    for ((p, &g), v) in params
        .iter_mut()
        .zip(grads.as_slice())
        .zip(state.v.iter_mut())
    {
        *v = rho * *v + (1.0 - rho) * g * g;
        *p += step * g / (v.sqrt() + state.epsilon);
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FRLCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model: magic, version, parameter count, the little-endian
/// `f64` parameters, then a shape manifest (kind byte, dimension list).
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let (kind, dims): (u8, Vec<usize>) = match model {
        Model::Mlp(m) => {
            let mut dims = vec![m.n_states];
            dims.extend(&m.hidden);
            dims.push(m.n_actions);
            (0, dims)
        }
        Model::Tabular(m) => (1, vec![m.n_states, m.n_actions]),
    };
    let params = model.params();
    let mut out = Vec::with_capacity(32 + 8 * params.len() + 8 * dims.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.push(kind);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::argument("checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::argument("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::argument(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n = r.u64()? as usize;
    let raw = r.take(
        n.checked_mul(8)
            .ok_or_else(|| Error::argument("bad parameter count"))?,
    )?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let kind = r.take(1)?[0];
    let n_dims = r.u32()? as usize;
    let dims = (0..n_dims)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::argument("trailing bytes after checkpoint manifest"));
    }
    let mut model = match (kind, dims.as_slice()) {
        (0, [n_states, hidden @ .., n_actions]) => {
            Model::Mlp(Mlp::zeros(*n_states, hidden, *n_actions)?)
        }
        (1, [n_states, n_actions]) => Model::Tabular(TabularModel::zeros(*n_states, *n_actions)?),
        _ => {
            return Err(Error::argument(format!(
                "unknown checkpoint manifest (kind {kind}, dims {dims:?})"
            )))
        }
    };
    if model.n_params() != params.len() {
        return Err(Error::argument(
            "parameter count does not match the manifest",
        ));
    }
    model.params_mut().copy_from_slice(&params);
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mlp(seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mlp::new(6, &[8, 7], 3, &mut rng).unwrap();
        // non-zero biases so the check also covers them
        for p in m.params_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
        m
    }

    /// Central differences of `loss(model)` over every parameter.
    fn numeric_grad<M: ActorCritic + Clone>(model: &M, loss: impl Fn(&M) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..model.n_params())
            .map(|i| {
                let mut plus = model.clone();
                plus.params_mut()[i] += h;
                let mut minus = model.clone();
                minus.params_mut()[i] -= h;
                (loss(&plus) - loss(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a
            .iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let m = Mlp::zeros(5, &[4, 4], 3).unwrap();
        let f = m.forward(2).unwrap();
        assert!(f.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(f.q.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn hand_set_single_layer() {
        // no hidden layers: logits = W[:, s] + b
        let mut m = Mlp::zeros(2, &[], 2).unwrap();
        let (pol, q) = m.head_ranges();
        let p = m.params_mut();
        // policy W is 2x2 row-major, then b
        p[pol.start..pol.end].copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
        p[q.start..q.end].copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.0, 1.0]);
        let f = m.forward(1).unwrap();
        assert_eq!(f.logits, vec![2.5, 3.5]);
        assert_eq!(f.q, vec![0.2, 1.4]);
        let e = (1.0f64).exp();
        assert!((f.probs[1] - e / (1.0 + e)).abs() < 1e-15);

        // one hidden unit of width 1 with identity-like weights
        let mut m = Mlp::zeros(2, &[1], 1).unwrap();
        m.params_mut()
            .copy_from_slice(&[2.0, 3.0, 0.5, 1.5, 0.25, -1.0, 0.0]);
        // h = relu(W1[:, 1] + b1) = 3.5; logit = 1.5·3.5 + 0.25; q = −3.5
        let f = m.forward(1).unwrap();
        assert_eq!(f.logits, vec![5.5]);
        assert_eq!(f.q, vec![-3.5]);
    }

    #[test]
    fn probabilities_normalized_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut m = Mlp::new(4, &[5], 3, &mut rng).unwrap();
            for p in m.params_mut() {
                *p *= 10.0;
            }
            let f = m.forward(rng.gen_range(0..4)).unwrap();
            assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(f.probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut m = Mlp::zeros(2, &[2], 2).unwrap();
        m.params_mut()[0] = f64::NAN;
        assert!(matches!(m.forward(0), Err(Error::Numeric(_))));
        assert!(matches!(m.forward(5), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_head_grads_give_zero_accumulator() {
        let m = random_mlp(1);
        let f = m.forward(3).unwrap();
        let mut g = m.zero_grad();
        m.backward(&f, &[0.0; 3], &[0.0; 3], &mut g).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
        let mut wrong = GradAccumulator::zeros(3);
        assert!(m.backward(&f, &[0.0; 3], &[0.0; 3], &mut wrong).is_err());
    }

    #[test]
    fn sum_of_q_matches_finite_differences() {
        for seed in 0..10 {
            let m = random_mlp(seed);
            let s = (seed % 6) as usize;
            let f = m.forward(s).unwrap();
            let mut g = m.zero_grad();
            m.backward(&f, &[0.0; 3], &[1.0; 3], &mut g).unwrap();
            let num = numeric_grad(&m, |m| m.forward(s).unwrap().q.iter().sum());
            assert!(rel_err(g.as_slice(), &num) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn log_prob_matches_finite_differences() {
        for seed in 0..10 {
            let m = random_mlp(100 + seed);
            let (s, a) = ((seed % 6) as usize, (seed % 3) as usize);
            let f = m.forward(s).unwrap();
            let mut g = m.zero_grad();
            m.backward(&f, &f.log_prob_grad(a), &[0.0; 3], &mut g)
                .unwrap();
            let num = numeric_grad(&m, |m| m.forward(s).unwrap().probs[a].ln());
            assert!(rel_err(g.as_slice(), &num) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn tabular_backward_is_exact() {
        let m =
            TabularModel::from_tables(2, 2, &[0.3, -0.2, 1.0, 0.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = m.forward(1).unwrap();
        let mut g = m.zero_grad();
        m.backward(&f, &f.log_prob_grad(0), &[1.0, 0.0], &mut g)
            .unwrap();
        let num = numeric_grad(&m, |m| {
            m.forward(1).unwrap().probs[0].ln() + m.forward(1).unwrap().q[0]
        });
        assert!(rel_err(g.as_slice(), &num) < 1e-8);
    }

    #[test]
    fn rmsprop_examples() {
        let mut p = vec![1.0];
        let mut st = RmsPropState::new(1);
        st.v[0] = 0.5;
        rmsprop_step(
            &mut p,
            &GradAccumulator::from_vec(vec![0.0]),
            &mut st,
            7e-4,
            Direction::Ascend,
        )
        .unwrap();
        assert_eq!(p[0], 1.0);
        assert!((st.v[0] - 0.495).abs() < 1e-15);

        let mut p = vec![0.0];
        let mut st = RmsPropState::new(1);
        rmsprop_step(
            &mut p,
            &GradAccumulator::from_vec(vec![1.0]),
            &mut st,
            7e-4,
            Direction::Ascend,
        )
        .unwrap();
        assert!((p[0] - 7e-4 / (0.01f64.sqrt() + 1e-8)).abs() < 1e-15);
        assert!((p[0] - 6.99999e-3).abs() < 1e-8);

        // second identical gradient: v = 0.0199, step = lr / (√0.0199 + ε)
        let before = p[0];
        rmsprop_step(
            &mut p,
            &GradAccumulator::from_vec(vec![1.0]),
            &mut st,
            7e-4,
            Direction::Ascend,
        )
        .unwrap();
        let second = p[0] - before;
        assert!((st.v[0] - 0.0199).abs() < 1e-15);
        assert!(second < 7e-4 / 0.0199f64.sqrt() + 1e-15);
        assert!(second < 6.99999e-3);

        let mut p = vec![0.0];
        let mut st = RmsPropState::new(1);
        rmsprop_step(
            &mut p,
            &GradAccumulator::from_vec(vec![1.0]),
            &mut st,
            7e-4,
            Direction::Descend,
        )
        .unwrap();
        assert!(p[0] < 0.0);

        let bad = GradAccumulator::from_vec(vec![f64::INFINITY]);
        assert!(matches!(
            rmsprop_step(&mut p, &bad, &mut st, 7e-4, Direction::Ascend),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn rmsprop_first_step_is_scale_free() {
        // Δp = lr·g/(√(0.01 g²) + ε): doubling g leaves Δp unchanged up to ε
        let step = |g: f64| {
            let mut p = vec![0.0];
            let mut st = RmsPropState::new(1);
            rmsprop_step(
                &mut p,
                &GradAccumulator::from_vec(vec![g]),
                &mut st,
                1e-3,
                Direction::Ascend,
            )
            .unwrap();
            p[0]
        };
        let (a, b) = (step(0.5), step(1.0));
        let expected_ratio = (0.1 * 0.5 + 1e-8) * 2.0 / (0.1 * 1.0 + 1e-8);
        assert!((b / a - expected_ratio).abs() < 1e-12);
    }

    #[test]
    fn clipping_examples() {
        let mut g = GradAccumulator::from_vec(vec![0.1, 0.2]);
        clip_gradients(&mut g, 0.5);
        assert_eq!(g.as_slice(), &[0.1, 0.2]);

        let mut g = GradAccumulator::from_vec(vec![10.0]);
        assert_eq!(clip_gradients(&mut g, 0.5), 10.0);
        assert_eq!(g.as_slice(), &[0.5]);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_min_of_norm_and_bound(v in prop::collection::vec(-5.0f64..5.0, 1..50)) {
            let mut g = GradAccumulator::from_vec(v.clone());
            let before = clip_gradients(&mut g, 0.5);
            prop_assert!((g.norm() - before.min(0.5)).abs() < 1e-12);
            // direction preserved
            if before > 0.0 {
                for (a, b) in g.as_slice().iter().zip(&v) {
                    prop_assert!((a * before - b * g.norm()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn checkpoint_round_trip_is_bit_exact(seed in 0u64..1000, tabular in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = if tabular {
                let mut t = TabularModel::zeros(3, 2).unwrap();
                for p in t.params_mut() { *p = rng.gen::<f64>() * 1e3 - 5e2; }
                Model::Tabular(t)
            } else {
                Model::Mlp(Mlp::new(4, &[3, 5], 2, &mut rng).unwrap())
            };
            let bytes = encode_checkpoint(&model);
            let back = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(encode_checkpoint(&back), bytes);
            let same_bits = back.params().iter().zip(model.params()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let model = Model::Tabular(TabularModel::zeros(2, 2).unwrap());
        let bytes = encode_checkpoint(&model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
