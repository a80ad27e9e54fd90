//! Stochastic policies over discrete actions.

use rand::Rng;

/// Anything that maps a state to a distribution over actions.
pub trait Policy {
    fn n_actions(&self) -> usize;

    /// Action probabilities at `state`; sums to one.
    fn probs(&self, state: usize) -> Vec<f64>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }

    fn probs(&self, state: usize) -> Vec<f64> {
        (**self).probs(state)
    }
}

/// Adapts a closure `state -> probabilities` into a [`Policy`].
pub struct FnPolicy<F> {
    n_actions: usize,
    f: F,
}

impl<F: Fn(usize) -> Vec<f64>> FnPolicy<F> {
    pub fn new(n_actions: usize, f: F) -> Self {
        Self { n_actions, f }
    }
}

impl<F: Fn(usize) -> Vec<f64>> Policy for FnPolicy<F> {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn probs(&self, state: usize) -> Vec<f64> {
        (self.f)(state)
    }
}

/// Draws an index from a probability vector by inverse CDF.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below one; take the last supported index.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
