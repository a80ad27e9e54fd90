//! Convex generators, Fenchel conjugates and f-divergences.
//!
//! An f-divergence between discrete distributions `p` and `q` is
//!
//! ```text
//! D_f(p || q) = Σ_h q(h) f(p(h) / q(h))
//! ```
//!
//! for convex `f` with `f(1) = 0`. Through the conjugate
//! `f*(ω) = sup_x x·ω − f(x)` the same quantity has the variational form
//!
//! ```text
//! D_f(p || q) = sup_ω Σ_h p(h) ω(h) − Σ_h q(h) f*(ω(h))
//! ```
//!
//! whose supremum is attained at the witness `ω(h) = f'(p(h) / q(h))`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Iterations used by every golden-section search in this module.
pub const GOLDEN_ITERATIONS: usize = 200;

/// Default bound applied to density ratios before `f` sees them.
pub const DEFAULT_RATIO_CLIP: f64 = 1e6;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Closed real interval `[lo, hi]`; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn real_line() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn intersect(&self, other: &Interval) -> Interval {
        Interval {
            lo: self.lo.max(other.lo),
            hi: self.hi.min(other.hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvexKind {
    /// `f(x) = ½(x − 1)²`, the generator of the χ²-type divergence.
    QuadraticShifted,
    /// `f(x) = x ln x`, the generator of KL.
    XLogX,
    Custom,
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A convex generator together with its derivative, conjugate and conjugate
/// derivative.
#[derive(Clone)]
pub struct ConvexFunction {
    kind: ConvexKind,
    domain: Interval,
    ratio_clip: f64,
    eval: ScalarFn,
    deriv: ScalarFn,
    conj_eval: ScalarFn,
    conj_deriv: ScalarFn,
}

impl fmt::Debug for ConvexFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexFunction")
            .field("kind", &self.kind)
            .field("domain", &self.domain)
            .field("ratio_clip", &self.ratio_clip)
            .finish()
    }
}

impl ConvexFunction {
    pub fn quadratic_shifted() -> Self {
        Self {
            kind: ConvexKind::QuadraticShifted,
            domain: Interval::real_line(),
            ratio_clip: DEFAULT_RATIO_CLIP,
            eval: Arc::new(|x| 0.5 * (x - 1.0) * (x - 1.0)),
            deriv: Arc::new(|x| x - 1.0),
            conj_eval: Arc::new(|w| 0.5 * w * w + w),
            conj_deriv: Arc::new(|w| w + 1.0),
        }
    }

    pub fn x_log_x() -> Self {
        Self {
            kind: ConvexKind::XLogX,
            domain: Interval::new(0.0, f64::INFINITY),
            ratio_clip: DEFAULT_RATIO_CLIP,
            eval: Arc::new(|x| if x == 0.0 { 0.0 } else { x * x.ln() }),
            deriv: Arc::new(|x| x.ln() + 1.0),
            conj_eval: Arc::new(|w| (w - 1.0).exp()),
            conj_deriv: Arc::new(|w| (w - 1.0).exp()),
        }
    }

    /// Builds a generator from user-supplied closures. The caller is
    /// responsible for the four functions being mutually consistent.
    pub fn custom(
        domain: Interval,
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
        conj_eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        conj_deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind: ConvexKind::Custom,
            domain,
            ratio_clip: DEFAULT_RATIO_CLIP,
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
            conj_eval: Arc::new(conj_eval),
            conj_deriv: Arc::new(conj_deriv),
        }
    }

    pub fn with_ratio_clip(mut self, clip: f64) -> Self {
        self.ratio_clip = clip;
        self
    }

    pub fn kind(&self) -> ConvexKind {
        self.kind
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn ratio_clip(&self) -> f64 {
        self.ratio_clip
    }

    /// `f(x)`, with `+∞` outside the domain.
    pub fn eval(&self, x: f64) -> f64 {
        if self.domain.contains(x) {
            (self.eval)(x)
        } else {
            f64::INFINITY
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        (self.deriv)(x)
    }

    pub fn conj_eval(&self, w: f64) -> f64 {
        (self.conj_eval)(w)
    }

    pub fn conj_deriv(&self, w: f64) -> f64 {
        (self.conj_deriv)(w)
    }
}

/// Maximizes a unimodal function on `[lo, hi]`; returns `(argmax, max)`.
pub fn golden_section_max(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    iterations: usize,
) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iterations {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    // The bracket may have collapsed onto an endpoint.
    [(c, fc), (d, fd), (lo, f(lo)), (hi, f(hi))]
        .into_iter()
        .filter(|(_, v)| !v.is_nan())
        .fold((c, f64::NEG_INFINITY), |best, cand| {
            if cand.1 > best.1 {
                cand
            } else {
                best
            }
        })
}

/// `f*(z) = max_x x·z − f(x)` by golden-section search over `search`
/// (intersected with the domain of `f`).
pub fn conjugate_numeric(f: &ConvexFunction, z: f64, search: Interval) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::domain(format!(
            "conjugate argument {z} is not finite"
        )));
    }
    let interval = search.intersect(&f.domain());
    if !(interval.width() > 0.0) || !interval.lo.is_finite() || !interval.hi.is_finite() {
        return Err(Error::argument(format!(
            "search interval [{}, {}] has no usable width",
            interval.lo, interval.hi
        )));
    }
    let (_, value) = golden_section_max(
        |x| x * z - f.eval(x),
        interval.lo,
        interval.hi,
        GOLDEN_ITERATIONS,
    );
    Ok(value)
}

/// Max over `grid` of `|f**(x) − f(x)|`, both conjugates taken numerically.
///
/// Search intervals are bracketed from the derivatives: the outer maximizer
/// at `x` is `f'(x)`, and the inner maximizer at `ω` is `f*'(ω)`.
pub fn double_conjugate_check(f: &ConvexFunction, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::argument("empty grid"));
    }
    let mut w_lo = f64::INFINITY;
    let mut w_hi = f64::NEG_INFINITY;
    for &x in grid {
        if !f.domain().contains(x) {
            return Err(Error::domain(format!("grid point {x} outside the domain")));
        }
        let w = f.deriv(x);
        if !w.is_finite() {
            return Err(Error::domain(format!("f'({x}) is not finite")));
        }
        w_lo = w_lo.min(w);
        w_hi = w_hi.max(w);
    }
    let outer = Interval::new(w_lo - 1.0, w_hi + 1.0);
    let (x_lo, x_hi) = (f.conj_deriv(outer.lo), f.conj_deriv(outer.hi));
    let pad = 0.5 * (x_hi - x_lo).abs() + 1.0;
    let inner = Interval::new(x_lo.min(x_hi) - pad, x_lo.max(x_hi) + pad);

    let mut worst: f64 = 0.0;
    for &x in grid {
        let (_, f_star_star) = golden_section_max(
            |w| match conjugate_numeric(f, w, inner) {
                Ok(c) => x * w - c,
                Err(_) => f64::NEG_INFINITY,
            },
            outer.lo,
            outer.hi,
            GOLDEN_ITERATIONS,
        );
        worst = worst.max((f_star_star - f.eval(x)).abs());
    }
    Ok(worst)
}

/// Two distributions over a common finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistributionPair {
    p: Vec<f64>,
    q: Vec<f64>,
}

const SUM_TOLERANCE: f64 = 1e-12;

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::argument(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::argument(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

impl DiscreteDistributionPair {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.len() != q.len() {
            return Err(Error::argument(format!(
                "support sizes differ or are empty ({} vs {})",
                p.len(),
                q.len()
            )));
        }
        check_distribution("p", &p)?;
        check_distribution("q", &q)?;
        Ok(Self { p, q })
    }

    pub fn support_size(&self) -> usize {
        self.p.len()
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    fn ratios(&self, clip: f64) -> Result<Vec<f64>> {
        self.p
            .iter()
            .zip(&self.q)
            .enumerate()
            .map(|(h, (&p, &q))| {
                if q > 0.0 {
                    Ok((p / q).min(clip))
                } else if p > 0.0 {
                    Err(Error::Support(format!("q({h}) = 0 while p({h}) = {p}")))
                } else {
                    Ok(1.0)
                }
            })
            .collect()
    }
}

/// Dual variable of the variational representation, one value per support
/// point (or state-action pair).
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessTable {
    values: Vec<f64>,
}

impl WitnessTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(h) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("witness entry {h} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Adds `delta` to every entry.
    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v + delta).collect(),
        }
    }
}

/// `Σ_h q(h) f(p(h)/q(h))`.
pub fn fdiv_direct(f: &ConvexFunction, pair: &DiscreteDistributionPair) -> Result<f64> {
    let ratios = pair.ratios(f.ratio_clip())?;
    Ok(pair
        .q
        .iter()
        .zip(ratios)
        .map(|(&q, r)| if q > 0.0 { q * f.eval(r) } else { 0.0 })
        .sum())
}

/// `ω(h) = f'(p(h)/q(h))`.
pub fn optimal_witness(
    f: &ConvexFunction,
    pair: &DiscreteDistributionPair,
) -> Result<WitnessTable> {
    let values = pair
        .ratios(f.ratio_clip())?
        .into_iter()
        .enumerate()
        .map(|(h, r)| {
            let w = f.deriv(r);
            if w.is_finite() && f.domain().contains(r) {
                Ok(w)
            } else {
                Err(Error::domain(format!(
                    "ratio {r} at support point {h} is outside dom f'"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    WitnessTable::new(values)
}

/// `Σ_h p(h) ω(h) − Σ_h q(h) f*(ω(h))`.
pub fn fdiv_variational(
    f: &ConvexFunction,
    pair: &DiscreteDistributionPair,
    witness: &WitnessTable,
) -> Result<f64> {
    if witness.values.len() != pair.support_size() {
        return Err(Error::argument(format!(
            "witness has {} entries for a support of size {}",
            witness.values.len(),
            pair.support_size()
        )));
    }
    Ok(pair
        .p
        .iter()
        .zip(&pair.q)
        .zip(&witness.values)
        .map(|((&p, &q), &w)| p * w - q * f.conj_eval(w))
        .sum())
}

/// Maximizes the variational objective coordinate-wise by golden-section
/// search, without using the closed-form witness.
pub fn optimize_witness_numeric(
    f: &ConvexFunction,
    pair: &DiscreteDistributionPair,
) -> Result<WitnessTable> {
    let ratios = pair.ratios(f.ratio_clip())?;
    let bracket: Vec<f64> = ratios.iter().map(|&r| f.deriv(r.max(1e-12))).collect();
    let lo = bracket.iter().cloned().fold(f64::INFINITY, f64::min) - 2.0;
    let hi = bracket.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 2.0;
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::domain("cannot bracket the witness search"));
    }
    let values = pair
        .p
        .iter()
        .zip(&pair.q)
        .map(|(&p, &q)| {
            golden_section_max(|w| p * w - q * f.conj_eval(w), lo, hi, GOLDEN_ITERATIONS).0
        })
        .collect();
    WitnessTable::new(values)
}
