//! Scalar target models and their tempered family `π_s ∝ exp{s·g}`.
//!
//! A [`TemperedTarget`] carries the log-density `g` of one coordinate of a
//! product target, a declared upper bound on `g`, an optional exact sampler for
//! `π_s`, and a quadrature domain used for stationary expectations.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SmcError};
use crate::quadrature::CompositeRule;
use crate::rng::StreamRng;

pub type LogDensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Draws exactly from `π_s` given the temperature `s`.
pub type ExactSamplerFn = Arc<dyn Fn(&mut StreamRng, f64) -> f64 + Send + Sync>;

pub const DEFAULT_QUADRATURE_NODES: usize = 512;
const UPPER_BOUND_PROBES: usize = 1000;
const MAX_TAIL_FRACTION: f64 = 1e-8;

/// Finite interval and node count for the composite Gauss–Legendre rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureDomain {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

#[derive(Clone)]
pub struct TemperedTarget {
    name: String,
    log_g: LogDensityFn,
    g_upper_bound: f64,
    exact_sampler: Option<ExactSamplerFn>,
    domain: QuadratureDomain,
    rule: CompositeRule,
    min_temperature: f64,
}

impl fmt::Debug for TemperedTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TemperedTarget")
            .field("name", &self.name)
            .field("g_upper_bound", &self.g_upper_bound)
            .field("exact_sampler", &self.exact_sampler.is_some())
            .field("domain", &self.domain)
            .finish()
    }
}

/// Builder for custom targets.
pub struct TargetBuilder {
    name: String,
    log_g: LogDensityFn,
    g_upper_bound: f64,
    exact_sampler: Option<ExactSamplerFn>,
    domain: Option<(f64, f64)>,
    nodes: usize,
}

impl TargetBuilder {
    pub fn exact_sampler(
        mut self,
        sampler: impl Fn(&mut StreamRng, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.exact_sampler = Some(Arc::new(sampler));
        self
    }

    pub fn domain(mut self, lo: f64, hi: f64) -> Self {
        self.domain = Some((lo, hi));
        self
    }

    pub fn nodes(mut self, nodes: usize) -> Self {
        self.nodes = nodes;
        self
    }

    /// Validates the target against the smallest temperature it will be used at.
    ///
    /// `g` is probed at 1 000 evenly spaced points of the domain and must not
    /// exceed the declared bound. The mass of `exp{phi0·g}` on two extension
    /// intervals (a quarter of the domain width on each side) must stay below
    /// `1e-8` of the mass inside.
    pub fn build(self, phi0: f64) -> Result<TemperedTarget> {
        if !(phi0 > 0.0 && phi0 <= 1.0) {
            return Err(SmcError::Parameter(format!("phi0 must lie in (0, 1], got {phi0}")));
        }
        if !self.g_upper_bound.is_finite() {
            return Err(SmcError::Parameter("g upper bound must be finite".into()));
        }
        let (lo, hi) = self
            .domain
            .ok_or_else(|| SmcError::Parameter(format!("target {:?} needs a quadrature domain", self.name)))?;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(SmcError::Parameter(format!("invalid quadrature domain [{lo}, {hi}]")));
        }
        if self.nodes == 0 {
            return Err(SmcError::Parameter("quadrature needs at least one node".into()));
        }

        let step = (hi - lo) / (UPPER_BOUND_PROBES - 1) as f64;
        for k in 0..UPPER_BOUND_PROBES {
            let x = lo + k as f64 * step;
            let g = (self.log_g)(x);
            if g > self.g_upper_bound {
                return Err(SmcError::Parameter(format!(
                    "g({x}) = {g} exceeds the declared upper bound {}",
                    self.g_upper_bound
                )));
            }
        }

        let rule = CompositeRule::new(lo, hi, self.nodes);
        let target = TemperedTarget {
            name: self.name,
            log_g: self.log_g,
            g_upper_bound: self.g_upper_bound,
            exact_sampler: self.exact_sampler,
            domain: QuadratureDomain { lo, hi, nodes: rule.nodes().len() },
            rule,
            min_temperature: phi0,
        };

        let inside = target.rule.integrate(|x| target.scaled_density(phi0, x));
        if !(inside.is_finite() && inside > 0.0) {
            return Err(SmcError::Integration(format!(
                "normalizer of exp{{{phi0}·g}} over [{lo}, {hi}] is {inside}"
            )));
        }
        let ext = 0.25 * (hi - lo);
        let left = CompositeRule::new(lo - ext, lo, 64).integrate(|x| target.scaled_density(phi0, x));
        let right = CompositeRule::new(hi, hi + ext, 64).integrate(|x| target.scaled_density(phi0, x));
        let tail = (left + right) / inside;
        if !(tail < MAX_TAIL_FRACTION) {
            return Err(SmcError::Integration(format!(
                "quadrature domain [{lo}, {hi}] misses a fraction {tail:e} of the mass at s = {phi0}"
            )));
        }
        Ok(target)
    }
}

impl TemperedTarget {
    pub fn builder(
        name: impl Into<String>,
        log_g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        g_upper_bound: f64,
    ) -> TargetBuilder {
        TargetBuilder {
            name: name.into(),
            log_g: Arc::new(log_g),
            g_upper_bound,
            exact_sampler: None,
            domain: None,
            nodes: DEFAULT_QUADRATURE_NODES,
        }
    }

    /// `g(x) = -x²/2`, so `π_s = N(0, 1/s)`. Quadrature on `±12/√phi0`.
    pub fn gaussian(phi0: f64) -> Result<Self> {
        if !(phi0 > 0.0 && phi0 <= 1.0) {
            return Err(SmcError::Parameter(format!("phi0 must lie in (0, 1], got {phi0}")));
        }
        let half = 12.0 / phi0.sqrt();
        Self::builder("gaussian", |x| -0.5 * x * x, 0.0)
            .exact_sampler(|rng, s| {
                let z: f64 = rng.sample(StandardNormal);
                z / s.sqrt()
            })
            .domain(-half, half)
            .build(phi0)
    }

    /// `g = 0` on `[lo, hi]` and `-∞` outside: every `π_s` is uniform on the box,
    /// so tempering never moves the weights.
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::builder(
            "uniform",
            move |x| if (lo..=hi).contains(&x) { 0.0 } else { f64::NEG_INFINITY },
            0.0,
        )
        .exact_sampler(move |rng, _s| rng.random_range(lo..hi))
        .domain(lo, hi)
        // π_s does not depend on s, so every positive temperature is valid
        .build(f64::MIN_POSITIVE)
    }

    /// Looks up a built-in target by its configuration name.
    pub fn by_name(name: &str, phi0: f64) -> Result<Self> {
        match name {
            "gaussian" => Self::gaussian(phi0),
            "uniform" => Self::uniform(-1.0, 1.0),
            other => Err(SmcError::Config(format!(
                "unknown target {other:?} (built-ins: gaussian, uniform)"
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline(always)]
    pub fn log_g(&self, x: f64) -> f64 {
        (self.log_g)(x)
    }

    pub fn g_upper_bound(&self) -> f64 {
        self.g_upper_bound
    }

    pub fn has_exact_sampler(&self) -> bool {
        self.exact_sampler.is_some()
    }

    pub fn domain(&self) -> QuadratureDomain {
        self.domain
    }

    /// Smallest temperature the quadrature domain was validated for.
    pub fn min_temperature(&self) -> f64 {
        self.min_temperature
    }

    /// `exp{s·(g(x) - sup g)}`, the density up to a constant that cancels in ratios.
    fn scaled_density(&self, s: f64, x: f64) -> f64 {
        (s * (self.log_g(x) - self.g_upper_bound)).exp()
    }

    /// `s·g(x)`, the unnormalized log-density of `π_s`.
    pub fn log_pi_unnormalized(&self, s: f64, x: f64) -> Result<f64> {
        if !(s > 0.0) {
            return Err(SmcError::Parameter(format!("temperature must be positive, got {s}")));
        }
        if !x.is_finite() {
            return Err(SmcError::Domain(format!("state {x} is not finite")));
        }
        Ok(s * self.log_g(x))
    }

    /// `π_s(h)` by composite Gauss–Legendre quadrature over the target's domain.
    pub fn stationary_expectation(&self, s: f64, h: impl Fn(f64) -> f64) -> Result<f64> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(SmcError::Parameter(format!("temperature must lie in (0, 1], got {s}")));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (&x, &w) in self.rule.nodes().iter().zip(self.rule.weights()) {
            let p = w * self.scaled_density(s, x);
            if p != 0.0 {
                num += p * h(x);
            }
            den += p;
        }
        let value = num / den;
        if !value.is_finite() {
            return Err(SmcError::Integration(format!(
                "π_{s}(h) evaluated to {value} on target {:?}",
                self.name
            )));
        }
        Ok(value)
    }

    /// One exact draw from `π_s`.
    pub fn sample_stationary(&self, rng: &mut StreamRng, s: f64) -> Result<f64> {
        let sampler = self.exact_sampler.as_ref().ok_or_else(|| {
            SmcError::UnsupportedTarget(format!("target {:?} has no exact sampler", self.name))
        })?;
        Ok(sampler(rng, s))
    }

    /// Sampler handle for hot loops; `None` when the target has none.
    pub(crate) fn sampler(&self) -> Option<&ExactSamplerFn> {
        self.exact_sampler.as_ref()
    }
}
