//! `π_s`-invariant scalar Markov kernels `k_s` and their coordinate-wise
//! application to a particle system.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Result, SmcError};
use crate::rng::{Purpose, RowKey, StreamRng};
use crate::schedule::Tabulated;
use crate::smc::ParticleSystem;
use crate::target::TemperedTarget;

/// Proposal precision `f(s)`; the random-walk proposal variance is `1/f(s)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Precision {
    /// `f(s) = s`.
    Identity,
    Table(Tabulated),
}

impl Precision {
    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Precision::Identity => s,
            Precision::Table(t) => t.eval(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// Random-walk Metropolis with `N(0, 1/f(s))` increments.
    Rwm { precision: Precision },
    /// Independent exact draw from `π_s`, ignoring the current state.
    Perfect,
}

const PRECISION_CHECK_POINTS: usize = 101;

impl KernelSpec {
    pub fn rwm() -> Self {
        KernelSpec::Rwm { precision: Precision::Identity }
    }

    pub fn perfect() -> Self {
        KernelSpec::Perfect
    }

    pub fn is_perfect(&self) -> bool {
        matches!(self, KernelSpec::Perfect)
    }

    /// Checks the kernel can run on `target` over `[phi0, 1]`.
    pub fn validate(&self, target: &TemperedTarget, phi0: f64) -> Result<()> {
        match self {
            KernelSpec::Perfect => {
                if !target.has_exact_sampler() {
                    return Err(SmcError::UnsupportedTarget(format!(
                        "perfect kernel needs an exact sampler for target {:?}",
                        target.name()
                    )));
                }
            }
            KernelSpec::Rwm { precision } => {
                let mut prev = f64::NEG_INFINITY;
                for k in 0..PRECISION_CHECK_POINTS {
                    let s = phi0 + (1.0 - phi0) * k as f64 / (PRECISION_CHECK_POINTS - 1) as f64;
                    let f = precision.eval(s);
                    if !(f > 0.0 && f.is_finite()) {
                        return Err(SmcError::Parameter(format!("proposal precision f({s}) = {f} is not positive")));
                    }
                    if f < prev {
                        return Err(SmcError::Parameter(format!("proposal precision decreases at s = {s}")));
                    }
                    prev = f;
                }
            }
        }
        Ok(())
    }
}

/// `1 ∧ exp{s(g(y) - g(x))}`; zero when `g(y)` is not finite.
pub fn acceptance_probability(target: &TemperedTarget, s: f64, x: f64, y: f64) -> f64 {
    let gy = target.log_g(y);
    if !gy.is_finite() {
        return 0.0;
    }
    (s * (gy - target.log_g(x))).exp().min(1.0)
}

#[inline(always)]
fn step(rng: &mut StreamRng, spec: &KernelSpec, target: &TemperedTarget, s: f64, x: f64) -> f64 {
    match spec {
        KernelSpec::Perfect => {
            // validated: the sampler exists
            let sampler = target.sampler().expect("perfect kernel without exact sampler");
            sampler(rng, s)
        }
        KernelSpec::Rwm { precision } => {
            let z: f64 = rng.sample(StandardNormal);
            let y = x + z / precision.eval(s).sqrt();
            let gy = target.log_g(y);
            if !gy.is_finite() {
                return x;
            }
            let log_ratio = s * (gy - target.log_g(x));
            if log_ratio >= 0.0 {
                return y;
            }
            let u: f64 = rng.random();
            if u.ln() < log_ratio {
                y
            } else {
                x
            }
        }
    }
}

/// One transition of `k_s` from `x`.
pub fn kernel_step(
    rng: &mut StreamRng,
    spec: &KernelSpec,
    target: &TemperedTarget,
    s: f64,
    x: f64,
) -> Result<f64> {
    if !x.is_finite() {
        return Err(SmcError::Domain(format!("kernel started from non-finite state {x}")));
    }
    if spec.is_perfect() && !target.has_exact_sampler() {
        return Err(SmcError::UnsupportedTarget(format!(
            "perfect kernel needs an exact sampler for target {:?}",
            target.name()
        )));
    }
    Ok(step(rng, spec, target, s, x))
}

/// Advances every coordinate of every particle by one `k_s` transition.
///
/// Coordinate `j` of particle `i` draws from the stream keyed
/// `(seed, i, j, current_step)`, so the result does not depend on how rayon
/// splits the work. Weights are untouched.
pub fn apply_kernel_coordinatewise(
    system: &mut ParticleSystem,
    spec: &KernelSpec,
    target: &TemperedTarget,
    s: f64,
) -> Result<()> {
    if spec.is_perfect() && !target.has_exact_sampler() {
        return Err(SmcError::UnsupportedTarget(format!(
            "perfect kernel needs an exact sampler for target {:?}",
            target.name()
        )));
    }
    let seed = system.seed();
    let step_no = system.current_step() as u64;
    let dim = system.dim();
    let rows = system.positions_mut().par_chunks_mut(dim).enumerate();
    match target.sampler().filter(|_| spec.is_perfect()) {
        // the perfect kernel ignores the state, so skip the per-coordinate dispatch
        Some(sampler) => rows.for_each(|(i, row)| {
            let key = RowKey::new(seed, Purpose::Propagate, i as u64, step_no);
            for (j, x) in row.iter_mut().enumerate() {
                *x = sampler(&mut key.coordinate(j as u64), s);
            }
        }),
        None => rows.for_each(|(i, row)| {
            let key = RowKey::new(seed, Purpose::Propagate, i as u64, step_no);
            for (j, x) in row.iter_mut().enumerate() {
                *x = step(&mut key.coordinate(j as u64), spec, target, s, *x);
            }
        }),
    }
    Ok(())
}
