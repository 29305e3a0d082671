//! The tempered SMC sampler: particle system, weight recursion, effective
//! sample size, multinomial resampling and the full annealing loop.
//!
//! One step `n` of [`run_smc`] does, in order:
//!
//! 1. add `(φ_n - φ_{n-1})·Σ_j g(x_{n-1,j})` to every log-weight, evaluated at
//!    the positions *before* the move;
//! 2. move every coordinate with `k_{φ_n}`;
//! 3. compute the ESS of the current weights;
//! 4. if the resampling policy fires, resample the moved particles
//!    multinomially and reset the log-weights to zero.
//!
//! Positions are a dense row-major `N × d` matrix; particles are rows.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SmcError};
use crate::kernel::{apply_kernel_coordinatewise, KernelSpec};
use crate::rng::{stream, Purpose, RowKey, StreamRng};
use crate::schedule::{AnnealingSchedule, TestGrid};
use crate::target::TemperedTarget;

/// `(Σw)²/Σw²` from log-weights, after shifting by the maximum.
///
/// Invariant to adding a constant to every log-weight; always in `[1, N]`.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(SmcError::Parameter("ESS of an empty weight vector".into()));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(SmcError::Domain(format!("log-weights are not finite (max {max})")));
    }
    let (s1, s2) = log_weights.iter().fold((0.0, 0.0), |(s1, s2), &lw| {
        let w = (lw - max).exp();
        (s1 + w, s2 + w * w)
    });
    Ok((s1 * s1 / s2).clamp(1.0, log_weights.len() as f64))
}

/// `N` weighted particles in dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    dim: usize,
    n_particles: usize,
    positions: Vec<f64>,
    log_weights: Vec<f64>,
    last_resample_step: usize,
    current_step: usize,
    seed: u64,
}

impl ParticleSystem {
    /// Draws `n` particles with `d` i.i.d. `π_{phi0}` coordinates each; all log-weights are 0.
    pub fn init(seed: u64, target: &TemperedTarget, n: usize, d: usize, phi0: f64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(SmcError::Parameter(format!("need N ≥ 1 and d ≥ 1, got N = {n}, d = {d}")));
        }
        let sampler = target.sampler().ok_or_else(|| {
            SmcError::UnsupportedTarget(format!(
                "initialization needs an exact sampler for target {:?}",
                target.name()
            ))
        })?;
        let mut positions = vec![0.0; n * d];
        positions.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
            let key = RowKey::new(seed, Purpose::Propagate, i as u64, 0);
            for (j, x) in row.iter_mut().enumerate() {
                *x = sampler(&mut key.coordinate(j as u64), phi0);
            }
        });
        Ok(ParticleSystem {
            dim: d,
            n_particles: n,
            positions,
            log_weights: vec![0.0; n],
            last_resample_step: 0,
            current_step: 0,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn current_step(&self) -> usize {
        self.current_step
    }

    pub fn set_current_step(&mut self, n: usize) {
        self.current_step = n;
    }

    pub fn last_resample_step(&self) -> usize {
        self.last_resample_step
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Zeroes the log-weights without touching positions.
    pub fn reset_weights(&mut self) {
        self.log_weights.iter_mut().for_each(|w| *w = 0.0);
    }

    pub fn ess(&self) -> f64 {
        // log-weights are finite and non-empty by construction
        ess(&self.log_weights).expect("particle system holds valid log-weights")
    }
}

/// `log w_i += Δφ · Σ_j g(x_ij)` at the current positions.
pub fn weight_update(system: &mut ParticleSystem, target: &TemperedTarget, delta_phi: f64) -> Result<()> {
    if !(delta_phi > 0.0) {
        return Err(SmcError::Parameter(format!("temperature increment must be positive, got {delta_phi}")));
    }
    let dim = system.dim;
    system
        .positions
        .par_chunks(dim)
        .zip(system.log_weights.par_iter_mut())
        .for_each(|(row, lw)| {
            let sum: f64 = row.iter().map(|&x| target.log_g(x)).sum();
            *lw += delta_phi * sum;
        });
    if let Some(bad) = system.log_weights.iter().find(|w| !w.is_finite()) {
        return Err(SmcError::Domain(format!("log-weight became {bad}; is g bounded above and finite at the particles?")));
    }
    Ok(())
}

/// Replaces the particles by `N` draws with replacement under the normalized
/// weights, then resets the weights and marks the current step as the last
/// resampling time.
pub fn multinomial_resample(rng: &mut StreamRng, system: &mut ParticleSystem) {
    let n = system.n_particles;
    let dim = system.dim;
    let max = system.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = system.log_weights.iter().map(|lw| (lw - max).exp()).collect();
    // the maximal particle has weight exactly 1, so the total is positive
    let index = WeightedIndex::new(&weights).expect("normalized weights are valid");
    let parents: Vec<usize> = (0..n).map(|_| index.sample(rng)).collect();
    let mut next = vec![0.0; n * dim];
    for (child, &parent) in next.chunks_mut(dim).zip(&parents) {
        child.copy_from_slice(&system.positions[parent * dim..(parent + 1) * dim]);
    }
    system.positions = next;
    system.reset_weights();
    system.last_resample_step = system.current_step;
}

/// Self-normalized estimate `Σ_i w_i h(x_i,coord) / Σ_i w_i`.
pub fn estimate_marginal(system: &ParticleSystem, h: impl Fn(f64) -> f64, coord: usize) -> Result<f64> {
    if coord >= system.dim {
        return Err(SmcError::Parameter(format!("coordinate {coord} out of range for d = {}", system.dim)));
    }
    let max = system.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (num, den) = system
        .log_weights
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(num, den), (i, lw)| {
            let w = (lw - max).exp();
            (num + w * h(system.positions[i * system.dim + coord]), den + w)
        });
    Ok(num / den)
}

/// ESS thresholds `a_k`, as fractions of `N`. The `k`-th resampling event uses
/// `a_k`; past the end of the list the last value is reused.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(Vec<f64>);

/// Half-width of the optional uniform jitter on thresholds.
pub const THRESHOLD_JITTER: f64 = 0.02;

impl Thresholds {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(SmcError::Parameter("at least one threshold is required".into()));
        }
        if let Some(a) = values.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
            return Err(SmcError::Parameter(format!("thresholds must lie in (0, 1), got {a}")));
        }
        Ok(Thresholds(values))
    }

    pub fn constant(a: f64) -> Result<Self> {
        Self::new(vec![a])
    }

    /// `count` thresholds drawn uniformly from `a ± 0.02`.
    pub fn jittered(a: f64, count: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut rng = stream(seed, Purpose::Jitter, 0, 0, 0);
        let values = (0..count.max(1))
            .map(|_| rng.random_range(a - THRESHOLD_JITTER..a + THRESHOLD_JITTER))
            .collect();
        Self::new(values)
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k.min(self.0.len() - 1)]
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResamplingPolicy {
    Never,
    /// Resample when `ESS < a_k·N`. With a grid, the test only runs at steps
    /// whose temperature crosses a point of `G_δ`; otherwise at every step.
    Threshold { thresholds: Thresholds, grid: Option<TestGrid> },
    /// Resample at the first step whose temperature reaches each listed time.
    FixedTimes(Vec<f64>),
}

impl ResamplingPolicy {
    pub fn threshold(a: f64) -> Result<Self> {
        Ok(ResamplingPolicy::Threshold { thresholds: Thresholds::constant(a)?, grid: None })
    }

    pub fn validate(&self, phi0: f64) -> Result<()> {
        if let ResamplingPolicy::FixedTimes(times) = self {
            if times.iter().any(|&t| !(t > phi0 && t < 1.0)) {
                return Err(SmcError::Parameter(format!("fixed resampling times must lie in ({phi0}, 1)")));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(SmcError::Parameter("fixed resampling times must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

/// Everything recorded during one run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// `φ_0, …, φ_p`.
    pub phis: Vec<f64>,
    /// ESS at every step; entry 0 is the initial ESS `N`.
    pub ess_trace: Vec<f64>,
    /// Whether each step ended with a resampling event.
    pub resampled: Vec<bool>,
    pub resample_steps: Vec<usize>,
    /// ESS just before each resampling event.
    pub pre_resample_ess: Vec<f64>,
    /// Log-weights after the last weight update (before any final resampling).
    pub terminal_log_weights: Vec<f64>,
    /// The system after the last step.
    pub system: ParticleSystem,
    pub kernel_applications: u64,
    pub elapsed: Duration,
}

/// One row of the per-step trace CSV.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub phi: f64,
    pub ess: f64,
    pub resampled: u8,
}

/// One row of the per-run summary CSV.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub terminal_ess: f64,
    pub n_resamples: usize,
    pub marginal_estimate: f64,
}

impl RunRecord {
    pub fn num_steps(&self) -> usize {
        self.phis.len() - 1
    }

    /// ESS of the final weights, `ESS_{(l,p)}`.
    pub fn terminal_ess(&self) -> f64 {
        self.ess_trace[self.num_steps()]
    }

    pub fn n_resamples(&self) -> usize {
        self.resample_steps.len()
    }

    pub fn resample_times(&self) -> Vec<f64> {
        self.resample_steps.iter().map(|&n| self.phis[n]).collect()
    }

    pub fn marginal(&self, h: impl Fn(f64) -> f64, coord: usize) -> Result<f64> {
        estimate_marginal(&self.system, h, coord)
    }

    pub fn trace_rows(&self) -> Vec<TraceRow> {
        self.phis
            .iter()
            .zip(&self.ess_trace)
            .zip(&self.resampled)
            .enumerate()
            .map(|(step, ((&phi, &ess), &r))| TraceRow { step, phi, ess, resampled: r as u8 })
            .collect()
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.trace_rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self, seed: u64, marginal_estimate: f64) -> RunSummary {
        RunSummary {
            seed,
            d: self.system.dim(),
            n: self.system.n_particles(),
            terminal_ess: self.terminal_ess(),
            n_resamples: self.n_resamples(),
            marginal_estimate,
        }
    }
}

/// Runs the tempered sampler over `schedule` with `n` particles in the
/// schedule's dimension.
pub fn run_smc(
    seed: u64,
    target: &TemperedTarget,
    schedule: &AnnealingSchedule,
    kernel: &KernelSpec,
    policy: &ResamplingPolicy,
    n: usize,
) -> Result<RunRecord> {
    let started = Instant::now();
    let phi0 = schedule.phi0();
    if phi0 < target.min_temperature() {
        return Err(SmcError::Config(format!(
            "schedule starts at φ0 = {phi0} but target {:?} was validated only down to {}",
            target.name(),
            target.min_temperature()
        )));
    }
    kernel.validate(target, phi0)?;
    policy.validate(phi0)?;

    let d = schedule.dim();
    let p = schedule.num_steps();
    let phis = schedule.values().to_vec();
    let mut system = ParticleSystem::init(seed, target, n, d, phi0)?;

    let mut ess_trace = Vec::with_capacity(p + 1);
    let mut resampled = Vec::with_capacity(p + 1);
    ess_trace.push(system.ess());
    resampled.push(false);
    let mut resample_steps = Vec::new();
    let mut pre_resample_ess = Vec::new();
    let mut next_fixed = 0usize;
    let mut terminal_log_weights = Vec::new();

    for step in 1..=p {
        let (prev, cur) = (phis[step - 1], phis[step]);
        weight_update(&mut system, target, cur - prev)?;
        system.current_step = step;
        apply_kernel_coordinatewise(&mut system, kernel, target, cur)?;
        let current_ess = system.ess();
        ess_trace.push(current_ess);

        let fire = match policy {
            ResamplingPolicy::Never => false,
            ResamplingPolicy::Threshold { thresholds, grid } => {
                let tested = grid.is_none_or(|g| g.crossed(phi0, prev, cur));
                tested && current_ess < thresholds.get(resample_steps.len()) * n as f64
            }
            ResamplingPolicy::FixedTimes(times) => {
                let mut reached = false;
                while next_fixed < times.len() && cur + 1e-12 >= times[next_fixed] {
                    next_fixed += 1;
                    reached = true;
                }
                reached
            }
        };

        if step == p {
            // captured before a final resampling resets the weights
            terminal_log_weights = system.log_weights.clone();
        }
        if fire {
            pre_resample_ess.push(current_ess);
            resample_steps.push(step);
            let mut rng = stream(seed, Purpose::Resample, step as u64, 0, 0);
            multinomial_resample(&mut rng, &mut system);
        }
        resampled.push(fire);
    }

    Ok(RunRecord {
        phis,
        ess_trace,
        resampled,
        resample_steps,
        pre_resample_ess,
        terminal_log_weights,
        system,
        kernel_applications: (p * n * d) as u64,
        elapsed: started.elapsed(),
    })
}
