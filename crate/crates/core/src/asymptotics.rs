//! Limiting objects of the sampler as `d → ∞`.
//!
//! * the variance profile `σ²_{s:t} = (1-φ_0) ∫_s^t v(u) du`, where `v(u)` is
//!   the asymptotic variance of `g` along a stationary `k_u` chain;
//! * the limiting ESS variable `ε_N = (Σ e^{X_i})² / Σ e^{2X_i}` with
//!   `X_i ~ N(0, σ²)`;
//! * limiting resampling times, where `e^{-σ²_{t_{k-1}:t}}` first drops below
//!   `a_k`, and their finite-`d` counterparts, where the single-particle
//!   moment ratio `E[W]²/E[W²]` does.
//!
//! `v(u)` equals `π_u(ĝ_u² - k_u(ĝ_u)²)` for the solution `ĝ_u` of the
//! Poisson equation `g - π_u(g) = ĝ_u - k_u ĝ_u`. We estimate it as the
//! Markov chain CLT variance with overlapping batch means, which needs no
//! truncation of the series `Σ_l (k_u^l - π_u)(g)`.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SmcError};
use crate::kernel::{apply_kernel_coordinatewise, kernel_step, KernelSpec};
use crate::rng::{stream, stream_key, Purpose};
use crate::schedule::{AnnealingSchedule, Tabulated, TestGrid};
use crate::smc::{ess, weight_update, ParticleSystem, Thresholds};
use crate::target::TemperedTarget;

pub const MIN_CHAIN_LENGTH: usize = 10_000;
pub const MIN_PROFILE_NODES: usize = 8;
pub const MIN_MC_REPS: usize = 1_000;
/// Below this many effective trajectories the moment-ratio estimate is refused.
pub const MIN_ESTIMATOR_ESS: f64 = 50.0;
const BISECTION_TOL: f64 = 1e-8;
const ANALYTIC_NODES: usize = 8193;

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Overlapping-batch-means estimate of `lim L·Var(mean of L terms)`.
///
/// Uses `n·b/((n-b+1)(n-b)) Σ_j (Ȳ_j - Ȳ)²` over all `n-b+1` windows of
/// length `b`; the standard error uses `Var ≈ 4b/(3n)·σ⁴`.
pub fn overlapping_batch_means(series: &[f64], batch: usize) -> Result<Estimate> {
    let n = series.len();
    if batch == 0 || batch >= n {
        return Err(SmcError::Parameter(format!("batch size {batch} invalid for a series of length {n}")));
    }
    let overall = series.iter().sum::<f64>() / n as f64;
    let b = batch as f64;
    let mut window: f64 = series[..batch].iter().sum();
    let mut ss = (window / b - overall).powi(2);
    for j in batch..n {
        window += series[j] - series[j - batch];
        ss += (window / b - overall).powi(2);
    }
    let nf = n as f64;
    let value = nf * b / ((nf - b + 1.0) * (nf - b)) * ss;
    let std_error = value * (4.0 * b / (3.0 * nf)).sqrt();
    Ok(Estimate { value, std_error })
}

/// `v(u)`, the asymptotic variance of `g` along a stationary `k_u` chain.
pub fn local_asymptotic_variance(
    target: &TemperedTarget,
    kernel: &KernelSpec,
    u: f64,
    chain_length: usize,
    seed: u64,
) -> Result<Estimate> {
    local_variance_on_stream(target, kernel, u, chain_length, seed, 0)
}

fn local_variance_on_stream(
    target: &TemperedTarget,
    kernel: &KernelSpec,
    u: f64,
    chain_length: usize,
    seed: u64,
    node: u64,
) -> Result<Estimate> {
    if chain_length < MIN_CHAIN_LENGTH {
        return Err(SmcError::Parameter(format!(
            "chain length {chain_length} is below the minimum {MIN_CHAIN_LENGTH}"
        )));
    }
    if !(u > 0.0 && u <= 1.0) {
        return Err(SmcError::Parameter(format!("temperature must lie in (0, 1], got {u}")));
    }
    kernel.validate(target, u)?;
    let mut rng = stream(seed, Purpose::Chain, node, 0, 0);
    let mut x = target.sample_stationary(&mut rng, u)?;
    let mut series = Vec::with_capacity(chain_length);
    for _ in 0..chain_length {
        x = kernel_step(&mut rng, kernel, target, u, x)?;
        series.push(target.log_g(x));
    }
    let batch = (chain_length as f64).sqrt().floor() as usize;
    overlapping_batch_means(&series, batch)
}

/// `v(u)` on a grid and the cumulative `σ²_{φ_0:t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    phi0: f64,
    grid_u: Vec<f64>,
    local_variance: Vec<f64>,
    std_errors: Vec<f64>,
    cumulative: Vec<f64>,
}

/// One row of the profile CSV export.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub u: f64,
    pub v: f64,
    pub sigma2_cum: f64,
}

impl VarianceProfile {
    /// Builds the profile from node values, integrating `v` with the trapezoid rule.
    pub fn from_local_variances(phi0: f64, grid_u: Vec<f64>, v: Vec<f64>, std_errors: Vec<f64>) -> Result<Self> {
        if grid_u.len() < 2 || grid_u.len() != v.len() || v.len() != std_errors.len() {
            return Err(SmcError::Parameter("profile needs ≥ 2 nodes with matching values".into()));
        }
        if (grid_u[0] - phi0).abs() > 1e-12 || grid_u.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SmcError::Parameter("profile grid must start at φ0 and increase".into()));
        }
        if let Some(bad) = v.iter().find(|&&x| !(x >= 0.0 && x.is_finite())) {
            return Err(SmcError::Precision(format!("local asymptotic variance {bad} is not a valid variance")));
        }
        let mut cumulative = vec![0.0; v.len()];
        for i in 1..v.len() {
            cumulative[i] = cumulative[i - 1] + (1.0 - phi0) * 0.5 * (v[i - 1] + v[i]) * (grid_u[i] - grid_u[i - 1]);
        }
        Ok(VarianceProfile { phi0, grid_u, local_variance: v, std_errors, cumulative })
    }

    pub fn phi0(&self) -> f64 {
        self.phi0
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid_u
    }

    pub fn local_variance(&self) -> &[f64] {
        &self.local_variance
    }

    pub fn std_errors(&self) -> &[f64] {
        &self.std_errors
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// `σ²_{φ_0:1}`.
    pub fn total(&self) -> f64 {
        *self.cumulative.last().expect("profile is non-empty")
    }

    /// `v` at `u` by linear interpolation between nodes.
    pub fn local_variance_at(&self, u: f64) -> f64 {
        let (i, frac) = self.locate(u);
        if frac == 0.0 {
            return self.local_variance[i];
        }
        self.local_variance[i] + frac * (self.local_variance[i + 1] - self.local_variance[i])
    }

    /// Cell index and fractional position of `u` (clamped to the grid).
    fn locate(&self, u: f64) -> (usize, f64) {
        let g = &self.grid_u;
        let last = g.len() - 1;
        if u <= g[0] {
            return (0, 0.0);
        }
        if u >= g[last] {
            return (last, 0.0);
        }
        let i = g.partition_point(|&x| x <= u) - 1;
        (i, (u - g[i]) / (g[i + 1] - g[i]))
    }

    /// `σ²_{φ_0:t}`. Node values are exact; inside a cell the increment
    /// follows the integral of the linearly interpolated `v`, rescaled so the
    /// curve is continuous and non-decreasing.
    pub fn sigma2_to(&self, t: f64) -> f64 {
        let (i, frac) = self.locate(t);
        if frac == 0.0 {
            return self.cumulative[i];
        }
        let (v0, v1) = (self.local_variance[i], self.local_variance[i + 1]);
        let full = 0.5 * (v0 + v1);
        let part = frac * (v0 + 0.5 * frac * (v1 - v0));
        let share = if full > 0.0 { part / full } else { frac };
        self.cumulative[i] + share * (self.cumulative[i + 1] - self.cumulative[i])
    }

    /// `σ²_{s:t} = σ²_{φ_0:t} - σ²_{φ_0:s}`.
    pub fn sigma2(&self, s: f64, t: f64) -> f64 {
        self.sigma2_to(t) - self.sigma2_to(s)
    }

    /// Variance for a general schedule `φ_n = φ(n/d)`:
    /// `∫_s^t v(φ(u)) φ'(u)² du` over `u ∈ [s, t] ⊂ [0, 1]`.
    ///
    /// For the linear schedule `φ(u) = φ_0 + (1-φ_0)u` this reduces to
    /// `σ²_{φ(s):φ(t)}`.
    pub fn general_schedule_sigma2(&self, phi: &Tabulated, s: f64, t: f64) -> f64 {
        const PANELS: usize = 4096;
        let h = (t - s) / PANELS as f64;
        let f = |u: f64| {
            let slope = phi.slope(u);
            self.local_variance_at(phi.eval(u)) * slope * slope
        };
        // midpoint rule: the tabulated φ has kinks at knots
        (0..PANELS).map(|k| f(s + (k as f64 + 0.5) * h)).sum::<f64>() * h
    }

    pub fn rows(&self) -> Vec<ProfileRow> {
        self.grid_u
            .iter()
            .zip(&self.local_variance)
            .zip(&self.cumulative)
            .map(|((&u, &v), &c)| ProfileRow { u, v, sigma2_cum: c })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Estimates `v(u)` on `n_nodes` equispaced temperatures in `[phi0, 1]` and
/// integrates it. Each node runs its own chain on its own stream.
pub fn build_variance_profile(
    target: &TemperedTarget,
    kernel: &KernelSpec,
    phi0: f64,
    n_nodes: usize,
    chain_length: usize,
    seed: u64,
) -> Result<VarianceProfile> {
    if n_nodes < MIN_PROFILE_NODES {
        return Err(SmcError::Parameter(format!("profile needs at least {MIN_PROFILE_NODES} nodes, got {n_nodes}")));
    }
    if !(phi0 > 0.0 && phi0 < 1.0) {
        return Err(SmcError::Parameter(format!("phi0 must lie in (0, 1), got {phi0}")));
    }
    let grid: Vec<f64> = (0..n_nodes)
        .map(|k| phi0 + (1.0 - phi0) * k as f64 / (n_nodes - 1) as f64)
        .map(|u| u.min(1.0))
        .collect();
    let estimates: Vec<Estimate> = grid
        .par_iter()
        .enumerate()
        .map(|(k, &u)| local_variance_on_stream(target, kernel, u, chain_length, seed, k as u64))
        .collect::<Result<_>>()?;
    let v = estimates.iter().map(|e| e.value).collect();
    let se = estimates.iter().map(|e| e.std_error).collect();
    VarianceProfile::from_local_variances(phi0, grid, v, se)
}

/// Closed-form profile for the Gaussian target under the perfect kernel:
/// `v(u) = 1/(2u²)` and `σ²_{φ_0:t} = (1-φ_0)(1/φ_0 - 1/t)/2`.
pub fn analytic_profile_perfect_gaussian(phi0: f64) -> Result<VarianceProfile> {
    if !(phi0 > 0.0 && phi0 < 1.0) {
        return Err(SmcError::Parameter(format!("phi0 must lie in (0, 1), got {phi0}")));
    }
    let grid: Vec<f64> = (0..ANALYTIC_NODES)
        .map(|k| phi0 + (1.0 - phi0) * k as f64 / (ANALYTIC_NODES - 1) as f64)
        .collect();
    let v: Vec<f64> = grid.iter().map(|u| 0.5 / (u * u)).collect();
    let cumulative = grid.iter().map(|t| 0.5 * (1.0 - phi0) * (1.0 / phi0 - 1.0 / t)).collect();
    let se = vec![0.0; grid.len()];
    Ok(VarianceProfile { phi0, grid_u: grid, local_variance: v, std_errors: se, cumulative })
}

/// `reps` independent draws of `ε_N` with `X_i ~ N(0, sigma2)`.
pub fn sample_limiting_ess(seed: u64, n: usize, sigma2: f64, reps: usize) -> Result<Vec<f64>> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(SmcError::Parameter(format!("variance must be non-negative, got {sigma2}")));
    }
    if n == 0 || reps == 0 {
        return Err(SmcError::Parameter("need N ≥ 1 and reps ≥ 1".into()));
    }
    let sd = sigma2.sqrt();
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Purpose::LimitingEss, r as u64, 0, 0);
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    sd * z
                })
                .collect();
            ess(&xs)
        })
        .collect()
}

/// A resampling time: the `k`-th crossing (1-based), its continuous time,
/// the step it falls on when computed at finite `d`, and the criterion value
/// there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResampleTime {
    pub k: usize,
    pub t: f64,
    #[serde(skip)]
    pub step: Option<usize>,
    pub criterion: f64,
}

/// One row of the times CSV export.
#[derive(Debug, Clone, Serialize)]
pub struct TimeRow {
    pub k: usize,
    pub t_k: f64,
    pub criterion_value_at_t_k: f64,
}

pub fn write_times_csv<W: Write>(times: &[ResampleTime], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in times {
        w.serialize(TimeRow { k: t.k, t_k: t.t, criterion_value_at_t_k: t.criterion })?;
    }
    w.flush()?;
    Ok(())
}

/// Limiting resampling times `t_k = inf{t ≥ t_{k-1} : e^{-σ²_{t_{k-1}:t}} < a_k}`.
///
/// Without a grid the crossing is located by bisection to `1e-8` in `t`;
/// with a grid only its points are candidates. Stops at the first `k` with no
/// crossing in `[t_{k-1}, 1]`.
pub fn limiting_resample_times(
    profile: &VarianceProfile,
    thresholds: &Thresholds,
    grid: Option<TestGrid>,
) -> Vec<ResampleTime> {
    let phi0 = profile.phi0();
    let mut times = Vec::new();
    let mut start = phi0;
    let grid_points = grid.map(|g| g.points(phi0));
    loop {
        let a = thresholds.get(times.len());
        let level = -a.ln();
        let found = match &grid_points {
            Some(points) => points
                .iter()
                .copied()
                .filter(|&t| t > start)
                .find(|&t| profile.sigma2(start, t) > level),
            None => {
                if profile.sigma2(start, 1.0) > level {
                    let (mut lo, mut hi) = (start, 1.0);
                    while hi - lo > BISECTION_TOL {
                        let mid = 0.5 * (lo + hi);
                        if profile.sigma2(start, mid) > level {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    Some(hi)
                } else {
                    None
                }
            }
        };
        match found {
            Some(t) => {
                times.push(ResampleTime {
                    k: times.len() + 1,
                    t,
                    step: None,
                    criterion: (-profile.sigma2(start, t)).exp(),
                });
                start = t;
            }
            None => return times,
        }
    }
}

/// Finite-`d` theoretical resampling times.
///
/// Simulates `mc_reps` independent single-particle trajectories (no
/// resampling) with `d` coordinates over the schedule, and tracks the ratio
/// `E[W]²/E[W²]` of the accumulated weight since the last found time. That
/// ratio is the ESS of the trajectory bank divided by `mc_reps`, computed
/// with max-centering. The first tested step with ratio `< a_k` is `t_k(d)`;
/// the window then restarts there.
pub fn theoretical_resample_times_d(
    target: &TemperedTarget,
    kernel: &KernelSpec,
    schedule: &AnnealingSchedule,
    thresholds: &Thresholds,
    mc_reps: usize,
    seed: u64,
    grid: Option<TestGrid>,
) -> Result<Vec<ResampleTime>> {
    if mc_reps < MIN_MC_REPS {
        return Err(SmcError::Parameter(format!("need at least {MIN_MC_REPS} trajectories, got {mc_reps}")));
    }
    let phi0 = schedule.phi0();
    kernel.validate(target, phi0)?;
    let phis = schedule.values();
    let bank_seed = stream_key(seed, Purpose::Theory, 0, 0, 0);
    let mut bank = ParticleSystem::init(bank_seed, target, mc_reps, schedule.dim(), phi0)?;
    let mut times = Vec::new();
    for step in 1..phis.len() {
        let (prev, cur) = (phis[step - 1], phis[step]);
        weight_update(&mut bank, target, cur - prev)?;
        bank.set_current_step(step);
        apply_kernel_coordinatewise(&mut bank, kernel, target, cur)?;
        if !grid.is_none_or(|g| g.crossed(phi0, prev, cur)) {
            continue;
        }
        let effective = bank.ess();
        if effective < MIN_ESTIMATOR_ESS {
            return Err(SmcError::Precision(format!(
                "moment-ratio estimate at t = {cur} rests on {effective:.1} effective trajectories; increase mc_reps"
            )));
        }
        let ratio = effective / mc_reps as f64;
        if ratio < thresholds.get(times.len()) {
            times.push(ResampleTime { k: times.len() + 1, t: cur, step: Some(step), criterion: ratio });
            bank.reset_weights();
        }
    }
    Ok(times)
}

/// `(1/√N)·[e^{σ²ρ(ρ-1)/2} + 1]^{1/ρ}`: the shape of the `L_ρ` error bound
/// with its unknown constant set to one.
pub fn mc_error_shape(sigma2: f64, rho: f64, n: usize) -> f64 {
    debug_assert!(rho >= 1.0 && n >= 1);
    ((0.5 * sigma2 * rho * (rho - 1.0)).exp() + 1.0).powf(1.0 / rho) / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_profile_values() {
        let p = analytic_profile_perfect_gaussian(0.5).unwrap();
        assert!((p.sigma2_to(1.0) - 0.25).abs() < 1e-12);
        assert_eq!(p.sigma2_to(0.5), 0.0);
        assert!((p.sigma2_to(0.625) - 0.1).abs() < 1e-10);
        // off-node evaluation
        let t = 0.7123;
        assert!((p.sigma2_to(t) - 0.25 * (2.0 - 1.0 / t)).abs() < 1e-10);
    }

    #[test]
    fn profile_segments_are_additive() {
        let p = analytic_profile_perfect_gaussian(0.3).unwrap();
        for (s, t) in [(0.3, 0.5), (0.41, 0.77), (0.5, 1.0)] {
            assert_eq!(p.sigma2(s, t), p.sigma2_to(t) - p.sigma2_to(s));
        }
    }

    #[test]
    fn trapezoid_profile_is_monotone() {
        let grid = vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        let v = vec![2.0, 0.0, 1.0, 3.0, 0.5, 0.2];
        let p = VarianceProfile::from_local_variances(0.5, grid, v, vec![0.0; 6]).unwrap();
        let mut last = 0.0;
        for k in 0..=1000 {
            let t = 0.5 + 0.5 * k as f64 / 1000.0;
            let c = p.sigma2_to(t);
            assert!(c >= last - 1e-15);
            last = c;
        }
        assert_eq!(p.sigma2_to(0.5), 0.0);
    }

    #[test]
    fn negative_local_variance_rejected() {
        let r = VarianceProfile::from_local_variances(0.5, vec![0.5, 1.0], vec![1.0, -0.1], vec![0.0; 2]);
        assert!(r.is_err());
    }

    #[test]
    fn obm_of_iid_series() {
        let mut rng = stream(3, Purpose::User, 0, 0, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        let est = overlapping_batch_means(&xs, 316).unwrap();
        assert!((est.value - 4.0).abs() < 4.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn chain_length_guard() {
        let t = TemperedTarget::gaussian(0.5).unwrap();
        let err = local_asymptotic_variance(&t, &KernelSpec::perfect(), 0.5, 9_999, 1).unwrap_err();
        assert!(matches!(err, SmcError::Parameter(_)));
        let err = build_variance_profile(&t, &KernelSpec::perfect(), 0.5, 7, 10_000, 1).unwrap_err();
        assert!(matches!(err, SmcError::Parameter(_)));
    }

    #[test]
    fn limiting_ess_degenerate_cases() {
        assert!(sample_limiting_ess(1, 37, 0.0, 50).unwrap().iter().all(|&e| e == 37.0));
        assert!(sample_limiting_ess(1, 1, 0.7, 50).unwrap().iter().all(|&e| e == 1.0));
        assert!(sample_limiting_ess(1, 10, -0.1, 5).is_err());
    }

    #[test]
    fn limiting_times_half_gaussian() {
        let p = analytic_profile_perfect_gaussian(0.5).unwrap();
        let th = Thresholds::constant((-0.1f64).exp()).unwrap();
        let times = limiting_resample_times(&p, &th, None);
        assert_eq!(times.len(), 2);
        assert!((times[0].t - 0.625).abs() < 1e-6);
        assert!((times[1].t - 1.0 / 1.2).abs() < 1e-6);
    }

    #[test]
    fn limiting_times_boundary() {
        let p = analytic_profile_perfect_gaussian(0.5).unwrap();
        // e^{-0.25} ≈ 0.7788 and -ln 0.8 ≈ 0.223 fits once
        assert_eq!(limiting_resample_times(&p, &Thresholds::constant(0.8).unwrap(), None).len(), 1);
        assert!(limiting_resample_times(&p, &Thresholds::constant(0.7).unwrap(), None).is_empty());
    }

    #[test]
    fn error_shape_examples() {
        assert!((mc_error_shape(0.8, 1.0, 25) - 0.4).abs() < 1e-15);
        assert!((mc_error_shape(0.0, 2.0, 100) - 2f64.sqrt() / 10.0).abs() < 1e-15);
        let expect = (0.25f64.exp() + 1.0).sqrt() / 10.0;
        assert!((mc_error_shape(0.25, 2.0, 100) - expect).abs() < 1e-15);
    }

    #[test]
    fn linear_general_schedule_matches_profile() {
        let p = analytic_profile_perfect_gaussian(0.5).unwrap();
        let linear = Tabulated::new(vec![(0.0, 0.5), (1.0, 1.0)]).unwrap();
        let g = p.general_schedule_sigma2(&linear, 0.0, 1.0);
        assert!((g - 0.25).abs() < 1e-6, "{g}");
    }
}
