//! Annealing sequences `φ_0 < φ_1 < … < φ_p = 1` and the map between
//! continuous time `t ∈ [φ_0, 1]` and step indices.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmcError};

/// Relative nudge applied before flooring so exact grid points never round down.
const GRID_NUDGE: f64 = 1e-12;

/// A piecewise-linear function given by `(x, y)` knots with strictly increasing `x`.
/// Outside the knot range the end values are held constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    knots: Vec<(f64, f64)>,
}

impl Tabulated {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(SmcError::Parameter("a tabulated function needs at least two knots".into()));
        }
        if knots.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(SmcError::Parameter("tabulated knots must be finite".into()));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(SmcError::Parameter("tabulated abscissae must be strictly increasing".into()));
        }
        Ok(Tabulated { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        if x <= k[0].0 {
            return k[0].1;
        }
        if x >= k[k.len() - 1].0 {
            return k[k.len() - 1].1;
        }
        let i = k.partition_point(|&(kx, _)| kx <= x);
        let (x0, y0) = k[i - 1];
        let (x1, y1) = k[i];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// Slope of the segment containing `x` (right derivative at knots).
    pub fn slope(&self, x: f64) -> f64 {
        let k = &self.knots;
        let i = k.partition_point(|&(kx, _)| kx <= x).clamp(1, k.len() - 1);
        let (x0, y0) = k[i - 1];
        let (x1, y1) = k[i];
        (y1 - y0) / (x1 - x0)
    }

    pub fn max_abs_slope(&self) -> f64 {
        self.knots
            .windows(2)
            .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Power { delta: f64 },
    /// `φ_n = φ(n/d)` for a tabulated `φ`; `max_slope` is the largest
    /// finite-difference slope of the table (reported, not enforced).
    General { table: Tabulated, max_slope: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealingSchedule {
    phi0: f64,
    dim: usize,
    values: Vec<f64>,
    kind: ScheduleKind,
}

fn check_phi0(phi0: f64) -> Result<()> {
    if phi0 > 0.0 && phi0 < 1.0 {
        Ok(())
    } else {
        Err(SmcError::Parameter(format!("phi0 must lie in (0, 1), got {phi0}")))
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d >= 1 {
        Ok(())
    } else {
        Err(SmcError::Parameter("dimension must be at least 1".into()))
    }
}

/// `φ_0 + n(1-φ_0)/p` for `n = 0..=p`, with the last entry pinned to exactly 1.
fn equispaced(phi0: f64, p: usize) -> Vec<f64> {
    let mut values: Vec<f64> = (0..=p)
        .map(|n| phi0 + n as f64 * (1.0 - phi0) / p as f64)
        .collect();
    values[p] = 1.0;
    values
}

impl AnnealingSchedule {
    /// `p = d` equal steps from `phi0` to 1.
    pub fn linear(phi0: f64, d: usize) -> Result<Self> {
        check_phi0(phi0)?;
        check_dim(d)?;
        Ok(AnnealingSchedule { phi0, dim: d, values: equispaced(phi0, d), kind: ScheduleKind::Linear })
    }

    /// `p = ⌊d^{1+δ}⌋` equal steps from `phi0` to 1.
    pub fn power(phi0: f64, d: usize, delta: f64) -> Result<Self> {
        check_phi0(phi0)?;
        check_dim(d)?;
        if !(delta > -1.0) || !delta.is_finite() {
            return Err(SmcError::Parameter(format!("delta must exceed -1, got {delta}")));
        }
        let p = power_steps(d, delta);
        Ok(AnnealingSchedule {
            phi0,
            dim: d,
            values: equispaced(phi0, p),
            kind: ScheduleKind::Power { delta },
        })
    }

    /// `φ_n = φ(n/d)` for a tabulated increasing `φ` on `[0, 1]` with `φ(1) = 1`.
    pub fn general(table: Tabulated, d: usize) -> Result<Self> {
        check_dim(d)?;
        let phi0 = table.eval(0.0);
        check_phi0(phi0)?;
        if (table.eval(1.0) - 1.0).abs() > 1e-12 {
            return Err(SmcError::Parameter(format!("φ(1) must equal 1, got {}", table.eval(1.0))));
        }
        let mut values: Vec<f64> = (0..=d).map(|n| table.eval(n as f64 / d as f64)).collect();
        values[d] = 1.0;
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SmcError::Parameter("tabulated schedule must be strictly increasing".into()));
        }
        let max_slope = table.max_abs_slope();
        Ok(AnnealingSchedule { phi0, dim: d, values, kind: ScheduleKind::General { table, max_slope } })
    }

    pub fn phi0(&self) -> f64 {
        self.phi0
    }

    /// Dimension the schedule was built for.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of annealing steps `p`.
    pub fn num_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn phi(&self, n: usize) -> f64 {
        self.values[n]
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }
}

/// `⌊d^{1+δ}⌋`, nudged so exact integer powers are not lost to rounding.
pub fn power_steps(d: usize, delta: f64) -> usize {
    let raw = (d as f64).powf(1.0 + delta);
    ((raw * (1.0 + GRID_NUDGE)).floor() as usize).max(1)
}

/// `l_d(t) = ⌊d(t-φ_0)/(1-φ_0)⌋`, the step at or before continuous time `t`.
pub fn step_index(t: f64, phi0: f64, d: usize) -> Result<usize> {
    check_phi0(phi0)?;
    if !(t >= phi0 && t <= 1.0) {
        return Err(SmcError::Domain(format!("time {t} lies outside [{phi0}, 1]")));
    }
    Ok(step_index_unchecked(t, phi0, d))
}

#[inline]
pub(crate) fn step_index_unchecked(t: f64, phi0: f64, d: usize) -> usize {
    let d_f = d as f64;
    let x = d_f * (t - phi0) / (1.0 - phi0);
    ((x + GRID_NUDGE * d_f).floor().max(0.0) as usize).min(d)
}

/// The grid `G_δ = {φ_0 + k(1-φ_0)/δ : k = 0..=δ}` at which a resampling
/// criterion may be tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestGrid {
    pub resolution: usize,
}

impl TestGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(SmcError::Parameter("grid resolution must be positive".into()));
        }
        Ok(TestGrid { resolution })
    }

    /// True when moving from `prev` to `cur` passes (or lands on) a grid point
    /// other than `prev`'s own cell start.
    pub fn crossed(&self, phi0: f64, prev: f64, cur: f64) -> bool {
        step_index_unchecked(cur, phi0, self.resolution) > step_index_unchecked(prev, phi0, self.resolution)
    }

    pub fn points(&self, phi0: f64) -> Vec<f64> {
        equispaced(phi0, self.resolution)
    }
}
